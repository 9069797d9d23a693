//! Acceptance suite. Runs each criterion in turn, prints one PASS/FAIL line
//! per criterion and exits nonzero if any hard check fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use heightcomp::align::{
    apply_affine, bilinear_fill, global_affine_fit, global_complete, knn_affine_complete, lwlr_complete, AffinePair,
    NeighborMetric, NeighborQueryConfig,
};
use heightcomp::degrade::{apply_degradation, build_change_mask, object_components, DegradationSpec};
use heightcomp::eval::{evaluate_completed, mae, rmse, ssim_arrays, MetricsReport, Region, SSIM_CONVENTION};
use heightcomp::features::{inject_lora, make_toy_backbone, strided_dense_extract, strided_dense_extract_full};
use heightcomp::raster::{dilate_mask, save_raster, BitMask, GridMeta, HeightRaster, RelativeDepthMap, RgbImage};
use heightcomp::synth::{region_affine_relative, synth_scene, two_region_scene, SceneSpec, BUILDING, TREE};
use heightcomp::tta::{prepare_backbone, tta_optimize, AnchorObjective, LossKind, ScaleShiftHead, TtaConfig, TtaMode};

struct Scene {
    rgb: RgbImage,
    gt: HeightRaster,
    prior: HeightRaster,
    change: BitMask,
}

fn degraded(spec: &SceneSpec, fraction: f64, buffer_m: f64, seed: u64) -> Scene {
    let s = synth_scene(spec).unwrap();
    let change = build_change_mask(
        &s.lulc,
        &DegradationSpec {
            target_fraction: fraction,
            buffer_m,
            object_classes: BTreeSet::from([BUILDING, TREE]),
            seed,
        },
        None,
    )
    .unwrap()
    .mask;
    let prior = apply_degradation(&s.gt, &change).unwrap();
    Scene {
        rgb: s.rgb,
        gt: s.gt,
        prior,
        change,
    }
}

fn rmse_on(pred: &HeightRaster, gt: &HeightRaster, region: &BitMask) -> f64 {
    rmse(pred, gt, region).unwrap()
}

fn max_diff_on(a: &HeightRaster, b: &HeightRaster, region: &BitMask) -> f64 {
    region
        .bits
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((r, c), _)| (a.values[[r, c]] - b.values[[r, c]]).abs())
        .fold(0.0, f64::max)
}

fn within(limit: Duration, t0: Instant) -> String {
    let e = t0.elapsed();
    assert!(e < limit, "took {e:?}, limit {limit:?}");
    format!("{:.1} s", e.as_secs_f64())
}

fn c1_zero_init_identity() -> String {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let spec = SceneSpec {
            width: 32,
            height: 32,
            buildings: 8,
            trees: 8,
            min_size_px: 3,
            max_size_px: 6,
            seed,
            ..Default::default()
        };
        let k = degraded(&spec, 0.4, 3.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rng.random_range(0.2..3.0), rng.random_range(-5.0..5.0));
        let rel = RelativeDepthMap::new(
            k.gt.meta.clone(),
            k.gt.values.mapv(|h| a * h + b + 0.02 * h * h),
        )
        .unwrap();
        let base = make_toy_backbone(seed, 8, 16, 1, true).unwrap();
        let cfg = TtaConfig {
            steps: 0,
            hidden: 32,
            seed,
            ..Default::default()
        };
        let mut bb = prepare_backbone(&base, &cfg).unwrap();
        // adapted forward equals frozen forward bit for bit
        let w = k.rgb.data.slice(ndarray::s![.., ..32, ..32]);
        assert_eq!(base.forward(w).unwrap().tokens, bb.forward(w).unwrap().tokens);
        let out = tta_optimize(&k.rgb, &rel, &k.prior, &cfg, &mut bb).unwrap();
        let g = global_complete(&rel, &k.prior).unwrap();
        worst = worst.max(max_diff_on(&out.completed, &g, &k.prior.nodata));
    }
    assert!(worst <= 1e-6, "max deviation {worst:e}");
    format!("10 scenes, max |prior2dsm - global| on nodata = {worst:.1e}, {}", within(Duration::from_secs(10), t0))
}

fn c2_affine_oracle() -> String {
    let t0 = Instant::now();
    let spec = SceneSpec {
        width: 64,
        height: 64,
        buildings: 16,
        trees: 16,
        min_size_px: 3,
        max_size_px: 8,
        seed: 11,
        ..Default::default()
    };
    let k = degraded(&spec, 0.5, 3.0, 11);
    let rel = RelativeDepthMap::new(k.gt.meta.clone(), k.gt.values.mapv(|h| (h - 3.0) / 0.5)).unwrap();
    let fit = global_affine_fit(&rel, &k.prior).unwrap();
    let closed = rmse_on(&apply_affine(&rel, fit.pair), &k.gt, &k.change);
    assert!(closed < 1e-6, "global fit rmse {closed:e}");
    let cfg = TtaConfig {
        steps: 100,
        ..Default::default()
    };
    let base = make_toy_backbone(0, 16, 32, 2, true).unwrap();
    let mut bb = prepare_backbone(&base, &cfg).unwrap();
    let out = tta_optimize(&k.rgb, &rel, &k.prior, &cfg, &mut bb).unwrap();
    let tta = rmse_on(&out.completed, &k.gt, &k.change);
    assert!(tta < 0.05, "tta rmse {tta}");
    assert!(out.final_loss() <= out.initial_loss());
    format!(
        "global fit ({:.4}, {:.4}) rmse {closed:.1e} m; tta (full, 100 steps) rmse {tta:.4} m; {}",
        fit.pair.scale,
        fit.pair.shift,
        within(Duration::from_secs(60), t0)
    )
}

struct Piecewise {
    rgb: RgbImage,
    gt: HeightRaster,
    rel: RelativeDepthMap,
    prior: HeightRaster,
    change: BitMask,
}

fn piecewise_scene() -> Piecewise {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        buildings: 40,
        trees: 40,
        min_size_px: 3,
        max_size_px: 9,
        seed: 3,
        ..Default::default()
    };
    let (s, region) = two_region_scene(&spec).unwrap();
    let rel = region_affine_relative(&s.gt, &region, &[(1.0, 0.0), (0.4, 6.0)]).unwrap();
    let change = build_change_mask(
        &s.lulc,
        &DegradationSpec {
            target_fraction: 0.5,
            buffer_m: 3.0,
            object_classes: BTreeSet::from([BUILDING, TREE]),
            seed: 1,
        },
        None,
    )
    .unwrap()
    .mask;
    let prior = apply_degradation(&s.gt, &change).unwrap();
    Piecewise {
        rgb: s.rgb,
        gt: s.gt,
        rel,
        prior,
        change,
    }
}

fn piecewise_cfg(mode: TtaMode) -> TtaConfig {
    TtaConfig {
        steps: 100,
        lr_head: 3e-3,
        loss: LossKind::L2,
        mode,
        ..Default::default()
    }
}

fn run_piecewise(p: &Piecewise, mode: TtaMode) -> (f64, f64, f64) {
    let cfg = piecewise_cfg(mode);
    let base = make_toy_backbone(0, 8, 32, 2, true).unwrap();
    let mut bb = prepare_backbone(&base, &cfg).unwrap();
    let out = tta_optimize(&p.rgb, &p.rel, &p.prior, &cfg, &mut bb).unwrap();
    (rmse_on(&out.completed, &p.gt, &p.change), out.initial_loss(), out.final_loss())
}

fn c3_piecewise() -> String {
    let t0 = Instant::now();
    let p = piecewise_scene();
    let g = rmse_on(&global_complete(&p.rel, &p.prior).unwrap(), &p.gt, &p.change);
    let (full, l0, l1) = run_piecewise(&p, TtaMode::Full);
    assert!(full <= 0.5 * g, "prior2dsm {full} vs global {g}");
    assert!(l1 <= 0.5 * l0, "anchor loss {l0} -> {l1}");
    format!(
        "global rmse {g:.3} m, prior2dsm rmse {full:.3} m (ratio {:.2}); anchor loss {l0:.3} -> {l1:.3}; {}",
        full / g,
        within(Duration::from_secs(120), t0)
    )
}

fn c4_baselines() -> String {
    let meta = GridMeta::new(16, 16, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let relv = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..10.0));
    let hv = Array2::from_shape_fn((16, 16), |(r, c)| 1.7 * relv[[r, c]] + 2.0 + rng.random_range(-1.0..1.0) + 0.1 * (r + c) as f64);
    let mut prior = HeightRaster::from_values(meta.clone(), hv).unwrap();
    for r in 4..9 {
        for c in 5..12 {
            prior.nodata.bits[[r, c]] = true;
            prior.values[[r, c]] = f64::NAN;
        }
    }
    let rel = RelativeDepthMap::new(meta.clone(), relv).unwrap();
    let g = global_complete(&rel, &prior).unwrap();
    let extent = 16.0 * 2f64.sqrt();

    let mut lwlr_dev = Vec::new();
    for mult in [10.0, 1e4, 1e6] {
        let cfg = NeighborQueryConfig {
            bandwidth_m: mult * extent,
            ..Default::default()
        };
        lwlr_dev.push((mult, max_diff_on(&lwlr_complete(&rel, &prior, &cfg).unwrap(), &g, &prior.nodata)));
    }
    assert!(lwlr_dev[1].1 <= 1e-6 && lwlr_dev[2].1 <= 1e-6, "lwlr deviations {lwlr_dev:?}");

    // exactly affine prior: 10x extent must already match
    let mut exact = prior.clone();
    for ((r, c), v) in exact.values.indexed_iter_mut() {
        if !prior.nodata.bits[[r, c]] {
            *v = 1.7 * rel.values[[r, c]] + 2.0;
        }
    }
    let ge = global_complete(&rel, &exact).unwrap();
    let cfg10 = NeighborQueryConfig {
        bandwidth_m: 10.0 * extent,
        ..Default::default()
    };
    let exact_dev = max_diff_on(&lwlr_complete(&rel, &exact, &cfg10).unwrap(), &ge, &prior.nodata);
    assert!(exact_dev <= 1e-6, "lwlr 10x on affine prior {exact_dev:e}");

    let knn_cfg = NeighborQueryConfig {
        k: prior.valid_count(),
        metric: NeighborMetric::Spatial,
        ..Default::default()
    };
    let knn_dev = max_diff_on(&knn_affine_complete(&rel, &prior, &knn_cfg, None).unwrap(), &g, &prior.nodata);
    assert!(knn_dev <= 1e-6, "knn deviation {knn_dev:e}");

    let (a, b, c, d) = (3.0, -0.5, 0.25, 0.125);
    let plane = Array2::from_shape_fn((16, 16), |(y, x)| a + b * x as f64 + c * y as f64 + d * (x * y) as f64);
    let mut holed = HeightRaster::from_values(meta, plane.clone()).unwrap();
    for (r0, c0, h, w) in [(2, 2, 3, 4), (8, 9, 5, 3), (12, 3, 2, 2)] {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                holed.nodata.bits[[r, c]] = true;
                holed.values[[r, c]] = f64::NAN;
            }
        }
    }
    let filled = bilinear_fill(&holed).unwrap();
    let bil_dev = plane
        .indexed_iter()
        .map(|((r, c), &v)| (filled.values[[r, c]] - v).abs())
        .fold(0.0, f64::max);
    assert!(bil_dev <= 1e-9, "bilinear deviation {bil_dev:e}");
    format!(
        "lwlr vs global: affine prior 1e1x extent {exact_dev:.1e}; noisy prior {}; knn(k=|valid|) {knn_dev:.1e}; bilinear plane {bil_dev:.1e}",
        lwlr_dev
            .iter()
            .map(|(m, d)| format!("{m:.0e}x extent {d:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    )
}

fn c5_gradient() -> String {
    let meta = GridMeta::new(16, 16, 1.0).unwrap();
    let rgb = RgbImage::new(
        meta.clone(),
        Array3::from_shape_fn((3, 16, 16), |(ch, r, c)| (((ch * 256 + r * 16 + c) as f64) * 0.21).cos() * 0.5 + 0.5),
    )
    .unwrap();
    let rel = RelativeDepthMap::new(meta.clone(), Array2::from_shape_fn((16, 16), |(r, c)| ((r * 16 + c) as f64 * 0.13).sin())).unwrap();
    let mut hv = Array2::from_shape_fn((16, 16), |(r, c)| 4.0 + 2.5 * rel.values[[r, c]] + 0.3 * ((3 * r + c) as f64).sin());
    for i in 0..6 {
        hv[[i, 15 - i]] = f64::NAN;
    }
    let prior = HeightRaster::from_values(meta, hv).unwrap();
    let bb = make_toy_backbone(1, 16, 16, 1, true).unwrap();
    let ex = strided_dense_extract_full(&rgb, &bb, 16).unwrap();
    assert_eq!(ex.map.cell_shape(), (1, 1));
    let tokens = ex.map.token_matrix();
    let holdout = Array2::from_elem((16, 16), false);
    let mut worst = 0.0f64;
    for loss in [LossKind::L1, LossKind::L2] {
        let obj = AnchorObjective::new(&ex.map, &rel, &prior, &holdout, loss, false, AffinePair::new(0.8, 3.0), 1.7);
        let mut head = ScaleShiftHead::new(9, 16, 24, obj.init, obj.output_scale);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        head.fc3.weight.value.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        head.fc3.bias.value.mapv_inplace(|_| rng.random_range(-0.05..0.05));
        let (raw, cache) = head.forward(&tokens);
        let (_, d_raw) = obj.loss_and_grad(&raw);
        head.zero_grad();
        head.backward(&cache, &d_raw);
        let loss_of = |h: &ScaleShiftHead| obj.anchor_loss(&h.forward(&tokens).0);
        let eps = 1e-6;
        for bias in [false, true] {
            let (rows, cols) = if bias { head.fc3.bias.value.dim() } else { head.fc3.weight.value.dim() };
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = head.clone();
                    let mut minus = head.clone();
                    let (p, m) = if bias {
                        (&mut plus.fc3.bias.value, &mut minus.fc3.bias.value)
                    } else {
                        (&mut plus.fc3.weight.value, &mut minus.fc3.weight.value)
                    };
                    p[[i, j]] += eps;
                    m[[i, j]] -= eps;
                    let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                    let ana = if bias { head.fc3.bias.grad[[i, j]] } else { head.fc3.weight.grad[[i, j]] };
                    let rel_err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-10);
                    worst = worst.max(rel_err);
                }
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
    format!("L1 and L2, final-layer weight and bias: max relative error {worst:.1e}")
}

/// Per-window SSIM with explicit Gaussian sums.
fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>, l: f64) -> f64 {
    let n = 11;
    let g1: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let z: f64 = g1.iter().sum::<f64>().powi(2);
    let (h, w) = a.dim();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - n {
        for c in 0..=w - n {
            let wsum = |f: &dyn Fn(usize, usize) -> f64| {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += g1[i] * g1[j] / z * f(r + i, c + j);
                    }
                }
                s
            };
            let ma = wsum(&|y, x| a[[y, x]]);
            let mb = wsum(&|y, x| b[[y, x]]);
            let va = wsum(&|y, x| (a[[y, x]] - ma).powi(2));
            let vb = wsum(&|y, x| (b[[y, x]] - mb).powi(2));
            let cov = wsum(&|y, x| (a[[y, x]] - ma) * (b[[y, x]] - mb));
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn c6_metrics() -> String {
    let meta = GridMeta::new(2, 1, 1.0).unwrap();
    let gt = HeightRaster::from_values(meta.clone(), Array2::from_shape_vec((1, 2), vec![4.0, 4.0]).unwrap()).unwrap();
    let pred = HeightRaster::from_values(meta.clone(), Array2::from_shape_vec((1, 2), vec![5.0, 1.0]).unwrap()).unwrap();
    let all = BitMask::filled(&meta, true);
    assert_eq!(mae(&pred, &gt, &all).unwrap(), 2.0);
    assert!((rmse(&pred, &gt, &all).unwrap() - 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(mae(&gt, &gt, &all).unwrap(), 0.0);
    let off = HeightRaster::from_values(meta.clone(), gt.values.mapv(|v| v + 2.0)).unwrap();
    assert_eq!((mae(&off, &gt, &all).unwrap(), rmse(&off, &gt, &all).unwrap()), (2.0, 2.0));
    assert!(mae(&pred, &gt, &BitMask::filled(&meta, false)).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let m = GridMeta::new(n, 1, 1.0).unwrap();
        let a = HeightRaster::from_values(m.clone(), Array2::from_shape_fn((1, n), |_| rng.random_range(-50.0..50.0))).unwrap();
        let b = HeightRaster::from_values(m.clone(), Array2::from_shape_fn((1, n), |_| rng.random_range(-50.0..50.0))).unwrap();
        let reg = BitMask::filled(&m, true);
        assert!(rmse(&a, &b, &reg).unwrap() >= mae(&a, &b, &reg).unwrap() - 1e-12);
    }

    let x = Array2::from_shape_fn((24, 20), |_| rng.random_range(0.0..30.0));
    let self_dev = (ssim_arrays(&x, &x, 30.0).unwrap() - 1.0).abs();
    assert!(self_dev <= 1e-9);
    assert!(ssim_arrays(&x, &x.mapv(|v| 30.0 - v), 30.0).unwrap() < 1.0);
    assert!(ssim_arrays(&x.slice(ndarray::s![..10, ..]).to_owned(), &x.slice(ndarray::s![..10, ..]).to_owned(), 30.0).is_err());

    let board = Array2::from_shape_fn((16, 16), |(r, c)| ((r + c) % 2) as f64);
    let shifted = Array2::from_shape_fn((16, 16), |(r, c)| ((r + c + 1) % 2) as f64);
    let got = ssim_arrays(&board, &shifted, 1.0).unwrap();
    let want = ssim_oracle(&board, &shifted, 1.0);
    let y = Array2::from_shape_fn((24, 20), |(r, c)| x[[r, c]] * 0.7 + rng.random_range(0.0..5.0) + (r as f64) * 0.3);
    let oracle_dev = (got - want).abs().max((ssim_arrays(&x, &y, 30.0).unwrap() - ssim_oracle(&x, &y, 30.0)).abs());
    assert!(oracle_dev <= 1e-6, "oracle deviation {oracle_dev:e}");
    let sym = (ssim_arrays(&x, &y, 30.0).unwrap() - ssim_arrays(&y, &x, 30.0).unwrap()).abs();
    assert!(sym <= 1e-9);

    let m16 = GridMeta::new(16, 16, 1.0).unwrap();
    let g16 = HeightRaster::from_values(m16.clone(), board.mapv(|v| 3.0 * v)).unwrap();
    let mut change = BitMask::filled(&m16, false);
    change.bits[[7, 7]] = true;
    let rep = evaluate_completed(&g16, &g16, &change).unwrap();
    assert_eq!((rep.mae_m, rep.rmse_m), (0.0, 0.0));
    assert!((rep.ssim - 1.0).abs() < 1e-12);
    assert!(evaluate_completed(&g16, &g16, &BitMask::filled(&m16, false)).is_err());
    let row = MetricsReport {
        mae_m: 5.08,
        rmse_m: 9.01,
        ssim: 0.82,
        n_pixels: 1,
        region: Region::Completed,
        data_range_m: 1.0,
        ssim_convention: SSIM_CONVENTION.into(),
    }
    .row("Global Rescaling", 0.25);
    assert_eq!(row, "Global Rescaling, 25%: 5.08 / 9.01 / 0.82");
    format!("examples ok; 1000 random pairs rmse >= mae; ssim(x,x) dev {self_dev:.1e}; oracle dev {oracle_dev:.1e}; symmetry dev {sym:.1e}")
}

fn c7_degradation() -> String {
    let spec = SceneSpec {
        width: 240,
        height: 240,
        buildings: 100,
        trees: 100,
        min_size_px: 3,
        max_size_px: 6,
        seed: 77,
        ..Default::default()
    };
    let s = synth_scene(&spec).unwrap();
    let classes = BTreeSet::from([BUILDING, TREE]);
    let comps = object_components(&s.lulc, &classes);
    assert_eq!(comps.len(), 200);
    let dir = tempfile::tempdir().unwrap();
    let mut summary = Vec::new();
    for level in [0.25, 0.5, 0.75] {
        let ds = DegradationSpec {
            target_fraction: level,
            buffer_m: 10.0,
            object_classes: classes.clone(),
            seed: 5,
        };
        let a = build_change_mask(&s.lulc, &ds, None).unwrap();
        assert!(a.record.achieved_fraction >= level, "level {level}: {}", a.record.achieved_fraction);
        for &i in &a.selected {
            let mut obj = BitMask::filled(&s.lulc.meta, false);
            for &(r, c) in &comps[i].cells {
                obj.bits[[r, c]] = true;
            }
            assert!(dilate_mask(&obj, 10.0).is_subset_of(&a.mask), "object {i} buffer escapes the mask");
        }
        let b = build_change_mask(&s.lulc, &ds, None).unwrap();
        let (pa, pb) = (dir.path().join("a.tif"), dir.path().join("b.tif"));
        save_raster(&a.mask, &pa).unwrap();
        save_raster(&b.mask, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        summary.push(format!(
            "{:.0}% -> {:.3} ({} objects)",
            level * 100.0,
            a.record.achieved_fraction,
            a.selected.len()
        ));
    }
    format!("200 objects; {}; buffers inside masks; reruns byte-identical", summary.join(", "))
}

fn c8_density() -> String {
    let meta = GridMeta::new(64, 48, 1.0).unwrap();
    let rgb = RgbImage::new(
        meta,
        Array3::from_shape_fn((3, 48, 64), |(ch, r, c)| ((ch * 7 + r * 3 + c * 5) % 17) as f64 / 16.0),
    )
    .unwrap();
    let bb = make_toy_backbone(2, 16, 16, 1, true).unwrap();
    let ex = strided_dense_extract_full(&rgb, &bb, 4).unwrap();
    assert_eq!(ex.views.len(), 16);
    assert!(ex.counts.iter().all(|&n| n == 16), "view counts {:?}", ex.counts);
    let native = bb.forward(rgb.data.view()).unwrap();
    let at_p = strided_dense_extract(&rgb, &bb, 16).unwrap();
    let d = at_p
        .token_matrix()
        .iter()
        .zip(native.tokens.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(d == 0.0, "s = P differs from native tokens by {d:e}");
    let _ = inject_lora(&bb, 8, 16.0, &["qkv"], 0).unwrap();
    "P=16, s=4: every pixel covered by 16 views; s=P equals native tokens exactly".into()
}

fn c9_ablation() -> String {
    let p = piecewise_scene();
    let g = rmse_on(&global_complete(&p.rel, &p.prior).unwrap(), &p.gt, &p.change);
    let full = run_piecewise(&p, TtaMode::Full).0;
    let frozen = run_piecewise(&p, TtaMode::FrozenBackbone).0;
    let direct = run_piecewise(&p, TtaMode::DirectHeight).0;
    assert!(full <= g, "full {full} > global {g}");
    let soft = full <= frozen && frozen <= direct;
    format!(
        "global {g:.3}, full {full:.3}, frozen {frozen:.3}, direct {direct:.3}; soft ordering full <= frozen <= direct {}",
        if soft { "holds" } else { "does not hold (reported only)" }
    )
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_heightcomp"))
}

fn cli(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(bin()).args(args).current_dir(cwd).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn c10_cli() -> String {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let manifests: Vec<String> = cli(&["synth", "--out", "tiles", "--tiles", "4", "--size", "64", "--buildings", "14", "--trees", "14"], cwd)
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(manifests.len(), 4);
    let mut margs: Vec<&str> = Vec::new();
    for m in &manifests {
        margs.extend(["--manifest", m.as_str()]);
    }
    let common = ["--out", "runs", "--set", "methods=[\"global\", \"prior2dsm\"]"];
    cli(&[&["degrade"], margs.as_slice(), &common].concat(), cwd);
    for m in &manifests {
        for method in ["global", "prior2dsm"] {
            cli(&[&["complete", "--manifest", m, "--method", method], &common[..]].concat(), cwd);
            let rows = cli(&[&["evaluate", "--manifest", m, "--method", method], &common[..]].concat(), cwd);
            assert_eq!(rows.lines().count(), 3);
        }
    }
    let table = cli(&[&["benchmark"], margs.as_slice(), &common].concat(), cwd);
    let rows: Vec<&str> = table.lines().skip(1).filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(rows.len(), 6, "{table}");
    let limit = within(Duration::from_secs(300), t0);
    format!("4 tiles, exit 0, {} table rows, {limit}\n{}", rows.len(), table.trim_end())
}

fn main() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        ("zero-init identity", c1_zero_init_identity),
        ("affine oracle recovery", c2_affine_oracle),
        ("piecewise-affine improvement", c3_piecewise),
        ("baseline equivalences", c4_baselines),
        ("gradient check", c5_gradient),
        ("metric sanity", c6_metrics),
        ("degradation protocol", c7_degradation),
        ("strided density", c8_density),
        ("ablation ordering", c9_ablation),
        ("end-to-end CLI", c10_cli),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => println!("criterion {:>2} PASS  {name} [{:.1} s]: {detail}", i + 1, t0.elapsed().as_secs_f64()),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {:>2} FAIL  {name} [{:.1} s]: {msg}", i + 1, t0.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
