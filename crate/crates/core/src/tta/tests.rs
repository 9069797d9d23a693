use std::collections::BTreeSet;

use ndarray::Array2;

use super::*;
use crate::align::{global_complete, AffinePair};
use crate::degrade::{apply_degradation, build_change_mask, DegradationSpec};
use crate::features::{backbone_to_tensors, make_toy_backbone, strided_dense_extract_full, VitBackbone};
use crate::raster::{GridMeta, HeightRaster, RelativeDepthMap, RgbImage};
use crate::synth::{synth_scene, SceneSpec, BUILDING, TREE};

struct Case {
    rgb: RgbImage,
    gt: HeightRaster,
    prior: HeightRaster,
    rel: RelativeDepthMap,
}

fn case(seed: u64, size: usize, fraction: f64) -> Case {
    let s = synth_scene(&SceneSpec {
        width: size,
        height: size,
        buildings: size / 4,
        trees: size / 4,
        min_size_px: 3,
        max_size_px: 6,
        seed,
        ..Default::default()
    })
    .unwrap();
    let spec = DegradationSpec {
        target_fraction: fraction,
        buffer_m: 3.0,
        object_classes: BTreeSet::from([BUILDING, TREE]),
        seed,
    };
    let change = build_change_mask(&s.lulc, &spec, None).unwrap();
    let prior = apply_degradation(&s.gt, &change.mask).unwrap();
    let rel = RelativeDepthMap::new(s.gt.meta.clone(), s.gt.values.mapv(|h| (h - 3.0) / 0.5)).unwrap();
    Case {
        rgb: s.rgb,
        gt: s.gt,
        prior,
        rel,
    }
}

fn toy() -> VitBackbone {
    make_toy_backbone(7, 8, 16, 1, true).unwrap()
}

fn cfg(mode: TtaMode, steps: usize) -> TtaConfig {
    TtaConfig {
        steps,
        mode,
        hidden: 32,
        ..Default::default()
    }
}

fn rmse_on_nodata(pred: &HeightRaster, gt: &HeightRaster, prior: &HeightRaster) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for ((r, c), &g) in gt.values.indexed_iter() {
        if prior.nodata.bits[[r, c]] {
            s += (pred.values[[r, c]] - g).powi(2);
            n += 1;
        }
    }
    (s / n as f64).sqrt()
}

#[test]
fn zero_steps_equals_global_rescaling() {
    let k = case(1, 40, 0.5);
    let mut rel = k.rel.clone();
    rel.values.mapv_inplace(|v| 0.3 * v + 0.01 * v * v);
    let base = global_complete(&rel, &k.prior).unwrap();
    for mode in [TtaMode::FrozenBackbone, TtaMode::Full] {
        let c = cfg(mode, 0);
        let mut bb = prepare_backbone(&toy(), &c).unwrap();
        let out = tta_optimize(&k.rgb, &rel, &k.prior, &c, &mut bb).unwrap();
        for ((r, col), &v) in out.completed.values.indexed_iter() {
            assert!((v - base.values[[r, col]]).abs() < 1e-6, "{mode:?} at ({r}, {col})");
        }
        assert_eq!(out.trace.len(), 1);
    }
}

#[test]
fn valid_prior_cells_are_copied() {
    let k = case(2, 32, 0.5);
    let c = cfg(TtaMode::FrozenBackbone, 5);
    let mut bb = toy();
    let out = tta_optimize(&k.rgb, &k.rel, &k.prior, &c, &mut bb).unwrap();
    for (r, col, h) in k.prior.valid_cells() {
        assert_eq!(out.completed.values[[r, col]], h);
    }
    assert!(!out.completed.has_nodata());
}

#[test]
fn frozen_mode_leaves_backbone_untouched() {
    let k = case(3, 32, 0.5);
    let c = cfg(TtaMode::FrozenBackbone, 5);
    let mut bb = inject_lora(&toy(), 4, 8.0, &["qkv", "out_proj"], 0).unwrap();
    let before = backbone_to_tensors(&bb).to_bytes();
    let adapters = bb.adapters();
    tta_optimize(&k.rgb, &k.rel, &k.prior, &c, &mut bb).unwrap();
    assert_eq!(backbone_to_tensors(&bb).to_bytes(), before);
    assert_eq!(bb.adapters(), adapters);
}

#[test]
fn full_mode_changes_only_adapters() {
    let mut k = case(4, 32, 0.5);
    // break the exact affine relation so there is something to fit
    k.rel.values.indexed_iter_mut().for_each(|((r, c), v)| *v += 0.3 * ((r as f64) * 0.7).sin() * ((c as f64) * 0.4).cos());
    let c = TtaConfig {
        lr_lora: 1e-2,
        ..cfg(TtaMode::Full, 3)
    };
    let base = toy();
    let mut bb = prepare_backbone(&base, &c).unwrap();
    let frozen = backbone_to_tensors(&bb).to_bytes();
    let adapters = bb.adapters();
    tta_optimize(&k.rgb, &k.rel, &k.prior, &c, &mut bb).unwrap();
    assert_eq!(backbone_to_tensors(&bb).to_bytes(), frozen);
    assert_ne!(bb.adapters(), adapters);
}

#[test]
fn full_mode_requires_adapters() {
    let k = case(5, 32, 0.5);
    let mut bb = toy();
    let err = tta_optimize(&k.rgb, &k.rel, &k.prior, &cfg(TtaMode::Full, 1), &mut bb);
    assert!(err.is_err());
}

#[test]
fn too_few_anchors_is_an_error() {
    let meta = GridMeta::new(16, 16, 1.0).unwrap();
    let rgb = RgbImage::new(meta.clone(), ndarray::Array3::from_elem((3, 16, 16), 0.5)).unwrap();
    let mut values = Array2::from_elem((16, 16), f64::NAN);
    values[[3, 3]] = 1.0;
    let prior = HeightRaster::from_values(meta.clone(), values).unwrap();
    let rel = RelativeDepthMap::new(meta, Array2::zeros((16, 16))).unwrap();
    let mut bb = toy();
    let err = tta_optimize(&rgb, &rel, &prior, &cfg(TtaMode::FrozenBackbone, 1), &mut bb).unwrap_err();
    assert!(matches!(err, crate::Error::InsufficientValid { .. }));
}

#[test]
fn affine_oracle_recovered() {
    let k = case(6, 48, 0.5);
    let c = cfg(TtaMode::FrozenBackbone, 100);
    let mut bb = toy();
    let out = tta_optimize(&k.rgb, &k.rel, &k.prior, &c, &mut bb).unwrap();
    assert!(rmse_on_nodata(&out.completed, &k.gt, &k.prior) < 0.05);
    let g = global_complete(&k.rel, &k.prior).unwrap();
    assert!(rmse_on_nodata(&g, &k.gt, &k.prior) < 1e-6);
}

#[test]
fn training_reduces_anchor_loss() {
    let k = case(7, 40, 0.5);
    let mut rel = k.rel.clone();
    // height-dependent distortion a global fit cannot absorb
    rel.values.mapv_inplace(|v| v + 0.05 * v * v);
    let c = TtaConfig {
        lr_head: 1e-2,
        ..cfg(TtaMode::FrozenBackbone, 60)
    };
    let mut bb = toy();
    let out = tta_optimize(&k.rgb, &rel, &k.prior, &c, &mut bb).unwrap();
    assert!(out.final_loss() < out.initial_loss());
    assert_eq!(out.trace.len(), 61);
}

#[test]
fn holdout_is_reported() {
    let k = case(8, 32, 0.25);
    let c = TtaConfig {
        anchor_policy: AnchorPolicy::Holdout { fraction: 0.2, seed: 1 },
        ..cfg(TtaMode::FrozenBackbone, 4)
    };
    let mut bb = toy();
    let out = tta_optimize(&k.rgb, &k.rel, &k.prior, &c, &mut bb).unwrap();
    let valid = k.prior.valid_count();
    assert_eq!(out.n_anchors + out.n_holdout, valid);
    assert_eq!(out.n_holdout, (0.2 * valid as f64).round() as usize);
    assert!(out.trace.iter().all(|t| t.holdout_loss.is_some()));
}

#[test]
fn direct_height_ignores_relative_depth() {
    let k = case(9, 32, 0.5);
    let c = cfg(TtaMode::DirectHeight, 3);
    let mut a = toy();
    let out1 = tta_optimize(&k.rgb, &k.rel, &k.prior, &c, &mut a).unwrap();
    let mut rel = k.rel.clone();
    rel.values.mapv_inplace(|v| v.sin());
    let mut b = toy();
    let out2 = tta_optimize(&k.rgb, &rel, &k.prior, &c, &mut b).unwrap();
    assert_eq!(out1.completed.values, out2.completed.values);
    assert!(out1.field.scale.iter().all(|&s| s == 0.0));
}

#[test]
fn final_layer_gradient_matches_finite_differences() {
    // one 8x8 token at stride 8
    let meta = GridMeta::new(8, 8, 1.0).unwrap();
    let rgb = RgbImage::new(
        meta.clone(),
        ndarray::Array3::from_shape_fn((3, 8, 8), |(ch, r, c)| ((ch * 64 + r * 8 + c) as f64 * 0.37).sin() * 0.5 + 0.5),
    )
    .unwrap();
    let rel = RelativeDepthMap::new(meta.clone(), Array2::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) as f64 / 63.0)).unwrap();
    let mut hv = Array2::from_shape_fn((8, 8), |(r, c)| 2.0 + 3.0 * rel.values[[r, c]] + 0.4 * ((r + 2 * c) as f64).cos());
    for r in 0..3 {
        hv[[r, r]] = f64::NAN;
    }
    let prior = HeightRaster::from_values(meta, hv).unwrap();
    let bb = toy();
    let ex = strided_dense_extract_full(&rgb, &bb, 8).unwrap();
    assert_eq!(ex.map.cell_shape(), (1, 1));
    let tokens = ex.map.token_matrix();
    let holdout = Array2::from_elem((8, 8), false);
    for loss in [LossKind::L1, LossKind::L2] {
        let obj = AnchorObjective::new(&ex.map, &rel, &prior, &holdout, loss, false, AffinePair::new(1.0, 0.5), 1.3);
        let mut head = ScaleShiftHead::new(3, 16, 12, obj.init, obj.output_scale);
        head.fc3.weight.value = crate::nn::testutil::rand_matrix(5, 2, 12).mapv(|v| 0.1 * v);
        head.fc3.bias.value = Array2::from_shape_vec((1, 2), vec![0.02, -0.03]).unwrap();
        let (raw, cache) = head.forward(&tokens);
        let (_, d_raw) = obj.loss_and_grad(&raw);
        head.zero_grad();
        head.backward(&cache, &d_raw);
        let f = |h: &ScaleShiftHead| obj.anchor_loss(&h.forward(&tokens).0);
        for which in 0..2 {
            let shape = if which == 0 { (2, 12) } else { (1, 2) };
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let eps = 1e-6;
                    let mut hp = head.clone();
                    let mut hm = head.clone();
                    let (pp, pm) = if which == 0 {
                        (&mut hp.fc3.weight.value, &mut hm.fc3.weight.value)
                    } else {
                        (&mut hp.fc3.bias.value, &mut hm.fc3.bias.value)
                    };
                    pp[[i, j]] += eps;
                    pm[[i, j]] -= eps;
                    let num = (f(&hp) - f(&hm)) / (2.0 * eps);
                    let ana = if which == 0 { head.fc3.weight.grad[[i, j]] } else { head.fc3.bias.grad[[i, j]] };
                    let rel_err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                    assert!(rel_err < 1e-4, "{loss:?} {which} ({i},{j}): {ana} vs {num}");
                }
            }
        }
    }
}
