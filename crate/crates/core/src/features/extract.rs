use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::vit::{TokenGrid, VitBackbone};
use super::DenseFeatureMap;
use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Sub-patch shifts `(dx, dy)` in `{0, s, .., P - s}^2`, row-major in `dy`.
pub fn view_offsets(patch: usize, stride: usize) -> Vec<(usize, usize)> {
    let steps: Vec<usize> = (0..patch).step_by(stride).collect();
    steps
        .iter()
        .flat_map(|&dy| steps.iter().map(move |&dx| (dx, dy)))
        .collect()
}

/// Reflect-101 index into `[0, n)`.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Geometry of one shifted view. The view window starts `dx` columns and
/// `dy` rows before the image origin and spans whole patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub dx: usize,
    pub dy: usize,
    pub rows: usize,
    pub cols: usize,
}

impl View {
    fn new(dx: usize, dy: usize, width: usize, height: usize, p: usize) -> Self {
        Self {
            dx,
            dy,
            rows: (height + dy).div_ceil(p),
            cols: (width + dx).div_ceil(p),
        }
    }

    fn window(&self, img: &RgbImage, p: usize) -> Array3<f64> {
        let (h, w) = img.meta.shape();
        let rows: Vec<usize> = (0..self.rows * p)
            .map(|u| reflect101(u as isize - self.dy as isize, h))
            .collect();
        let cols: Vec<usize> = (0..self.cols * p)
            .map(|v| reflect101(v as isize - self.dx as isize, w))
            .collect();
        Array3::from_shape_fn((3, rows.len(), cols.len()), |(c, u, v)| img.data[[c, rows[u], cols[v]]])
    }

    /// Stride cells covered by token `(ti, tj)`: half-open row and column
    /// ranges, clipped to the cell grid.
    fn token_cells(&self, ti: usize, tj: usize, p: usize, s: usize, ch: usize, cw: usize) -> (usize, usize, usize, usize) {
        let r0 = (ti * p).saturating_sub(self.dy) / s;
        let r1 = (((ti + 1) * p).saturating_sub(self.dy) / s).min(ch);
        let c0 = (tj * p).saturating_sub(self.dx) / s;
        let c1 = (((tj + 1) * p).saturating_sub(self.dx) / s).min(cw);
        (r0, r1, c0, c1)
    }
}

/// Result of a dense extraction with the per-cell view counts.
#[derive(Debug, Clone)]
pub struct DenseExtraction {
    pub map: DenseFeatureMap,
    /// Number of views whose tokens were averaged into each cell.
    pub counts: Array2<u32>,
    pub views: Vec<View>,
}

fn validate(img: &RgbImage, backbone: &VitBackbone, stride: usize) -> Result<()> {
    let p = backbone.patch_size();
    if stride == 0 || stride > p || !p.is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must divide the patch size {p}"
        )));
    }
    let (h, w) = img.meta.shape();
    if h < p || w < p {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} is smaller than the {p} px backbone window"
        )));
    }
    Ok(())
}

/// Sum-and-count accumulation of view tokens into stride cells, merged in
/// the order of `views`.
fn accumulate(
    grids: &[TokenGrid],
    views: &[View],
    p: usize,
    s: usize,
    ch: usize,
    cw: usize,
    dim: usize,
) -> (Array3<f64>, Array2<u32>) {
    let mut sum = Array3::<f64>::zeros((ch, cw, dim));
    let mut count = Array2::<u32>::zeros((ch, cw));
    for (g, v) in grids.iter().zip(views) {
        for ti in 0..g.rows {
            for tj in 0..g.cols {
                let (r0, r1, c0, c1) = v.token_cells(ti, tj, p, s, ch, cw);
                let tok = g.tokens.row(ti * g.cols + tj);
                for i in r0..r1 {
                    for j in c0..c1 {
                        let mut cell = sum.slice_mut(ndarray::s![i, j, ..]);
                        cell += &tok;
                        count[[i, j]] += 1;
                    }
                }
            }
        }
    }
    (sum, count)
}

/// Dense features from an explicit list of view offsets.
pub fn extract_with_offsets(
    img: &RgbImage,
    backbone: &VitBackbone,
    stride: usize,
    offsets: &[(usize, usize)],
) -> Result<DenseExtraction> {
    validate(img, backbone, stride)?;
    let p = backbone.patch_size();
    let (h, w) = img.meta.shape();
    if let Some(&(dx, dy)) = offsets.iter().find(|&&(dx, dy)| dx >= p || dy >= p || dx % stride != 0 || dy % stride != 0) {
        return Err(Error::InvalidArgument(format!("offset ({dx}, {dy}) is not on the stride lattice")));
    }
    let views: Vec<View> = offsets.iter().map(|&(dx, dy)| View::new(dx, dy, w, h, p)).collect();
    let grids: Vec<TokenGrid> = views
        .par_iter()
        .map(|v| backbone.forward(v.window(img, p).view()))
        .collect::<Result<_>>()?;
    let (ch, cw) = (h.div_ceil(stride), w.div_ceil(stride));
    let (mut sum, counts) = accumulate(&grids, &views, p, stride, ch, cw, backbone.embed_dim());
    for ((i, j, _), v) in sum.indexed_iter_mut() {
        let n = counts[[i, j]];
        if n == 0 {
            return Err(Error::InvalidArgument(format!("cell ({i}, {j}) is covered by no view")));
        }
        *v /= n as f64;
    }
    Ok(DenseExtraction {
        map: DenseFeatureMap::new(img.meta.clone(), stride, sum)?,
        counts,
        views,
    })
}

/// Strided overlap accumulation: the backbone runs once per sub-patch shift
/// and each stride cell takes the mean of every token covering it.
pub fn strided_dense_extract(img: &RgbImage, backbone: &VitBackbone, stride: usize) -> Result<DenseFeatureMap> {
    Ok(strided_dense_extract_full(img, backbone, stride)?.map)
}

pub fn strided_dense_extract_full(img: &RgbImage, backbone: &VitBackbone, stride: usize) -> Result<DenseExtraction> {
    validate(img, backbone, stride)?;
    extract_with_offsets(img, backbone, stride, &view_offsets(backbone.patch_size(), stride))
}

/// Backpropagates a gradient on the cell features into the backbone
/// adapters. Views are recomputed one at a time, so memory holds a single
/// view's activations.
pub fn dense_backward(
    img: &RgbImage,
    backbone: &mut VitBackbone,
    extraction: &DenseExtraction,
    d_cells: &Array3<f64>,
) -> Result<()> {
    let p = backbone.patch_size();
    let s = extraction.map.stride;
    let (ch, cw) = extraction.map.cell_shape();
    let dim = backbone.embed_dim();
    for v in &extraction.views {
        let (grid, cache) = backbone.forward_cached(v.window(img, p).view())?;
        let mut d_tokens = Array2::zeros((grid.rows * grid.cols, dim));
        for ti in 0..grid.rows {
            for tj in 0..grid.cols {
                let (r0, r1, c0, c1) = v.token_cells(ti, tj, p, s, ch, cw);
                let mut row = d_tokens.row_mut(ti * grid.cols + tj);
                for i in r0..r1 {
                    for j in c0..c1 {
                        let n = extraction.counts[[i, j]] as f64;
                        row.scaled_add(1.0 / n, &d_cells.slice(ndarray::s![i, j, ..]));
                    }
                }
            }
        }
        backbone.backward(&cache, &d_tokens);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{inject_lora, make_toy_backbone};
    use crate::raster::GridMeta;

    fn image(w: usize, h: usize) -> RgbImage {
        let meta = GridMeta::new(w, h, 0.3).unwrap();
        RgbImage::new(
            meta,
            Array3::from_shape_fn((3, h, w), |(c, r, x)| {
                (((r * 13 + x * 7 + c * 5) % 17) as f64 / 17.0 + (r as f64 * 0.2).sin() * 0.1).clamp(0.0, 1.0)
            }),
        )
        .unwrap()
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-7, 1), 0);
        assert_eq!(reflect101(-9, 3), 1);
    }

    #[test]
    fn offsets_for_sixteen_by_four() {
        let o = view_offsets(16, 4);
        assert_eq!(o.len(), 16);
        assert_eq!(o[0], (0, 0));
        assert_eq!(o[5], (4, 4));
        assert!(view_offsets(16, 8).iter().all(|x| o.contains(x)));
    }

    #[test]
    fn every_cell_sees_sixteen_views() {
        let bb = make_toy_backbone(0, 16, 8, 1, false).unwrap();
        let ex = strided_dense_extract_full(&image(40, 36), &bb, 4).unwrap();
        assert_eq!(ex.views.len(), 16);
        assert!(ex.counts.iter().all(|&c| c == 16));
        assert_eq!(ex.map.cell_shape(), (9, 10));
    }

    #[test]
    fn stride_equal_to_patch_gives_native_tokens() {
        let bb = make_toy_backbone(1, 8, 16, 1, true).unwrap();
        let img = image(32, 24);
        let ex = strided_dense_extract_full(&img, &bb, 8).unwrap();
        let native = bb.forward(img.data.view()).unwrap();
        assert_eq!((native.rows, native.cols), ex.map.cell_shape());
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(ex.map.cell(i, j), native.tokens.row(i * 4 + j));
            }
        }
        assert!(ex.counts.iter().all(|&c| c == 1));
        let px = ex.map.to_pixels();
        assert_eq!(px.slice(ndarray::s![13, 29, ..]), native.tokens.row(7));
    }

    #[test]
    fn constant_image_gives_constant_features() {
        let bb = make_toy_backbone(2, 8, 16, 2, false).unwrap();
        let meta = GridMeta::new(30, 26, 1.0).unwrap();
        let img = RgbImage::new(meta, Array3::from_shape_fn((3, 26, 30), |(c, _, _)| 0.2 + 0.3 * c as f64)).unwrap();
        let f = strided_dense_extract(&img, &bb, 2).unwrap();
        for ((_, _, d), v) in f.cells.indexed_iter() {
            assert!((v - f.cells[[0, 0, d]]).abs() <= 1e-6);
        }
    }

    #[test]
    fn offset_order_does_not_matter() {
        let bb = make_toy_backbone(3, 8, 8, 1, true).unwrap();
        let img = image(24, 20);
        let mut o = view_offsets(8, 2);
        let a = extract_with_offsets(&img, &bb, 2, &o).unwrap();
        o.reverse();
        o.swap(1, 7);
        let b = extract_with_offsets(&img, &bb, 2, &o).unwrap();
        for (x, y) in a.map.cells.iter().zip(b.map.cells.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn mean_matches_independent_per_pixel_average() {
        let bb = make_toy_backbone(4, 8, 8, 1, true).unwrap();
        let img = image(19, 17);
        let s = 4;
        let f = strided_dense_extract(&img, &bb, s).unwrap();
        // recompute from scratch: for every pixel, average the covering token of each view
        for &(y, x) in &[(0usize, 0usize), (5, 9), (16, 18), (8, 3)] {
            let mut acc = [0.0; 8];
            let offs = view_offsets(8, s);
            for &(dx, dy) in &offs {
                let rows = (17 + dy).div_ceil(8);
                let cols = (19 + dx).div_ceil(8);
                let win = Array3::from_shape_fn((3, rows * 8, cols * 8), |(c, u, v)| {
                    img.data[[c, reflect101(u as isize - dy as isize, 17), reflect101(v as isize - dx as isize, 19)]]
                });
                let g = bb.forward(win.view()).unwrap();
                let t = ((y + dy) / 8) * g.cols + (x + dx) / 8;
                for d in 0..8 {
                    acc[d] += g.tokens[[t, d]] / offs.len() as f64;
                }
            }
            for d in 0..8 {
                assert!((acc[d] - f.pixel(y, x)[d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn stride_must_divide_patch_and_image_must_fit() {
        let bb = make_toy_backbone(0, 16, 8, 1, false).unwrap();
        assert!(strided_dense_extract(&image(32, 32), &bb, 3).is_err());
        assert!(strided_dense_extract(&image(32, 32), &bb, 32).is_err());
        assert!(strided_dense_extract(&image(12, 32), &bb, 4).is_err());
    }

    #[test]
    fn backward_matches_finite_difference_on_adapter() {
        let bb = make_toy_backbone(5, 8, 8, 1, false).unwrap();
        let mut ad = inject_lora(&bb, 2, 4.0, &["qkv"], 3).unwrap();
        ad.blocks[0].attn.qkv.lora.as_mut().unwrap().b.value.fill(0.1);
        let img = image(12, 10);
        let ex = strided_dense_extract_full(&img, &ad, 4).unwrap();
        let probe = Array3::from_shape_fn(ex.map.cells.dim(), |(i, j, d)| ((i * 3 + j * 5 + d) % 7) as f64 - 3.0);
        ad.zero_adapter_grads();
        dense_backward(&img, &mut ad, &ex, &probe).unwrap();
        let g = ad.blocks[0].attn.qkv.lora.as_ref().unwrap().a.grad.clone();
        let loss = |m: &VitBackbone| (&strided_dense_extract(&img, m, 4).unwrap().cells * &probe).sum();
        let h = 1e-6;
        for idx in [(0usize, 0usize), (1, 5), (0, 7)] {
            let mut p = ad.clone();
            p.blocks[0].attn.qkv.lora.as_mut().unwrap().a.value[idx] += h;
            let mut m = ad.clone();
            m.blocks[0].attn.qkv.lora.as_mut().unwrap().a.value[idx] -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((num - g[idx]).abs() <= 1e-6 * g[idx].abs().max(1.0), "{num} vs {}", g[idx]);
        }
    }
}
