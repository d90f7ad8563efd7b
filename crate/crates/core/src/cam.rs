//! Class activation maps for the GAP-linear head.
//!
//! With `logit = w · gap(F) + b` the map `Σ_k w_k F_k(x, y)` is the exact
//! per-cell contribution to the logit, so no gradients are needed. Maps are
//! clamped to nonnegative relevance for the requested class direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Which class the relevance map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassSign {
    Positive,
    Negative,
}

impl ClassSign {
    pub fn from_label(label: u8) -> Self {
        if label > 0 {
            ClassSign::Positive
        } else {
            ClassSign::Negative
        }
    }

    pub fn from_prob(prob: f64) -> Self {
        if prob > 0.5 {
            ClassSign::Positive
        } else {
            ClassSign::Negative
        }
    }

    pub fn value(self) -> f64 {
        match self {
            ClassSign::Positive => 1.0,
            ClassSign::Negative => -1.0,
        }
    }

    /// `pos` / `neg`, used in exported file names.
    pub fn tag(self) -> &'static str {
        match self {
            ClassSign::Positive => "pos",
            ClassSign::Negative => "neg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Each cell value is replicated over its `p×p` input patch.
    #[default]
    Nearest,
    Bilinear,
}

/// Axis-aligned pixel box; zero height or width is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.height <= height && self.left + self.width <= width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row) && (self.left..self.left + self.width).contains(&col)
    }
}

/// Relevance map at feature-grid resolution plus its full-resolution view.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `G×G`, nonnegative.
    pub grid: Tensor,
    /// `H×W`, derived from `grid`.
    pub full_res: Tensor,
    pub class_sign: ClassSign,
    /// Set when every grid value clamped to zero.
    pub degenerate: bool,
    pub upsampling: Upsampling,
}

/// Unclamped `Σ_k w_k F_k(x, y)` for a `C×G×G` feature map.
pub fn signed_cam(features: &Tensor, head_weights: &[f64]) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || s[0] != head_weights.len() {
        return Err(Error::dim(format!(
            "feature map {:?} does not match {} head weights",
            s,
            head_weights.len()
        )));
    }
    let plane = s[1] * s[2];
    let mut out = vec![0.0; plane];
    for (k, &w) in head_weights.iter().enumerate() {
        let f = &features.data()[k * plane..(k + 1) * plane];
        out.iter_mut().zip(f).for_each(|(o, &v)| *o += w * v);
    }
    Tensor::new(vec![s[1], s[2]], out)
}

impl Heatmap {
    /// Builds a heatmap from an unclamped (positive-class) CAM grid by
    /// applying `max(0, sign · cam)` and upsampling to `height×width`.
    pub fn from_signed(signed: &Tensor, sign: ClassSign, height: usize, width: usize, mode: Upsampling) -> Result<Self> {
        let s = sign.value();
        let grid = signed.map(|v| (s * v).max(0.0))?;
        Self::from_grid(grid, sign, height, width, mode)
    }

    /// Wraps an already nonnegative grid.
    pub fn from_grid(grid: Tensor, sign: ClassSign, height: usize, width: usize, mode: Upsampling) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::dim(format!("heatmap grid must be 2-D, got {:?}", grid.shape())));
        }
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
        if gh == 0 || gw == 0 || !height.is_multiple_of(gh) || !width.is_multiple_of(gw) {
            return Err(Error::dim(format!(
                "{height}x{width} image is not a whole multiple of the {gh}x{gw} grid"
            )));
        }
        if grid.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("heatmap grid values must be nonnegative"));
        }
        let full_res = match mode {
            Upsampling::Nearest => upsample_nearest(&grid, height, width),
            Upsampling::Bilinear => upsample_bilinear(&grid, height, width),
        };
        let degenerate = grid.sum() == 0.0;
        Ok(Self { grid, full_res, class_sign: sign, degenerate, upsampling: mode })
    }

    pub fn height(&self) -> usize {
        self.full_res.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.full_res.shape()[1]
    }

    /// Grid cell with the largest value; ties go to the lower row-major index.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let gw = self.grid.shape()[1];
        let mut best = 0;
        for (i, &v) in self.grid.data().iter().enumerate() {
            if v > self.grid.data()[best] {
                best = i;
            }
        }
        (best / gw, best % gw)
    }
}

fn upsample_nearest(grid: &Tensor, height: usize, width: usize) -> Tensor {
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let (ph, pw) = (height / gh, width / gw);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(grid.data()[(y / ph) * gw + x / pw]);
        }
    }
    Tensor::from_parts(vec![height, width], out)
}

fn upsample_bilinear(grid: &Tensor, height: usize, width: usize) -> Tensor {
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let g = grid.data();
    let coord = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, gh);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, gw);
            let top = g[y0 * gw + x0] * (1.0 - fx) + g[y0 * gw + x1] * fx;
            let bottom = g[y1 * gw + x0] * (1.0 - fx) + g[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::from_parts(vec![height, width], out)
}

/// CAM of `image` under `model` for the given class direction.
pub fn compute_cam(model: &Model, image: &Tensor, sign: ClassSign) -> Result<Heatmap> {
    compute_cam_with(model, image, sign, Upsampling::Nearest)
}

pub fn compute_cam_with(model: &Model, image: &Tensor, sign: ClassSign, mode: Upsampling) -> Result<Heatmap> {
    let out = model.forward(image)?;
    let signed = signed_cam(&out.feature_map, model.head_weights())?;
    let n = model.config().input_size;
    Heatmap::from_signed(&signed, sign, n, n, mode)
}

fn box_sum(map: &Tensor, b: &PixelBox) -> f64 {
    let w = map.shape()[1];
    (b.top..b.top + b.height)
        .map(|y| map.data()[y * w + b.left..y * w + b.left + b.width].iter().sum::<f64>())
        .sum()
}

/// Fraction of total CAM mass inside `b`. A degenerate map falls back to
/// the box's area fraction.
pub fn box_cam_ratio(heat: &Heatmap, b: &PixelBox) -> Result<f64> {
    let (h, w) = (heat.height(), heat.width());
    if !b.fits(h, w) {
        return Err(Error::contract(format!("box {b:?} exceeds {h}x{w} image")));
    }
    let total = heat.full_res.sum();
    if heat.degenerate || total <= 0.0 {
        return Ok(b.area() as f64 / (h * w) as f64);
    }
    Ok((box_sum(&heat.full_res, b) / total).clamp(0.0, 1.0))
}

/// Sum of `full_res` over each `patch_px × patch_px` tile.
///
/// Under nearest replication with tiles aligned to cell boundaries the sums
/// are taken from the grid directly (`tile area × cell value`), so a tile
/// that matches one cell equals `patch_px² · grid` exactly.
pub fn patch_cam_sums(heat: &Heatmap, patch_px: usize) -> Result<Tensor> {
    let (h, w) = (heat.height(), heat.width());
    if patch_px == 0 || h % patch_px != 0 || w % patch_px != 0 {
        return Err(Error::contract(format!(
            "patch size {patch_px} does not divide the {h}x{w} map"
        )));
    }
    let (rows, cols) = (h / patch_px, w / patch_px);
    let (gh, gw) = (heat.grid.shape()[0], heat.grid.shape()[1]);
    let (cell_h, cell_w) = (h / gh, w / gw);
    let aligned = |cell: usize| cell.is_multiple_of(patch_px) || patch_px.is_multiple_of(cell);
    let mut sums = vec![0.0; rows * cols];
    if heat.upsampling == Upsampling::Nearest && aligned(cell_h) && aligned(cell_w) {
        let g = heat.grid.data();
        for a in 0..rows {
            for b in 0..cols {
                let (y0, x0) = (a * patch_px, b * patch_px);
                let mut total = 0.0;
                for cy in y0 / cell_h..=(y0 + patch_px - 1) / cell_h {
                    let oy = overlap(y0, patch_px, cy * cell_h, cell_h);
                    for cx in x0 / cell_w..=(x0 + patch_px - 1) / cell_w {
                        let ox = overlap(x0, patch_px, cx * cell_w, cell_w);
                        total += (oy * ox) as f64 * g[cy * gw + cx];
                    }
                }
                sums[a * cols + b] = total;
            }
        }
    } else {
        for y in 0..h {
            let line = &heat.full_res.data()[y * w..(y + 1) * w];
            let row = &mut sums[(y / patch_px) * cols..(y / patch_px + 1) * cols];
            for (x, &v) in line.iter().enumerate() {
                row[x / patch_px] += v;
            }
        }
    }
    Tensor::new(vec![rows, cols], sums)
}

fn overlap(start_a: usize, len_a: usize, start_b: usize, len_b: usize) -> usize {
    let lo = start_a.max(start_b);
    let hi = (start_a + len_a).min(start_b + len_b);
    hi.saturating_sub(lo)
}

/// Cells of a 2-D score grid ordered by descending score; ties go to the
/// lower row-major index.
pub fn rank_cells_desc(scores: &Tensor) -> Vec<(usize, usize)> {
    let cols = scores.shape().get(1).copied().unwrap_or(1);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let v = scores.data();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order.into_iter().map(|i| (i / cols, i % cols)).collect()
}
