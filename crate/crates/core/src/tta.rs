//! CAM-directed test-time masking with a supporting-vote flip rule.
//!
//! The original image fixes a provisional label. The `k` most relevant
//! `p×p` patches are masked cumulatively (image `m` hides the top `m`), each
//! masked image is classified, and the label flips when a strict majority of
//! the `k` votes fail to support it with margin `θ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam, patch_cam_sums, rank_cells_desc, ClassSign, Heatmap};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    pub k: usize,
    pub theta: f64,
    #[serde(default = "default_mask_patch_px")]
    pub mask_patch_px: usize,
    #[serde(default)]
    pub mask_fill: f64,
}

fn default_mask_patch_px() -> usize {
    8
}

impl Default for TtaConfig {
    /// 31 masked images, θ = 0.2, 8-pixel patches, zero fill.
    fn default() -> Self {
        Self { k: 31, theta: 0.2, mask_patch_px: 8, mask_fill: 0.0 }
    }
}

impl TtaConfig {
    pub fn validate(&self, input_size: usize) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 0.5) {
            return Err(Error::Config(format!("theta {} outside (0, 0.5]", self.theta)));
        }
        if self.mask_patch_px == 0 || !input_size.is_multiple_of(self.mask_patch_px) {
            return Err(Error::Config(format!(
                "mask patch {} does not divide input size {}",
                self.mask_patch_px, input_size
            )));
        }
        let cells = (input_size / self.mask_patch_px).pow(2);
        if self.k == 0 || self.k > cells {
            return Err(Error::Config(format!("k = {} outside [1, {cells}]", self.k)));
        }
        if !self.mask_fill.is_finite() {
            return Err(Error::Config("mask_fill must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteRecord {
    pub original_prob: f64,
    pub masked_probs: Vec<f64>,
    pub supporting: Vec<bool>,
    pub flipped: bool,
    pub final_label: u8,
}

impl VoteRecord {
    pub fn original_label(&self) -> u8 {
        u8::from(self.original_prob > 0.5)
    }

    pub fn non_supporting(&self) -> usize {
        self.supporting.iter().filter(|s| !**s).count()
    }
}

/// Grid cells of `mask_patch_px` tiles ordered by descending CAM mass.
pub fn rank_patches(heat: &Heatmap, mask_patch_px: usize) -> Result<Vec<(usize, usize)>> {
    Ok(rank_cells_desc(&patch_cam_sums(heat, mask_patch_px)?))
}

/// Image `m` (1-based) has the first `m` ranked patches set to `mask_fill`.
pub fn make_masked_images(
    image: &Tensor,
    ranked_cells: &[(usize, usize)],
    k: usize,
    mask_patch_px: usize,
    mask_fill: f64,
) -> Result<Vec<Tensor>> {
    if k > ranked_cells.len() {
        return Err(Error::contract(format!("k = {k} exceeds {} ranked cells", ranked_cells.len())));
    }
    if image.rank() != 3 {
        return Err(Error::dim(format!("expected a CxHxW image, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let p = mask_patch_px;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::contract(format!("patch {p} does not tile {h}x{w}")));
    }
    let mut current = image.data().to_vec();
    let mut out = Vec::with_capacity(k);
    for &(a, b) in &ranked_cells[..k] {
        if a >= h / p || b >= w / p {
            return Err(Error::contract(format!("cell ({a},{b}) outside the patch grid")));
        }
        for ch in 0..c {
            for y in a * p..(a + 1) * p {
                let row = ch * h * w + y * w;
                current[row + b * p..row + (b + 1) * p].fill(mask_fill);
            }
        }
        out.push(Tensor::new(image.shape().to_vec(), current.clone())?);
    }
    Ok(out)
}

/// The flip rule. A positive original (`p > 0.5`) is supported by masked
/// probabilities `≥ θ`; a negative one by probabilities `≤ 1 − θ`. The label
/// flips when non-supporting votes exceed `k / 2`.
pub fn vote(original_prob: f64, masked_probs: &[f64], theta: f64) -> VoteRecord {
    let positive = original_prob > 0.5;
    let supporting: Vec<bool> = masked_probs
        .iter()
        .map(|&p| if positive { p >= theta } else { p <= 1.0 - theta })
        .collect();
    let against = supporting.iter().filter(|s| !**s).count();
    let flipped = 2 * against > masked_probs.len();
    let original = u8::from(positive);
    VoteRecord {
        original_prob,
        masked_probs: masked_probs.to_vec(),
        supporting,
        flipped,
        final_label: if flipped { 1 - original } else { original },
    }
}

/// Full masked-voting prediction for one image. Also returns the masked
/// images so callers can export them.
pub fn tta_predict_with_masks(model: &Model, image: &Tensor, config: &TtaConfig) -> Result<(VoteRecord, Vec<Tensor>)> {
    config.validate(model.config().input_size)?;
    let original = model.forward(image)?.prob;
    let heat = compute_cam(model, image, ClassSign::from_prob(original))?;
    let ranked = rank_patches(&heat, config.mask_patch_px)?;
    let masked = make_masked_images(image, &ranked, config.k, config.mask_patch_px, config.mask_fill)?;
    let probs = masked
        .par_iter()
        .map(|m| model.forward(m).map(|r| r.prob))
        .collect::<Result<Vec<f64>>>()?;
    Ok((vote(original, &probs, config.theta), masked))
}

pub fn tta_predict(model: &Model, image: &Tensor, config: &TtaConfig) -> Result<VoteRecord> {
    tta_predict_with_masks(model, image, config).map(|(r, _)| r)
}
