//! SnapMix virtual samples.
//!
//! A box from image `b` is resized onto a box in image `a`. The composite is
//! labelled with two independent weights: `1 - ρ_a` for `a`'s label (CAM mass
//! that survives outside the pasted box) and `ρ_b` for `b`'s label (CAM mass
//! that was pasted in). The weights need not sum to one.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::Var;
use crate::cam::{box_cam_ratio, ClassSign, Heatmap, PixelBox};
use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::tensor::{bce_with_logit, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSample {
    pub image: Tensor,
    pub label_a: u8,
    pub label_b: u8,
    pub weight_a: f64,
    pub weight_b: f64,
    pub box_a: PixelBox,
    pub box_b: PixelBox,
    pub rho_a: f64,
    pub rho_b: f64,
}

impl VirtualSample {
    /// An unmixed sample: the source image with weights `(1, 0)`.
    pub fn unmixed(image: Tensor, label: u8) -> Self {
        Self {
            image,
            label_a: label,
            label_b: label,
            weight_a: 1.0,
            weight_b: 0.0,
            box_a: PixelBox::default(),
            box_b: PixelBox::default(),
            rho_a: 0.0,
            rho_b: 0.0,
        }
    }

    pub fn is_mixed(&self) -> bool {
        !self.box_a.is_empty() && !self.box_b.is_empty()
    }

    /// Class direction of the weighted label mass; ties go to `label_a`.
    pub fn dominant_sign(&self) -> ClassSign {
        let score = self.weight_a * f64::from(self.label_a) + self.weight_b * f64::from(self.label_b)
            - 0.5 * (self.weight_a + self.weight_b);
        if score > 0.0 {
            ClassSign::Positive
        } else if score < 0.0 {
            ClassSign::Negative
        } else {
            ClassSign::from_label(self.label_a)
        }
    }
}

/// Box with side `round(side · sqrt(1 - λ))`, placed uniformly at random.
pub fn sample_box<R: Rng + ?Sized>(rng: &mut R, lambda: f64, height: usize, width: usize) -> Result<PixelBox> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    let cut = (1.0 - lambda).sqrt();
    let bh = ((height as f64 * cut).round() as usize).min(height);
    let bw = ((width as f64 * cut).round() as usize).min(width);
    let top = rng.gen_range(0..=height - bh);
    let left = rng.gen_range(0..=width - bw);
    Ok(PixelBox::new(top, left, bh, bw))
}

/// Pastes `box_b` of `img_b`, bilinearly resized, over `box_a` of `img_a`.
pub fn composite(img_a: &Tensor, img_b: &Tensor, box_a: &PixelBox, box_b: &PixelBox) -> Result<Tensor> {
    if img_a.shape() != img_b.shape() || img_a.rank() != 3 {
        return Err(Error::contract(format!(
            "snapmix sources must share a CxHxW shape, got {:?} and {:?}",
            img_a.shape(),
            img_b.shape()
        )));
    }
    let (c, h, w) = (img_a.shape()[0], img_a.shape()[1], img_a.shape()[2]);
    if !box_a.fits(h, w) || !box_b.fits(h, w) {
        return Err(Error::contract("snapmix box exceeds image bounds"));
    }
    let mut out = img_a.data().to_vec();
    if box_a.is_empty() || box_b.is_empty() {
        return Tensor::new(img_a.shape().to_vec(), out);
    }
    let plane = h * w;
    for ch in 0..c {
        let src = &img_b.data()[ch * plane..(ch + 1) * plane];
        let mut region = Vec::with_capacity(box_b.area());
        for y in box_b.top..box_b.top + box_b.height {
            region.extend_from_slice(&src[y * w + box_b.left..y * w + box_b.left + box_b.width]);
        }
        let patch = resize_bilinear(&region, box_b.height, box_b.width, box_a.height, box_a.width);
        for (dy, row) in patch.chunks(box_a.width).enumerate() {
            let start = ch * plane + (box_a.top + dy) * w + box_a.left;
            out[start..start + box_a.width].copy_from_slice(row);
        }
    }
    Tensor::new(img_a.shape().to_vec(), out)
}

/// SnapMix with explicit boxes. If either box has zero area nothing is
/// pasted and the result is `img_a` with weights `(1, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn snapmix_with_boxes(
    img_a: &Tensor,
    label_a: u8,
    img_b: &Tensor,
    label_b: u8,
    heat_a: &Heatmap,
    heat_b: &Heatmap,
    box_a: PixelBox,
    box_b: PixelBox,
) -> Result<VirtualSample> {
    let image = composite(img_a, img_b, &box_a, &box_b)?;
    if box_a.is_empty() || box_b.is_empty() {
        let mut s = VirtualSample::unmixed(image, label_a);
        s.label_b = label_b;
        return Ok(s);
    }
    let rho_a = box_cam_ratio(heat_a, &box_a)?;
    let rho_b = box_cam_ratio(heat_b, &box_b)?;
    Ok(VirtualSample {
        image,
        label_a,
        label_b,
        weight_a: 1.0 - rho_a,
        weight_b: rho_b,
        box_a,
        box_b,
        rho_a,
        rho_b,
    })
}

/// Draws `λ_a, λ_b ~ Beta(α, α)` independently, samples both boxes and mixes.
#[allow(clippy::too_many_arguments)]
pub fn snapmix<R: Rng + ?Sized>(
    img_a: &Tensor,
    label_a: u8,
    img_b: &Tensor,
    label_b: u8,
    heat_a: &Heatmap,
    heat_b: &Heatmap,
    rng: &mut R,
    alpha: f64,
) -> Result<VirtualSample> {
    if img_a.shape() != img_b.shape() || img_a.rank() != 3 {
        return Err(Error::contract("snapmix sources must share a CxHxW shape"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    let lambda_a = beta.sample(rng);
    let lambda_b = beta.sample(rng);
    snapmix_with_lambdas(img_a, label_a, img_b, label_b, heat_a, heat_b, rng, lambda_a, lambda_b)
}

/// SnapMix with fixed mixing draws; the box positions still come from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn snapmix_with_lambdas<R: Rng + ?Sized>(
    img_a: &Tensor,
    label_a: u8,
    img_b: &Tensor,
    label_b: u8,
    heat_a: &Heatmap,
    heat_b: &Heatmap,
    rng: &mut R,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<VirtualSample> {
    let (h, w) = (img_a.shape()[1], img_a.shape()[2]);
    let box_a = sample_box(rng, lambda_a, h, w)?;
    let box_b = sample_box(rng, lambda_b, h, w)?;
    snapmix_with_boxes(img_a, label_a, img_b, label_b, heat_a, heat_b, box_a, box_b)
}

fn check_weights(sample: &VirtualSample) -> Result<()> {
    let ok = |w: f64| (0.0..=1.0).contains(&w);
    if !ok(sample.weight_a) || !ok(sample.weight_b) {
        return Err(Error::contract(format!(
            "mixing weights ({}, {}) outside [0, 1]",
            sample.weight_a, sample.weight_b
        )));
    }
    Ok(())
}

/// `w_a · bce(z, y_a) + w_b · bce(z, y_b)`.
pub fn mixed_bce_loss(logit: f64, sample: &VirtualSample) -> Result<f64> {
    check_weights(sample)?;
    let mut loss = sample.weight_a * bce_with_logit(logit, f64::from(sample.label_a))?;
    if sample.weight_b != 0.0 {
        loss += sample.weight_b * bce_with_logit(logit, f64::from(sample.label_b))?;
    }
    Ok(loss)
}

/// Tape version of [`mixed_bce_loss`].
pub fn mixed_bce_var<'t>(logit: Var<'t>, sample: &VirtualSample) -> Result<Var<'t>> {
    check_weights(sample)?;
    let a = logit.bce_loss(f64::from(sample.label_a))?.scale(sample.weight_a)?;
    if sample.weight_b == 0.0 {
        return Ok(a);
    }
    let b = logit.bce_loss(f64::from(sample.label_b))?.scale(sample.weight_b)?;
    a.add(b)
}
