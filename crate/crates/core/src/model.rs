//! The CAM-native classifier: a strided conv trunk producing a `C×G×G`
//! feature map, global average pooling and a single-logit linear head.
//!
//! Because the head is linear over the pooled features, the logit is the
//! mean over cells of `Σ_k w_k F_k(x, y)` plus the bias. The `cam` module
//! relies on that identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

struct ConvLayer {
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// One stage: a 3×3 convolution, then a 3×3 stride-2 downsampling convolution.
const LAYERS: [ConvLayer; 2] = [
    ConvLayer { kernel: 3, stride: 1, pad: 1 },
    ConvLayer { kernel: 3, stride: 2, pad: 1 },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Pixels per image side.
    pub input_size: usize,
    /// Side of the final feature grid.
    pub grid_size: usize,
    /// Feature depth `C` of the final map.
    pub channels: usize,
    /// Per-stage widths; the last must equal `channels`. Empty selects a
    /// doubling ramp that ends at `channels`.
    #[serde(default)]
    pub block_channels: Vec<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub seed: u64,
}

fn default_in_channels() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            grid_size: 4,
            channels: 32,
            block_channels: Vec::new(),
            in_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(input_size: usize, grid_size: usize, channels: usize, seed: u64) -> Self {
        Self { input_size, grid_size, channels, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!(
                "grid_size must be at least 2, got {}",
                self.grid_size
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.grid_size) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by grid_size {}",
                self.input_size, self.grid_size
            )));
        }
        let ratio = self.input_size / self.grid_size;
        if ratio < 2 || !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "input_size / grid_size = {ratio} must be a power of two >= 2"
            )));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !self.block_channels.is_empty() {
            if self.block_channels.len() != self.stages() {
                return Err(Error::Config(format!(
                    "block_channels has {} entries, the trunk has {} stages",
                    self.block_channels.len(),
                    self.stages()
                )));
            }
            if self.block_channels.last() != Some(&self.channels) || self.block_channels.contains(&0) {
                return Err(Error::Config(
                    "block_channels must be positive and end with `channels`".into(),
                ));
            }
        }
        Ok(())
    }

    /// Input pixels per feature cell side (224 / 7 = 32 at full scale).
    pub fn patch_size(&self) -> usize {
        self.input_size / self.grid_size
    }

    /// Number of stride-2 stages, `log2(input_size / grid_size)`.
    pub fn stages(&self) -> usize {
        (self.input_size / self.grid_size).trailing_zeros() as usize
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        if !self.block_channels.is_empty() {
            return self.block_channels.clone();
        }
        let n = self.stages();
        (0..n)
            .map(|s| (self.channels >> (n - 1 - s)).max(4.min(self.channels)))
            .collect()
    }
}

/// Half-open input rectangle covered by one feature cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRect {
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
}

impl PatchRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }

    fn new(r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        Self { rows: r0..r1, cols: c0..c1 }
    }
}

/// Input rectangle `[i·p, (i+1)·p) × [j·p, (j+1)·p)` for feature cell `(i, j)`.
pub fn cell_to_patch(cell: (usize, usize), config: &ModelConfig) -> Result<PatchRect> {
    let (i, j) = cell;
    let g = config.grid_size;
    if i >= g || j >= g {
        return Err(Error::contract(format!("cell ({i},{j}) outside {g}x{g} grid")));
    }
    let p = config.patch_size();
    Ok(PatchRect::new(i * p, (i + 1) * p, j * p, (j + 1) * p))
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Inference output for one image.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `C×G×G`.
    pub feature_map: Tensor,
    pub logit: f64,
    pub prob: f64,
}

impl ForwardResult {
    /// The feature vector at cell `(i, j)`, i.e. `feature_map[:, i, j]`.
    pub fn embedding(&self, i: usize, j: usize) -> Vec<f64> {
        let s = self.feature_map.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        (0..c).map(|k| self.feature_map.data()[(k * h + i) * w + j]).collect()
    }

    /// All `G·G` cell vectors in row-major cell order.
    pub fn embedding_grid(&self) -> Vec<Vec<f64>> {
        let s = self.feature_map.shape();
        (0..s[1])
            .flat_map(|i| (0..s[2]).map(move |j| (i, j)))
            .map(|(i, j)| self.embedding(i, j))
            .collect()
    }
}

/// A forward pass recorded on a tape. `params` follows declaration order.
pub struct TapedForward<'t> {
    pub params: Vec<Var<'t>>,
    /// `1×C×G×G`.
    pub feature_map: Var<'t>,
    /// `1×1`.
    pub logit: Var<'t>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut in_ch = config.in_channels;
        for (s, &width) in config.stage_widths().iter().enumerate() {
            for (l, layer) in LAYERS.iter().enumerate() {
                let c_in = if l == 0 { in_ch } else { width };
                let k = layer.kernel;
                let fan_in = c_in * k * k;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let w: Vec<f64> = (0..width * fan_in).map(|_| normal.sample(&mut rng)).collect();
                params.push(Param {
                    name: format!("stage{s}.conv{l}.weight"),
                    value: Tensor::new(vec![width, c_in, k, k], w)?,
                });
                params.push(Param { name: format!("stage{s}.conv{l}.bias"), value: Tensor::zeros(&[width]) });
            }
            in_ch = width;
        }
        let normal = Normal::new(0.0, 1.0 / (config.channels as f64).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..config.channels).map(|_| normal.sample(&mut rng)).collect();
        params.push(Param { name: "head.weight".into(), value: Tensor::new(vec![1, config.channels], w)? });
        params.push(Param { name: "head.bias".into(), value: Tensor::zeros(&[1]) });
        Ok(Self { config, params })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::build(config.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces parameter values in declaration order.
    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::dim("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim(format!("shape mismatch for {}", p.name)));
            }
            p.value = v;
        }
        Ok(())
    }

    pub fn head_weights(&self) -> &[f64] {
        self.params[self.params.len() - 2].value.data()
    }

    pub fn head_bias(&self) -> f64 {
        self.params[self.params.len() - 1].value.data()[0]
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let n = self.config.input_size;
        let want = [self.config.in_channels, n, n];
        if image.shape() != want {
            return Err(Error::dim(format!(
                "model expects image {:?}, got {:?}",
                want,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. With `trainable` the parameters
    /// are differentiable leaves, otherwise constants.
    pub fn forward_on_tape<'t>(&self, tape: &'t Tape, image: &Tensor, trainable: bool) -> Result<TapedForward<'t>> {
        self.check_image(image)?;
        let params: Vec<Var<'t>> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let n = self.config.input_size;
        let mut x = tape.constant(image.reshape(&[1, self.config.in_channels, n, n])?);
        let stages = self.config.stages();
        for s in 0..stages {
            for (l, layer) in LAYERS.iter().enumerate() {
                let base = 2 * (LAYERS.len() * s + l);
                x = x
                    .conv2d(params[base], layer.stride, layer.pad)?
                    .add_channel_bias(params[base + 1])?
                    .relu()?;
            }
        }
        let feature_map = x;
        let k = params.len();
        let logit = feature_map.gap()?.linear(params[k - 2], params[k - 1])?;
        Ok(TapedForward { params, feature_map, logit })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardResult> {
        let tape = Tape::new();
        let out = self.forward_on_tape(&tape, image, false)?;
        let g = self.config.grid_size;
        let feature_map = out.feature_map.value().reshape(&[self.config.channels, g, g])?;
        let logit = out.logit.item();
        Ok(ForwardResult { feature_map, logit, prob: sigmoid(logit) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(16, 4, 8, 7)
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(ModelConfig::new(64, 4, 16, 7)).unwrap();
        let b = Model::build(ModelConfig::new(64, 4, 16, 7)).unwrap();
        assert_eq!(a, b);
        let c = Model::build(ModelConfig::new(64, 4, 16, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_scale_patch_size() {
        let cfg = ModelConfig::new(224, 7, 32, 0);
        cfg.validate().unwrap();
        assert_eq!(cfg.patch_size(), 32);
        assert_eq!(cfg.stages(), 5);
    }

    #[test]
    fn rejects_indivisible_input() {
        assert!(matches!(Model::build(ModelConfig::new(63, 7, 8, 0)), Err(Error::Config(_))));
        assert!(matches!(Model::build(ModelConfig::new(64, 1, 8, 0)), Err(Error::Config(_))));
        assert!(matches!(Model::build(ModelConfig::new(48, 4, 8, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn block_channels_must_match_stages() {
        let mut cfg = small();
        cfg.block_channels = vec![4, 8, 8];
        assert!(cfg.validate().is_err());
        cfg.block_channels = vec![4, 6];
        assert!(cfg.validate().is_err());
        cfg.block_channels = vec![6, 8];
        cfg.validate().unwrap();
    }

    #[test]
    fn forward_shapes_and_probability() {
        let model = Model::build(small()).unwrap();
        let out = model.forward(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(out.feature_map.shape(), &[8, 4, 4]);
        assert!(out.prob > 0.0 && out.prob < 1.0);
        assert_eq!(out.embedding_grid().len(), 16);
        assert_eq!(out.embedding(2, 3)[5], out.feature_map.at(&[5, 2, 3]));
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut model = Model::build(small()).unwrap();
        let mut vals: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let k = vals.len();
        vals[k - 2] = Tensor::zeros(&[1, 8]);
        model.set_param_values(vals).unwrap();
        let out = model.forward(&Tensor::full(&[1, 16, 16], 0.3)).unwrap();
        assert_eq!(out.logit, 0.0);
        assert_eq!(out.prob, 0.5);
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let model = Model::build(small()).unwrap();
        assert!(matches!(model.forward(&Tensor::zeros(&[1, 15, 16])), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_count_is_independent_of_input_size() {
        let mut a = ModelConfig::new(32, 4, 8, 1);
        a.block_channels = vec![4, 8, 8];
        let mut b = ModelConfig::new(64, 8, 8, 1);
        b.block_channels = vec![4, 8, 8];
        assert_eq!(
            Model::build(a).unwrap().parameter_count(),
            Model::build(b).unwrap().parameter_count()
        );
    }

    #[test]
    fn patches_tile_the_input() {
        let cfg = ModelConfig::new(224, 7, 8, 0);
        let first = cell_to_patch((0, 0), &cfg).unwrap();
        assert_eq!((first.rows.clone(), first.cols.clone()), (0..32, 0..32));
        let last = cell_to_patch((6, 6), &cfg).unwrap();
        assert_eq!((last.rows.clone(), last.cols.clone()), (192..224, 192..224));
        let mut hits = vec![0u8; 224 * 224];
        for i in 0..7 {
            for j in 0..7 {
                let r = cell_to_patch((i, j), &cfg).unwrap();
                for y in r.rows.clone() {
                    for x in r.cols.clone() {
                        hits[y * 224 + x] += 1;
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        assert!(matches!(cell_to_patch((7, 0), &cfg), Err(Error::Contract(_))));
    }
}
