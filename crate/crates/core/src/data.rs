//! Labelled image datasets: directory ingestion, the blob-quadrant
//! synthetic task, and stratified splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{encode_pgm, normalize, read_grayscale, resize_bilinear, to_u8_minmax};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1×H×W`, normalized.
    pub image: Tensor,
    pub label: u8,
    pub source_tag: String,
    /// Blob center `(row, col)` for synthetic samples.
    pub blob_center: Option<(usize, usize)>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_size: usize,
    /// Files that could not be decoded during ingestion.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Writes the dataset as `pos/` and `neg/` 8-bit PGM files.
    pub fn export(&self, root: &Path) -> Result<()> {
        for sub in ["pos", "neg"] {
            fs::create_dir_all(root.join(sub))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            let sub = if s.label == 1 { "pos" } else { "neg" };
            let n = self.input_size;
            let bytes = encode_pgm(n, n, &to_u8_minmax(&s.image));
            fs::write(root.join(sub).join(format!("{i:05}.pgm")), bytes)?;
        }
        Ok(())
    }
}

/// Decodes, resizes to `input_size²` and normalizes one grayscale file.
pub fn load_image(path: &Path, input_size: usize) -> Result<Tensor> {
    let (h, w, values) = read_grayscale(path)?;
    let mut resized = resize_bilinear(&values, h, w, input_size, input_size);
    normalize(&mut resized);
    Tensor::new(vec![1, input_size, input_size], resized)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `root/pos/*` (label 1) and `root/neg/*` (label 0), each in sorted
/// path order. Undecodable files are skipped with a warning and counted.
pub fn load_dataset(root: &Path, input_size: usize) -> Result<Dataset> {
    if input_size == 0 {
        return Err(Error::Config("input_size must be positive".into()));
    }
    let tag = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (sub, label) in [("pos", 1u8), ("neg", 0u8)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Ingestion(format!("missing subdirectory {}", dir.display())));
        }
        for path in list_images(&dir)? {
            match load_image(&path, input_size) {
                Ok(image) => samples.push(Sample {
                    image,
                    label,
                    source_tag: tag.clone(),
                    blob_center: None,
                    path: Some(path),
                }),
                Err(Error::Decode { path, message }) => {
                    log::warn!("skipping {}: {message}", path.display());
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Dataset { samples, input_size, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    /// Inclusive `[min, max]` blob radius in pixels.
    pub blob_radius_range: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_per_class: 100, image_size: 64, blob_radius_range: (3, 6), noise_sigma: 0.1, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_radius_range;
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid blob radius range ({lo}, {hi})")));
        }
        // the blob's center must have room inside its quadrant
        if 2 * hi >= self.image_size / 2 {
            return Err(Error::Config(format!(
                "blob radius {hi} does not fit a quadrant of a {} image",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Which quadrant holds the evidence for `label`: upper-left for positives,
/// lower-right for negatives. Returns half-open `(rows, cols)` ranges.
pub fn label_quadrant(label: u8, size: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let half = size / 2;
    if label == 1 {
        (0..half, 0..half)
    } else {
        (half..size, half..size)
    }
}

fn blob_image<R: Rng>(rng: &mut R, cfg: &SynthConfig, label: u8) -> (Vec<f64>, (usize, usize)) {
    let n = cfg.image_size;
    let radius = rng.gen_range(cfg.blob_radius_range.0..=cfg.blob_radius_range.1);
    let (rows, cols) = label_quadrant(label, n);
    let cy = rng.gen_range(rows.start + radius..rows.end - radius);
    let cx = rng.gen_range(cols.start + radius..cols.end - radius);
    let sigma = radius as f64 / 2.0;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
            let blob = (-d2 / (2.0 * sigma * sigma)).exp();
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            values.push(blob + eps);
        }
    }
    (values, (cy, cx))
}

/// Blob-quadrant task: positives carry a Gaussian blob in the upper-left
/// quadrant, negatives in the lower-right. Positives come first.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.image_size;
    let mut samples = Vec::with_capacity(2 * cfg.n_per_class);
    for label in [1u8, 0u8] {
        for _ in 0..cfg.n_per_class {
            let (mut values, center) = blob_image(&mut rng, cfg, label);
            normalize(&mut values);
            samples.push(Sample {
                image: Tensor::new(vec![1, n, n], values)?,
                label,
                source_tag: "synthetic".into(),
                blob_center: Some(center),
                path: None,
            });
        }
    }
    Ok(Dataset { samples, input_size: n, skipped: 0 })
}

/// Stratified split; each class contributes `round(n · fraction)` samples
/// to the training side, clamped so both sides keep at least one.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == label).collect();
        if idx.len() < 2 {
            return Err(Error::Ingestion(format!(
                "class {label} has {} samples, at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        let (a, b) = idx.split_at(k);
        train.extend_from_slice(a);
        test.extend_from_slice(b);
    }
    train.sort_unstable();
    test.sort_unstable();
    let take = |ids: &[usize]| Dataset {
        samples: ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
        input_size: dataset.input_size,
        skipped: 0,
    };
    Ok((take(&train), take(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, seed: u64) -> SynthConfig {
        SynthConfig { n_per_class: n, image_size: 32, blob_radius_range: (2, 4), noise_sigma: 0.1, seed }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let big = synth_generate(&SynthConfig { n_per_class: 100, image_size: 64, seed: 3, ..SynthConfig::default() }).unwrap();
        assert_eq!(big.len(), 200);
        assert_eq!(big.count_label(1), 100);
        assert_eq!(synth_generate(&cfg(5, 9)).unwrap(), synth_generate(&cfg(5, 9)).unwrap());
        assert_ne!(synth_generate(&cfg(5, 9)).unwrap(), synth_generate(&cfg(5, 10)).unwrap());
    }

    #[test]
    fn noiseless_blob_center_is_maximum() {
        let d = synth_generate(&SynthConfig { noise_sigma: 0.0, ..cfg(10, 1) }).unwrap();
        for s in &d.samples {
            let (cy, cx) = s.blob_center.unwrap();
            assert_eq!(s.image.at(&[0, cy, cx]), s.image.max());
        }
    }

    #[test]
    fn blob_center_in_label_quadrant() {
        let d = synth_generate(&cfg(30, 4)).unwrap();
        for s in &d.samples {
            let (rows, cols) = label_quadrant(s.label, 32);
            let (cy, cx) = s.blob_center.unwrap();
            assert!(rows.contains(&cy) && cols.contains(&cx));
        }
    }

    #[test]
    fn synthetic_images_are_normalized() {
        for s in synth_generate(&cfg(4, 2)).unwrap().samples {
            let mean = s.image.mean();
            let var = s.image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.image.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn split_is_stratified_partition() {
        let d = synth_generate(&cfg(100, 0)).unwrap();
        let (tr, te) = split(&d, 0.5, 1).unwrap();
        assert_eq!((tr.count_label(1), tr.count_label(0)), (50, 50));
        assert_eq!((te.count_label(1), te.count_label(0)), (50, 50));

        let small = synth_generate(&cfg(10, 0)).unwrap();
        let (tr, te) = split(&small, 0.8, 5).unwrap();
        assert_eq!((tr.count_label(1), tr.count_label(0)), (8, 8));
        assert_eq!((te.count_label(1), te.count_label(0)), (2, 2));
        let mut all: Vec<_> = tr.samples.iter().chain(&te.samples).map(|s| s.blob_center).collect();
        all.sort();
        let mut orig: Vec<_> = small.samples.iter().map(|s| s.blob_center).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split(&small, 0.8, 5).unwrap(), (tr, te));
    }

    #[test]
    fn split_needs_two_per_class() {
        let mut d = synth_generate(&cfg(3, 0)).unwrap();
        d.samples.retain(|s| s.label == 0 || s.blob_center.is_none());
        d.samples.push(synth_generate(&cfg(1, 7)).unwrap().samples[0].clone());
        assert!(matches!(split(&d, 0.5, 0), Err(Error::Ingestion(_))));
        assert!(split(&d, 1.0, 0).is_err());
    }

    #[test]
    fn invalid_synth_config() {
        assert!(synth_generate(&SynthConfig { n_per_class: 0, ..cfg(1, 0) }).is_err());
        assert!(synth_generate(&SynthConfig { blob_radius_range: (4, 8), ..cfg(1, 0) }).is_err());
    }
}
