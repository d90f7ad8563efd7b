//! Trains the baseline and the SnapMix + CPE configuration on the
//! blob-quadrant task and reports test metrics with and without voting.
//!
//! ```sh
//! cargo run --release -p camcls-core --example synthetic [-- baseline|snapmix|cpe|snapmix+cpe]
//! ```

use std::time::Instant;

use camcls::data::{split, synth_generate, SynthConfig};
use camcls::training::{evaluate, train, TrainConfig};
use camcls::tta::TtaConfig;
use camcls::{Model, ModelConfig};

fn main() -> camcls::Result<()> {
    let only = std::env::args().nth(1).unwrap_or_default();
    let full = synth_generate(&SynthConfig { n_per_class: 150, image_size: 64, seed: 1, ..SynthConfig::default() })?;
    let (train_set, test_set) = split(&full, 2.0 / 3.0, 2)?;
    let variants = [
        ("baseline", TrainConfig::baseline()),
        ("snapmix", TrainConfig { cpe_enabled: false, ..TrainConfig::default() }),
        ("cpe", TrainConfig { snapmix_enabled: false, ..TrainConfig::default() }),
        ("snapmix+cpe", TrainConfig::default()),
    ];
    let tta = TtaConfig { k: 63, theta: 0.2, mask_patch_px: 8, mask_fill: 0.0 };
    for (name, cfg) in variants.into_iter().filter(|(n, _)| only.is_empty() || only == *n) {
        let start = Instant::now();
        let mut model = Model::build(ModelConfig::new(64, 4, 32, 0))?;
        train(&mut model, &train_set, Some(&test_set), &cfg, |l| println!("{name} {}", l.to_json_line()))?;
        let plain = evaluate(&model, &test_set, None)?;
        let voted = evaluate(&model, &test_set, Some(&tta))?;
        println!(
            "{name}: accuracy {:.3}, with voting {:.3} ({:.1}s)",
            plain.accuracy,
            voted.accuracy,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
