//! Fixtures shared by the kernel benchmarks.

use cse_core::audio::{synth_pair, NoiseKind};
use cse_core::config::{Config, Preset};
use cse_core::model::{ModelInput, SeModel};
use cse_core::train::TrainItem;

/// Noisy/clean pair of `seconds`, SNR drawn from 0 to 10 dB.
pub fn pair(seconds: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let (clean, noisy, _) =
        synth_pair(seconds, seed, (0.0, 10.0), &[NoiseKind::White, NoiseKind::Pink]).expect("synth");
    (noisy.samples, clean.samples)
}

/// Desk-preset model with its codebook seeded from one utterance.
pub fn desk_model() -> SeModel {
    let c = Config::preset(Preset::Desk);
    let mut m = SeModel::new(&c).expect("model");
    let (noisy, _) = pair(1.5, 1);
    let (x, _) = ModelInput::from_samples(&noisy, &c).expect("input");
    m.init_codebook(&[&x], 1).expect("codebook");
    m
}

pub fn items(config: &Config, count: usize, seconds: f64) -> Vec<TrainItem> {
    (0..count as u64)
        .map(|i| {
            let (noisy, clean) = pair(seconds, 100 + i);
            TrainItem::new(format!("b{i}"), &noisy, &clean, config, None).expect("item")
        })
        .collect()
}
