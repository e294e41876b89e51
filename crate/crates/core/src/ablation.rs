//! Component ablation on a fixed synthetic set: a plain encoder-decoder, then
//! the same network with one distortion-aware component switched on.

use crate::error::Result;
use crate::model::{build, DamoConfig};
use crate::synth::{random_scene, render};
use crate::train::{train, Sample, TrainConfig, Weighting};

pub const ABLATION_SCENES: usize = 16;
/// First scene seed of the fixed set.
pub const ABLATION_SCENE_SEED: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    Spm,
    Deformable,
    Spherical,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::Spm, Variant::Deformable, Variant::Spherical, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Spm => "+spm",
            Variant::Deformable => "+deformable",
            Variant::Spherical => "+spherical",
            Variant::Full => "full",
        }
    }

    fn setup(self, height: usize, seed: u64) -> (DamoConfig, Weighting) {
        let mut cfg = DamoConfig::new(height, seed);
        cfg.spm_stages = 0;
        cfg.deformable = false;
        let mut weighting = Weighting::Uniform;
        match self {
            Variant::Base => {}
            Variant::Spm => cfg.spm_stages = DamoConfig::new(height, seed).spm_stages,
            Variant::Deformable => cfg.deformable = true,
            Variant::Spherical => weighting = Weighting::Spherical,
            Variant::Full => {
                cfg = DamoConfig::new(height, seed);
                weighting = Weighting::Spherical;
            }
        }
        (cfg, weighting)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub initial_loss: f64,
    /// Mean training loss over the last epoch, under the variant's own weighting.
    pub final_loss: f64,
}

pub fn ablation_set(height: usize) -> Result<Vec<Sample>> {
    (0..ABLATION_SCENES as u64)
        .map(|i| render(&random_scene(ABLATION_SCENE_SEED + i), height, 2 * height))
        .collect()
}

/// Trains every variant with the same seed and budget.
pub fn run_ablation(data: &[Sample], height: usize, epochs: usize, seed: u64, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let (cfg, weighting) = v.setup(height, seed);
            let tc = TrainConfig { weighting, ..TrainConfig::new(epochs, seed) };
            let (_, hist) = train(build(&cfg)?, data, &tc)?;
            Ok(AblationRow {
                variant: v,
                initial_loss: hist[0].mean_loss,
                final_loss: hist[hist.len() - 1].mean_loss,
            })
        })
        .collect()
}
