//! Toy distortion-aware encoder-decoder.
//!
//! Layout: a rectangular filter-bank stem, encoder stages of
//! `conv → relu → [deformable] conv → relu → [SPM]` followed by 2×2 max
//! pooling (except the deepest stage), a decoder that upsamples and
//! concatenates the skip from the matching encoder resolution, and a 1×1
//! head regressing linear depth.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use network::{backward, forward, ForwardCache, ModelGrads};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvParams, StripMode};
use crate::tensor::Tensor4;

/// Kernel size of one stem filter-bank member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSpec {
    pub kh: usize,
    pub kw: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamoConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of each encoder stage; `channels[0]` is also the
    /// stem width.
    pub channels: Vec<usize>,
    /// SPM is appended to the first `spm_stages` stages.
    pub spm_stages: usize,
    pub banks: Vec<BankSpec>,
    /// Sample the last block of each stage through a learned offset field.
    pub deformable: bool,
    /// Put an SPM after every block of an SPM stage, not only the last.
    pub spm_stack_all: bool,
    pub strip_mode: StripMode,
    pub seed: u64,
}

impl DamoConfig {
    /// Default widths and placement at the given input height (width = 2h).
    pub fn new(height: usize, seed: u64) -> Self {
        Self {
            height,
            width: 2 * height,
            channels: vec![16, 32, 64, 128],
            spm_stages: 3,
            banks: vec![BankSpec { kh: 3, kw: 9 }, BankSpec { kh: 3, kw: 3 }],
            deformable: true,
            spm_stack_all: false,
            strip_mode: StripMode::Max,
            seed,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width != 2 * self.height {
            return bad(format!(
                "input must be h x 2h, got {}x{}",
                self.height, self.width
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("every stage needs a positive channel count".into());
        }
        let down = 1usize << (self.stages() - 1);
        if !self.height.is_multiple_of(down) {
            return bad(format!(
                "height {} not divisible by {} for {} stages",
                self.height,
                down,
                self.stages()
            ));
        }
        if self.spm_stages > self.stages() {
            return bad(format!(
                "{} SPM stages requested with only {} stages",
                self.spm_stages,
                self.stages()
            ));
        }
        if self.banks.is_empty() || self.banks.len() > self.channels[0] {
            return bad("filter bank needs 1..=channels[0] members".into());
        }
        if self.banks.iter().any(|b| b.kh % 2 == 0 || b.kw % 2 == 0) {
            return bad("filter-bank kernels must have odd sizes".into());
        }
        Ok(())
    }

    /// Output channels of each bank: an even split of `channels[0]`, with
    /// the remainder going to the first banks.
    pub fn bank_channels(&self) -> Vec<usize> {
        let n = self.banks.len();
        let c = self.channels[0];
        (0..n).map(|i| c / n + usize::from(i < c % n)).collect()
    }
}

/// Coarse grouping of layers, used when reporting gradient flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerClass {
    Stem,
    Encoder,
    Deformable,
    SpmFuse,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    He,
    Zero,
}

struct LayerSpec {
    name: String,
    out_ch: usize,
    in_ch: usize,
    kernel: (usize, usize),
    init: Init,
    class: LayerClass,
}

/// Indices into [`ModelState::layers`] for each stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct StagePlan {
    pub conv: usize,
    pub spm_first: Option<usize>,
    pub offset: Option<usize>,
    pub da: usize,
    pub spm: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Plan {
    pub stem: Vec<usize>,
    pub stages: Vec<StagePlan>,
    /// `decoder[s]` fuses the upsampled stage `s + 1` path with skip `s`.
    pub decoder: Vec<usize>,
    pub head: usize,
}

fn layout(cfg: &DamoConfig) -> (Vec<LayerSpec>, Plan) {
    let mut specs = Vec::new();
    let mut push = |name: String, out_ch, in_ch, kernel, init, class| {
        specs.push(LayerSpec {
            name,
            out_ch,
            in_ch,
            kernel,
            init,
            class,
        });
        specs.len() - 1
    };
    let stem = cfg
        .banks
        .iter()
        .zip(cfg.bank_channels())
        .enumerate()
        .map(|(i, (b, c))| push(format!("stem.bank{i}"), c, 3, (b.kh, b.kw), Init::He, LayerClass::Stem))
        .collect();
    let mut stages = Vec::new();
    for (s, &out) in cfg.channels.iter().enumerate() {
        let inp = if s == 0 { cfg.channels[0] } else { cfg.channels[s - 1] };
        let with_spm = s < cfg.spm_stages;
        let conv = push(format!("enc{s}.conv"), out, inp, (3, 3), Init::He, LayerClass::Encoder);
        let spm_first = (with_spm && cfg.spm_stack_all)
            .then(|| push(format!("enc{s}.spm_first"), out, out, (1, 1), Init::He, LayerClass::SpmFuse));
        let offset = cfg
            .deformable
            .then(|| push(format!("enc{s}.offset"), 18, out, (3, 3), Init::Zero, LayerClass::Deformable));
        let da_class = if cfg.deformable {
            LayerClass::Deformable
        } else {
            LayerClass::Encoder
        };
        let da = push(format!("enc{s}.da"), out, out, (3, 3), Init::He, da_class);
        let spm = with_spm.then(|| push(format!("enc{s}.spm"), out, out, (1, 1), Init::He, LayerClass::SpmFuse));
        stages.push(StagePlan {
            conv,
            spm_first,
            offset,
            da,
            spm,
        });
    }
    let decoder = (0..cfg.stages() - 1)
        .map(|s| {
            let inp = cfg.channels[s + 1] + cfg.channels[s];
            push(format!("dec{s}.conv"), cfg.channels[s], inp, (3, 3), Init::He, LayerClass::Decoder)
        })
        .collect();
    let head = push("head".into(), 1, cfg.channels[0], (1, 1), Init::He, LayerClass::Head);
    (
        specs,
        Plan {
            stem,
            stages,
            decoder,
            head,
        },
    )
}

/// 64-bit FNV-1a, used to give each named layer its own random stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Debug)]
pub struct NamedLayer {
    pub name: String,
    pub class: LayerClass,
    pub params: ConvParams,
}

/// Parameters of a built network, in a stable order.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: DamoConfig,
    layers: Vec<NamedLayer>,
    plan: Plan,
    /// Bumped on every mutable access so stale caches can be detected.
    version: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.params == b.params)
    }
}

/// Seeded He-normal initialisation; offset predictors and biases start at zero.
pub fn build(config: &DamoConfig) -> Result<ModelState> {
    config.validate()?;
    let (specs, plan) = layout(config);
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let (kh, kw) = spec.kernel;
        let dims = [spec.out_ch, spec.in_ch, kh, kw];
        let weight = match spec.init {
            Init::Zero => Tensor4::zeros(dims)?,
            Init::He => {
                let fan_in = (spec.in_ch * kh * kw) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(&spec.name));
                let data = (0..dims.iter().product()).map(|_| normal.sample(&mut rng)).collect();
                Tensor4::from_vec(dims, data)?
            }
        };
        let params = ConvParams::same(weight, vec![0.0; spec.out_ch])?;
        layers.push(NamedLayer {
            name: spec.name,
            class: spec.class,
            params,
        });
    }
    Ok(ModelState {
        config: config.clone(),
        layers,
        plan,
        version: 0,
    })
}

impl ModelState {
    pub fn config(&self) -> &DamoConfig {
        &self.config
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&NamedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn plan(&self) -> &Plan {
        &self.plan
    }

    pub(crate) fn params(&self, idx: usize) -> &ConvParams {
        &self.layers[idx].params
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params.weight.len() + l.params.bias.len())
            .sum()
    }

    /// `(name, dims, values)` for every weight and bias tensor, in order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push((
                format!("{}.weight", l.name),
                l.params.weight.dims().to_vec(),
                l.params.weight.data(),
            ));
            out.push((format!("{}.bias", l.name), vec![l.params.bias.len()], &l.params.bias[..]));
        }
        out
    }

    /// Mutable parameter slices in [`ModelState::named_tensors`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.params.weight.data_mut());
            out.push(&mut l.params.bias[..]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Weights plus biases of a `out × in × kh × kw` convolution.
    fn conv_count(out: usize, inp: usize, kh: usize, kw: usize) -> usize {
        out * inp * kh * kw + out
    }

    #[test]
    fn default_parameter_count() {
        let cfg = DamoConfig::new(32, 0);
        let m = build(&cfg).unwrap();
        let c = [16usize, 32, 64, 128];
        let mut expect = conv_count(8, 3, 3, 9) + conv_count(8, 3, 3, 3);
        for s in 0..4 {
            let inp = if s == 0 { c[0] } else { c[s - 1] };
            expect += conv_count(c[s], inp, 3, 3);
            expect += conv_count(18, c[s], 3, 3);
            expect += conv_count(c[s], c[s], 3, 3);
            if s < 3 {
                expect += conv_count(c[s], c[s], 1, 1);
            }
        }
        for s in 0..3 {
            expect += conv_count(c[s], c[s + 1] + c[s], 3, 3);
        }
        expect += conv_count(1, 16, 1, 1);
        assert_eq!(m.parameter_count(), expect);
        assert_eq!(m.parameter_count(), 485_993);
    }

    #[test]
    fn build_is_deterministic_and_seeded() {
        let cfg = DamoConfig::new(16, 7);
        assert_eq!(build(&cfg).unwrap(), build(&cfg).unwrap());
        let other = build(&DamoConfig::new(16, 8)).unwrap();
        assert_ne!(build(&cfg).unwrap(), other);
    }

    #[test]
    fn offsets_and_biases_start_at_zero() {
        let m = build(&DamoConfig::new(16, 1)).unwrap();
        for l in m.layers() {
            assert!(l.params.bias.iter().all(|&b| b == 0.0));
            if l.name.ends_with(".offset") {
                assert_eq!(l.params.weight.max_abs(), 0.0);
            } else {
                assert!(l.params.weight.max_abs() > 0.0);
            }
        }
    }

    #[test]
    fn shared_layers_do_not_depend_on_variant() {
        let base = DamoConfig {
            deformable: false,
            spm_stages: 0,
            ..DamoConfig::new(16, 3)
        };
        let full = DamoConfig::new(16, 3);
        let a = build(&base).unwrap();
        let b = build(&full).unwrap();
        for l in a.layers() {
            assert_eq!(l.params, b.layer(&l.name).unwrap().params, "{}", l.name);
        }
    }

    #[test]
    fn invalid_configs() {
        let ok = DamoConfig::new(16, 0);
        for cfg in [
            DamoConfig { width: 31, ..ok.clone() },
            DamoConfig { height: 12, width: 24, ..ok.clone() },
            DamoConfig { spm_stages: 5, ..ok.clone() },
            DamoConfig { channels: vec![], ..ok.clone() },
            DamoConfig { banks: vec![BankSpec { kh: 2, kw: 3 }], ..ok.clone() },
        ] {
            assert!(matches!(build(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn bank_split() {
        let mut cfg = DamoConfig::new(16, 0);
        assert_eq!(cfg.bank_channels(), vec![8, 8]);
        cfg.channels[0] = 7;
        assert_eq!(cfg.bank_channels(), vec![4, 3]);
    }
}
