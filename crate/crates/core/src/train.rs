//! Adam, the poly learning-rate schedule and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{spherical_weight_matrix, WeightMatrix};
use crate::loss::{weighted_berhu_batch, DepthMap, LossReduction};
use crate::model::{backward, forward, ModelState};
use crate::tensor::Tensor4;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_POLY_POWER: f64 = 0.9;
pub const DEFAULT_BATCH: usize = 4;

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Usage(format!("iteration {iter} outside 0..={max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Moments per parameter tensor, allocated on the first step.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return shape_err("parameter and gradient lists do not line up");
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return shape_err("optimizer moments do not match the parameters");
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Spherical,
    Uniform,
}

impl Weighting {
    pub fn matrix(self, h: usize, w: usize) -> Result<WeightMatrix> {
        match self {
            Weighting::Spherical => spherical_weight_matrix(h, w, false),
            Weighting::Uniform => WeightMatrix::uniform(h, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub weighting: Weighting,
    pub reduction: LossReduction,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            base_lr: DEFAULT_LR,
            epochs,
            batch_size: DEFAULT_BATCH,
            poly_power: DEFAULT_POLY_POWER,
            seed,
            weighting: Weighting::Spherical,
            reduction: LossReduction::WeightedMean,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.base_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch.
    pub mean_loss: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

/// An RGB image `(1, 3, H, W)` with its target depth.
pub type Sample = (Tensor4, DepthMap);

fn check_data(model: &ModelState, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let cfg = model.config();
    for (rgb, d) in data {
        if rgb.dims() != [1, 3, cfg.height, cfg.width] || d.depth.dims() != [cfg.height, cfg.width] {
            return shape_err(format!(
                "sample {:?} does not match a {}x{} model",
                rgb.dims(),
                cfg.height,
                cfg.width
            ));
        }
    }
    Ok(())
}

fn batch<'a>(data: &'a [Sample], idx: &[usize]) -> Result<(Tensor4, Vec<&'a DepthMap>)> {
    let images: Vec<&Tensor4> = idx.iter().map(|&i| &data[i].0).collect();
    Ok((Tensor4::stack_batch(&images)?, idx.iter().map(|&i| &data[i].1).collect()))
}

/// Loss of the current model over `data` as one batch.
pub fn evaluate_loss(model: &ModelState, data: &[Sample], weighting: Weighting, reduction: LossReduction) -> Result<f64> {
    check_data(model, data)?;
    let cfg = model.config();
    let weights = weighting.matrix(cfg.height, cfg.width)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, targets) = batch(data, &idx)?;
    let (pred, _) = forward(model, &x)?;
    Ok(weighted_berhu_batch(&pred, &targets, &weights, reduction)?.0)
}

/// Trains for `cfg.epochs` passes over shuffled mini-batches.
pub fn train(mut model: ModelState, data: &[Sample], cfg: &TrainConfig) -> Result<(ModelState, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_data(&model, data)?;
    let mc = model.config().clone();
    let weights = cfg.weighting.matrix(mc.height, mc.width)?;
    let batches = data.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first_lr = poly_lr(cfg.base_lr, iter, max_iter, cfg.poly_power)?;
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = poly_lr(cfg.base_lr, iter, max_iter, cfg.poly_power)?;
            let (x, targets) = batch(data, chunk)?;
            let (pred, cache) = forward(&model, &x)?;
            let (loss, d_pred) = weighted_berhu_batch(&pred, &targets, &weights, cfg.reduction)?;
            if !loss.is_finite() {
                return Err(Error::Evaluation(format!("loss became {loss} at iteration {iter}")));
            }
            let grads = backward(&model, &cache, &d_pred)?;
            adam_step(&mut model.param_slices_mut(), &grads.slices(), &mut adam, lr)?;
            total += loss;
            iter += 1;
        }
        history.push(EpochRecord { epoch, mean_loss: total / batches as f64, lr: first_lr });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, DamoConfig, LayerClass};
    use crate::synth::{random_scene, render};

    fn tiny_model(seed: u64) -> ModelState {
        build(&DamoConfig { channels: vec![4, 6, 8], spm_stages: 2, ..DamoConfig::new(8, seed) }).unwrap()
    }

    fn scenes(n: usize, h: usize) -> Vec<Sample> {
        (0..n).map(|i| render(&random_scene(100 + i as u64), h, 2 * h).unwrap()).collect()
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1e-4, 0, 10, 0.9).unwrap(), 1e-4);
        assert_eq!(poly_lr(1e-4, 10, 10, 0.9).unwrap(), 0.0);
        assert_eq!(poly_lr(1e-4, 5, 10, 1.0).unwrap(), 0.5e-4);
        assert!(matches!(poly_lr(1e-4, 11, 10, 0.9), Err(Error::Usage(_))));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [3.0, -0.01, 0.0];
        let mut st = AdamState::default();
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, 1e-3).unwrap();
        for k in 0..2 {
            let expect = 1e-3 * g[k].abs() / (g[k].abs() + 1e-8);
            let moved = [1.0, -2.0][k] - p[k];
            assert!((moved.abs() - expect).abs() < 1e-15 && moved.signum() == g[k].signum());
        }
        assert_eq!(p[2], 0.5);
        let before = p.clone();
        let m0 = st.m[0][0];
        adam_step(&mut [&mut p[..]], &[&[0.0; 3][..]], &mut st, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.m[0][0], 0.9 * m0);
        assert!(adam_step(&mut [&mut p[..]], &[&[0.0; 2][..]], &mut st, 0.0).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let m = tiny_model(1);
        let mut cfg = TrainConfig::new(1, 2);
        cfg.base_lr = 0.0;
        let (out, hist) = train(m.clone(), &scenes(2, 8), &cfg).unwrap();
        assert_eq!(out, m);
        assert_eq!(hist.len(), 1);
        assert!(hist[0].mean_loss.is_finite() && hist[0].mean_loss > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = scenes(3, 8);
        let cfg = TrainConfig { batch_size: 2, ..TrainConfig::new(3, 5) };
        let (a, ha) = train(tiny_model(4), &data, &cfg).unwrap();
        let (b, hb) = train(tiny_model(4), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let other = TrainConfig { weighting: Weighting::Uniform, ..cfg };
        let (_, hu) = train(tiny_model(4), &data, &other).unwrap();
        assert_ne!(ha, hu);
    }

    #[test]
    fn one_step_moves_every_layer_class() {
        let m = build(&DamoConfig { channels: vec![4, 6, 8], spm_stages: 2, spm_stack_all: true, ..DamoConfig::new(8, 3) }).unwrap();
        let cfg = TrainConfig { batch_size: 1, ..TrainConfig::new(2, 1) };
        let (out, _) = train(m.clone(), &scenes(1, 8), &cfg).unwrap();
        for class in [
            LayerClass::Stem,
            LayerClass::Encoder,
            LayerClass::Deformable,
            LayerClass::SpmFuse,
            LayerClass::Decoder,
            LayerClass::Head,
        ] {
            let changed = m.layers().iter().zip(out.layers()).any(|(a, b)| a.class == class && a.params != b.params);
            assert!(changed, "{class:?} did not move");
        }
    }

    #[test]
    fn bad_inputs() {
        let m = tiny_model(1);
        assert!(train(m.clone(), &[], &TrainConfig::new(1, 0)).is_err());
        assert!(train(m.clone(), &scenes(1, 16), &TrainConfig::new(1, 0)).is_err());
        assert!(matches!(train(m, &scenes(1, 8), &TrainConfig::new(0, 0)), Err(Error::Config(_))));
    }
}
