//! MSE regression of the value model onto binary labels, with gradient
//! checking and Table-2-style classification metrics.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Trajectory;
use crate::env::EnvSpec;

use super::model::{sigmoid, ModelKind, ValueModel};
use super::EncoderConfig;

#[derive(Debug, Error)]
pub enum VemTrainError {
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch} (non-finite loss)")]
    Diverged { epoch: usize, batch: usize },
    #[error("label out of {{0,1}}: {0}")]
    BadLabel(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VemTrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub l2: f64,
    pub momentum: f64,
    /// AdamW-style adaptive updates; off by default so gradient checks stay
    /// exact against plain descent.
    pub adam: bool,
    pub hidden: usize,
    /// Tabular prediction for unseen cells.
    pub prior: f64,
}

impl Default for VemTrainConfig {
    fn default() -> Self {
        VemTrainConfig {
            kind: ModelKind::Mlp,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            l2: 0.0,
            momentum: 0.0,
            adam: false,
            hidden: 64,
            prior: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean MSE per epoch (measured before each batch update).
    pub loss_curve: Vec<f64>,
    pub final_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

/// Encodes a labeled dataset into (features, label) pairs in dataset order.
pub fn encode_labeled(
    env: &EnvSpec,
    trajectories: &[Trajectory],
    labels: &[u8],
    encoder: &EncoderConfig,
) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = 0;
    for t in trajectories {
        for s in &t.steps {
            if let Some(ell) = labels.get(i) {
                xs.push(super::encode(env, &s.state(), &s.action(), encoder));
                ys.push(*ell);
            }
            i += 1;
        }
    }
    (xs, ys)
}

/// Empirical MSE of a model over a batch; the independent two-line oracle in
/// tests recomputes this directly.
pub fn batch_mse(model: &ValueModel, xs: &[Vec<f64>], ys: &[u8]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let p = model.predict_features(x).expect("dims match");
            let d = p - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / n as f64
}

fn get_params(model: &ValueModel) -> Vec<f64> {
    match model {
        ValueModel::Linear { w, b } => {
            let mut p = w.clone();
            p.push(*b);
            p
        }
        ValueModel::Mlp { w1, b1, w2, b2, .. } => {
            let mut p = w1.clone();
            p.extend_from_slice(b1);
            p.extend_from_slice(w2);
            p.push(*b2);
            p
        }
        _ => panic!("parametric models only"),
    }
}

fn set_params(model: &mut ValueModel, p: &[f64]) {
    match model {
        ValueModel::Linear { w, b } => {
            let d = w.len();
            w.copy_from_slice(&p[..d]);
            *b = p[d];
        }
        ValueModel::Mlp { dim, hidden, w1, b1, w2, b2 } => {
            let (d, h) = (*dim, *hidden);
            w1.copy_from_slice(&p[..h * d]);
            b1.copy_from_slice(&p[h * d..h * d + h]);
            w2.copy_from_slice(&p[h * d + h..h * d + 2 * h]);
            *b2 = p[h * d + 2 * h];
        }
        _ => panic!("parametric models only"),
    }
}

/// Analytic gradient of the batch MSE (plus L2 on weights) in the flat
/// parameter layout of `get_params`.
pub fn batch_grad(model: &ValueModel, xs: &[Vec<f64>], ys: &[u8], l2: f64) -> Vec<f64> {
    let n = xs.len().max(1) as f64;
    match model {
        ValueModel::Linear { w, b } => {
            let d = w.len();
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(ys) {
                let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
                let p = sigmoid(z);
                // dL/dz = 2 (p - y) p (1 - p)
                let dz = 2.0 * (p - f64::from(*y)) * p * (1.0 - p) / n;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += dz * xi;
                }
                gb += dz;
            }
            for (g, wi) in gw.iter_mut().zip(w) {
                *g += 2.0 * l2 * wi;
            }
            gw.push(gb);
            gw
        }
        ValueModel::Mlp { dim, hidden, w1, b1, w2, b2 } => {
            let (d, h) = (*dim, *hidden);
            let mut gw1 = vec![0.0; h * d];
            let mut gb1 = vec![0.0; h];
            let mut gw2 = vec![0.0; h];
            let mut gb2 = 0.0;
            let mut acts = vec![0.0; h];
            for (x, y) in xs.iter().zip(ys) {
                let mut z = *b2;
                for k in 0..h {
                    let mut a = b1[k];
                    for (wi, xi) in w1[k * d..(k + 1) * d].iter().zip(x) {
                        a += wi * xi;
                    }
                    acts[k] = a.tanh();
                    z += w2[k] * acts[k];
                }
                let p = sigmoid(z);
                let dz = 2.0 * (p - f64::from(*y)) * p * (1.0 - p) / n;
                gb2 += dz;
                for k in 0..h {
                    gw2[k] += dz * acts[k];
                    let da = dz * w2[k] * (1.0 - acts[k] * acts[k]);
                    gb1[k] += da;
                    for (g, xi) in gw1[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                }
            }
            for (g, wi) in gw1.iter_mut().zip(w1) {
                *g += 2.0 * l2 * wi;
            }
            for (g, wi) in gw2.iter_mut().zip(w2) {
                *g += 2.0 * l2 * wi;
            }
            let mut out = gw1;
            out.extend_from_slice(&gb1);
            out.extend_from_slice(&gw2);
            out.push(gb2);
            out
        }
        _ => panic!("parametric models only"),
    }
}

/// L2-regularized batch loss matching `batch_grad`.
pub fn batch_loss(model: &ValueModel, xs: &[Vec<f64>], ys: &[u8], l2: f64) -> f64 {
    let mse = batch_mse(model, xs, ys);
    let reg: f64 = match model {
        ValueModel::Linear { w, .. } => w.iter().map(|v| v * v).sum(),
        ValueModel::Mlp { w1, w2, .. } => {
            w1.iter().map(|v| v * v).sum::<f64>() + w2.iter().map(|v| v * v).sum::<f64>()
        }
        _ => 0.0,
    };
    mse + l2 * reg
}

pub fn init_model(kind: ModelKind, dim: usize, cfg: &VemTrainConfig) -> ValueModel {
    match kind {
        ModelKind::Tabular => {
            ValueModel::Tabular { cells: Default::default(), prior: cfg.prior, dim }
        }
        ModelKind::Linear => ValueModel::Linear { w: vec![0.0; dim], b: 0.0 },
        ModelKind::Mlp => {
            let h = cfg.hidden;
            let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(cfg.seed, "init"));
            let scale = (1.0 / dim as f64).sqrt();
            let w1 = (0..h * dim).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
            let w2 = (0..h)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * (1.0 / (h as f64).sqrt()))
                .collect();
            ValueModel::Mlp { dim, hidden: h, w1, b1: vec![0.0; h], w2, b2: 0.0 }
        }
        ModelKind::QTable => panic!("QTable models are not trained"),
    }
}

/// Trains a value model on encoded features and binary labels. Tabular kind
/// computes exact per-cell label means (the closed-form MSE minimizer);
/// parametric kinds run seeded mini-batch gradient descent.
pub fn train_vem(
    xs: &[Vec<f64>],
    ys: &[u8],
    cfg: &VemTrainConfig,
) -> Result<(ValueModel, TrainReport), VemTrainError> {
    if xs.is_empty() {
        return Err(VemTrainError::EmptyDataset);
    }
    if cfg.epochs < 1 || cfg.batch_size < 1 {
        return Err(VemTrainError::InvalidConfig(
            "epochs and batch_size must be >= 1".into(),
        ));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(VemTrainError::InvalidConfig("learning_rate must be > 0".into()));
    }
    if let Some(bad) = ys.iter().find(|y| **y > 1) {
        return Err(VemTrainError::BadLabel(*bad));
    }
    let dim = xs[0].len();

    if cfg.kind == ModelKind::Tabular {
        let mut model = init_model(ModelKind::Tabular, dim, cfg);
        if let ValueModel::Tabular { cells, .. } = &mut model {
            for (x, y) in xs.iter().zip(ys) {
                let key = super::feature_key(x);
                let e = cells.entry(key).or_insert((0.0, 0));
                e.0 += f64::from(*y);
                e.1 += 1;
            }
        }
        let mse = batch_mse(&model, xs, ys);
        return Ok((model, TrainReport { loss_curve: vec![mse], final_mse: mse }));
    }

    let mut model = init_model(cfg.kind, dim, cfg);
    let n_params = get_params(&model).len();
    let mut velocity = vec![0.0; n_params];
    let mut adam_m = vec![0.0; n_params];
    let mut adam_v = vec![0.0; n_params];
    let mut adam_t = 0u32;

    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|i| xs[*i].clone()).collect();
            let by: Vec<u8> = chunk.iter().map(|i| ys[*i]).collect();
            let loss = batch_loss(&model, &bx, &by, cfg.l2);
            if !loss.is_finite() {
                return Err(VemTrainError::Diverged { epoch, batch: bi });
            }
            epoch_loss += batch_mse(&model, &bx, &by);
            batches += 1;

            let grad = batch_grad(&model, &bx, &by, cfg.l2);
            let mut params = get_params(&model);
            if cfg.adam {
                adam_t += 1;
                let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
                for i in 0..n_params {
                    adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * grad[i];
                    adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = adam_m[i] / (1.0 - beta1.powi(adam_t as i32));
                    let vhat = adam_v[i] / (1.0 - beta2.powi(adam_t as i32));
                    params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + eps);
                }
            } else {
                for i in 0..n_params {
                    velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * grad[i];
                    params[i] += velocity[i];
                }
            }
            set_params(&mut model, &params);
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }

    let final_mse = batch_mse(&model, xs, ys);
    Ok((model, TrainReport { loss_curve: curve, final_mse }))
}

/// Compares the analytic MSE gradient against central finite differences
/// along `trials` random directions; returns the maximum relative error.
pub fn grad_check_vem(
    model: &ValueModel,
    xs: &[Vec<f64>],
    ys: &[u8],
    trials: usize,
    seed: u64,
) -> f64 {
    let h = 1e-5;
    let base = get_params(model);
    let grad = batch_grad(model, xs, ys, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dir: Vec<f64> = (0..base.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();

        let mut m = model.clone();
        let plus: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p + h * d).collect();
        set_params(&mut m, &plus);
        let lp = batch_loss(&m, xs, ys, 0.0);
        let minus: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p - h * d).collect();
        set_params(&mut m, &minus);
        let lm = batch_loss(&m, xs, ys, 0.0);
        let numeric = (lp - lm) / (2.0 * h);

        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

/// Confusion-matrix metrics with ell = 1 as the positive class. Degenerate
/// classes yield defined zeros.
pub fn classify_metrics(predictions: &[f64], labels: &[u8], threshold: f64) -> ClassificationMetrics {
    let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
    for (p, y) in predictions.iter().zip(labels) {
        let pred = *p >= threshold;
        match (pred, *y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let n = (tp + fp + tn + fneg) as f64;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    let f1 = f1_from(precision, recall);
    let accuracy = if n > 0.0 { (tp + tn) as f64 / n } else { 0.0 };
    ClassificationMetrics { precision, recall, f1, accuracy, threshold }
}

/// F1 = 2PR/(P+R), defined as 0 when P+R = 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}
