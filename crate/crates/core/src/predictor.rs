//! Neural reward predictors, their ensemble statistics and the UCB score.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Mlp, Model};
use crate::tensor::{load_tensors, save_tensors, AdamConfig, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("upper bound {bound} equals a true reward")]
    DegenerateBound { bound: f64 },
    #[error("upper bound {bound} is below the true reward {truth}")]
    BoundTooLow { bound: f64, truth: f64 },
    #[error("empty training data")]
    EmptyData,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `(1/n) Σ |(pred − m)/(true − m) − 1|`.
pub fn mape_loss(preds: &[f64], truths: &[f64], m_ub: f64) -> Result<f64, PredictorError> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(PredictorError::Invalid(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut acc = 0.0;
    for (&p, &t) in preds.iter().zip(truths) {
        if t == m_ub {
            return Err(PredictorError::DegenerateBound { bound: m_ub });
        }
        if t > m_ub {
            return Err(PredictorError::BoundTooLow { bound: m_ub, truth: t });
        }
        acc += ((p - m_ub) / (t - m_ub) - 1.0).abs();
    }
    Ok(acc / preds.len() as f64)
}

/// Default bound: the largest reward plus a tenth of the reward range.
pub fn default_upper_bound(truths: &[f64], margin: f64) -> f64 {
    let hi = truths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = truths.iter().copied().fold(f64::INFINITY, f64::min);
    let range = hi - lo;
    let span = if range > 0.0 { range } else { hi.abs().max(1.0) };
    hi + margin * span
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (`P − 1` denominator).
pub fn ensemble_stats(preds: &[f64]) -> Result<EnsembleStats, PredictorError> {
    if preds.len() < 2 {
        return Err(PredictorError::Invalid(format!("need at least 2 members, got {}", preds.len())));
    }
    let n = preds.len() as f64;
    let mean = preds.iter().sum::<f64>() / n;
    let var = preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(EnsembleStats { mean, std: var.sqrt() })
}

pub fn ucb(stats: EnsembleStats, beta: f64) -> f64 {
    stats.mean + beta * stats.std
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of the reward range added above the best reward for `m_UB`.
    pub bound_margin: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 8,
            width: 40,
            epochs: 300,
            lr: 0.01,
            bound_margin: 0.1,
        }
    }
}

impl PredictorConfig {
    fn dims(&self, input: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat(self.width).take(self.hidden_layers));
        d.push(1);
        d
    }
}

/// Independently initialised predictors sharing one reward normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorEnsemble {
    members: Vec<Mlp>,
    /// Rewards are standardised as `(r − shift) / scale` for training.
    shift: f64,
    scale: f64,
    /// Full-batch loss per epoch for each member.
    pub loss_history: Vec<Vec<f64>>,
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64 + 1);
    rng
}

/// Differentiable MAPE of `out` against standardised targets.
fn mape_on_tape(tape: &mut Tape, out: Var, y: &[f64], m_ub: f64) -> Result<Var, TensorError> {
    let n = y.len();
    let yv = tape.constant(Tensor::new(vec![n, 1], y.to_vec())?);
    let w = tape.constant(Tensor::new(vec![n, 1], y.iter().map(|t| 1.0 / (t - m_ub)).collect())?);
    let d = tape.sub(out, yv)?;
    let d = tape.mul(d, w)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn train_member(
    dims: &[usize],
    x: &Tensor,
    y: &[f64],
    m_ub: f64,
    cfg: &PredictorConfig,
    seed: u64,
    member: usize,
) -> Result<(Mlp, Vec<f64>), PredictorError> {
    let mut rng = member_rng(seed, member);
    let mut model = Mlp::new(dims, &mut rng);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params().len());
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params().iter().map(|p| tape.param(p)).collect();
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &vars, xv)?;
        let loss = mape_on_tape(&mut tape, out, y, m_ub)?;
        let value = tape.value(loss).item();
        history.push(value);
        if epoch == cfg.epochs || !value.is_finite() {
            break;
        }
        let mut grads = tape.backward(loss);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            if let Some(g) = grads.take(vars[i]) {
                adam.step(i, p, &g)?;
            }
        }
    }
    Ok((model, history))
}

impl PredictorEnsemble {
    /// Trains `members` predictors from scratch on `(features, rewards)`.
    /// Member `p` draws its initial weights from stream `p + 1` of `seed`.
    pub fn train(
        features: &[Vec<f64>],
        rewards: &[f64],
        members: usize,
        cfg: &PredictorConfig,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        if features.is_empty() || rewards.is_empty() {
            return Err(PredictorError::EmptyData);
        }
        if features.len() != rewards.len() {
            return Err(PredictorError::Invalid("features and rewards differ in length".into()));
        }
        if members < 2 {
            return Err(PredictorError::Invalid(format!("ensemble needs at least 2 members, got {members}")));
        }
        let input = features[0].len();
        if features.iter().any(|f| f.len() != input) {
            return Err(PredictorError::Invalid("ragged feature vectors".into()));
        }
        let n = rewards.len() as f64;
        let shift = rewards.iter().sum::<f64>() / n;
        let sd = (rewards.iter().map(|r| (r - shift).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 1e-12 { sd } else { 1.0 };
        let y: Vec<f64> = rewards.iter().map(|r| (r - shift) / scale).collect();
        let m_ub = default_upper_bound(&y, cfg.bound_margin);
        let x = Tensor::new(vec![features.len(), input], features.concat())?;
        let dims = cfg.dims(input);
        let trained: Vec<(Mlp, Vec<f64>)> = crate::par_map(members, |p| train_member(&dims, &x, &y, m_ub, cfg, seed, p))
            .into_iter()
            .collect::<Result<_, _>>()?;
        let (members, loss_history) = trained.into_iter().unzip();
        Ok(Self {
            members,
            shift,
            scale,
            loss_history,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member predictions, in reward units, for each feature row:
    /// `out[row][member]`.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PredictorError> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let input = features[0].len();
        let x = Tensor::new(vec![features.len(), input], features.concat())?;
        let mut out = vec![Vec::with_capacity(self.members.len()); features.len()];
        for m in &self.members {
            let y = crate::nn::predict(m, x.clone()).map_err(|e| PredictorError::Invalid(e.to_string()))?;
            for (row, v) in out.iter_mut().zip(y.data()) {
                row.push(v * self.scale + self.shift);
            }
        }
        Ok(out)
    }

    pub fn stats(&self, features: &[Vec<f64>]) -> Result<Vec<EnsembleStats>, PredictorError> {
        self.predict(features)?.iter().map(|p| ensemble_stats(p)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let meta = Tensor::new(vec![2], vec![self.shift, self.scale])?;
        let dims = Tensor::new(
            vec![self.members[0].dims().len()],
            self.members[0].dims().iter().map(|&d| d as f64).collect(),
        )?;
        let mut named: Vec<(String, &Tensor)> = vec![("meta.norm".into(), &meta), ("meta.dims".into(), &dims)];
        for (p, m) in self.members.iter().enumerate() {
            for (name, t) in m.param_names().into_iter().zip(m.params()) {
                named.push((format!("member{p}.{name}"), t));
            }
        }
        save_tensors(path, &named)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let tensors = load_tensors(path)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| PredictorError::Invalid(format!("checkpoint lacks {name}")))
        };
        let meta = find("meta.norm")?.data().to_vec();
        let dims: Vec<usize> = find("meta.dims")?.data().iter().map(|&d| d as usize).collect();
        let mut members = Vec::new();
        loop {
            let p = members.len();
            if find(&format!("member{p}.fc0.weight")).is_err() {
                break;
            }
            let mut m = Mlp::new(&dims, &mut rand::rngs::mock::StepRng::new(0, 1));
            for (name, slot) in m.param_names().into_iter().zip(m.params_mut().iter_mut()) {
                let t = find(&format!("member{p}.{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(PredictorError::Invalid(format!("member{p}.{name} has the wrong shape")));
                }
                *slot = t.clone();
            }
            members.push(m);
        }
        if members.len() < 2 || meta.len() != 2 {
            return Err(PredictorError::Invalid("checkpoint holds fewer than 2 members".into()));
        }
        Ok(Self {
            members,
            shift: meta[0],
            scale: meta[1],
            loss_history: Vec::new(),
        })
    }
}
