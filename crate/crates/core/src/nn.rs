//! Model abstraction, datasets and the masked training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{OptimizerKind, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyData,
    #[error("mask for parameter {param} has {got} entries, expected {expected}")]
    MaskShape { param: usize, got: usize, expected: usize },
}

/// A prunable weight and the geometry needed to view it as a GEMM operand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    /// Index into [`Model::params`].
    pub param: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    /// Spatial size of the layer's input feature map (1×1 for dense layers).
    pub feat_h: usize,
    pub feat_w: usize,
}

impl LayerInfo {
    /// GEMM rows (output channels).
    pub fn rows(&self) -> usize {
        self.out_ch
    }

    /// GEMM columns (`in_ch · kh · kw`).
    pub fn cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn kernel_area(&self) -> usize {
        self.kh * self.kw
    }
}

/// A differentiable model whose parameters live outside the tape.
pub trait Model {
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    fn param_names(&self) -> Vec<String>;
    fn prunable_layers(&self) -> Vec<LayerInfo>;
    /// Records the forward pass; `params[i]` is the tape handle of `self.params()[i]`.
    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError>;

    fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    fn nnz(&self) -> usize {
        self.params().iter().map(|p| p.data().iter().filter(|v| **v != 0.0).count()).sum()
    }
}

/// Input/target pairs stacked along the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self, NnError> {
        if inputs.rank() == 0 || targets.rank() == 0 || inputs.shape()[0] != targets.shape()[0] {
            return Err(TensorError::Dimension {
                op: "dataset",
                detail: format!("inputs {:?} and targets {:?} disagree", inputs.shape(), targets.shape()),
            }
            .into());
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (self.inputs.select_rows(idx), self.targets.select_rows(idx))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (inputs, targets) = self.batch(idx);
        Dataset { inputs, targets }
    }
}

/// Per-parameter 0/1 masks; `None` leaves a parameter unconstrained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSet {
    masks: Vec<Option<Vec<f64>>>,
}

impl MaskSet {
    pub fn new(params: usize) -> Self {
        Self {
            masks: vec![None; params],
        }
    }

    pub fn set(&mut self, param: usize, mask: Vec<f64>) {
        if param >= self.masks.len() {
            self.masks.resize(param + 1, None);
        }
        self.masks[param] = Some(mask);
    }

    pub fn get(&self, param: usize) -> Option<&[f64]> {
        self.masks.get(param).and_then(|m| m.as_deref())
    }

    pub fn apply<M: Model + ?Sized>(&self, model: &mut M) -> Result<(), NnError> {
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            if let Some(mask) = self.get(i) {
                if mask.len() != p.len() {
                    return Err(NnError::MaskShape {
                        param: i,
                        got: mask.len(),
                        expected: p.len(),
                    });
                }
                for (w, m) in p.data_mut().iter_mut().zip(mask) {
                    if *m == 0.0 {
                        *w = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Quadratic penalty `Σ coeffs[i] · w[i]²` per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Penalty {
    pub terms: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            optimizer: OptimizerKind::Adam { lr: 1e-3 },
        }
    }
}

fn forward_loss<M: Model + ?Sized>(
    model: &M,
    tape: &mut Tape,
    x: Tensor,
    y: Tensor,
) -> Result<(Vec<Var>, Var), TensorError> {
    let vars: Vec<Var> = model.params().iter().map(|p| tape.param(p)).collect();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let out = model.forward(tape, &vars, xv)?;
    let loss = tape.mse(out, yv)?;
    Ok((vars, loss))
}

/// Mean squared error over the whole dataset, in batches of `batch_size`.
pub fn evaluate<M: Model + ?Sized>(model: &M, data: &Dataset, batch_size: usize) -> Result<f64, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyData);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let (_, loss) = forward_loss(model, &mut tape, x, y)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Model output for a batch of inputs.
pub fn predict<M: Model + ?Sized>(model: &M, x: Tensor) -> Result<Tensor, NnError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params().iter().map(|p| tape.param(p)).collect();
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &vars, xv)?;
    Ok(tape.value(out).clone())
}

/// Mini-batch training on MSE plus an optional quadratic penalty.
///
/// Masked entries have their gradients zeroed and are re-zeroed after every
/// step, so pruned weights stay exactly zero. Returns the mean data loss of
/// each epoch.
pub fn train<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    data: &Dataset,
    cfg: &TrainConfig,
    masks: Option<&MaskSet>,
    penalty: Option<&Penalty>,
    rng: &mut R,
) -> Result<Vec<f64>, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyData);
    }
    if let Some(m) = masks {
        m.apply(model)?;
    }
    let mut opt = cfg.optimizer.build(model.params().len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let (x, y) = data.batch(chunk);
            let mut tape = Tape::new();
            let (vars, loss) = forward_loss(&*model, &mut tape, x, y)?;
            let data_loss = tape.value(loss).item();
            let mut root = loss;
            if let Some(pen) = penalty {
                for (param, coeffs) in &pen.terms {
                    let term = tape.weighted_squares(vars[*param], coeffs.clone())?;
                    root = tape.add(root, term)?;
                }
            }
            let total = tape.value(root).item();
            if !total.is_finite() {
                return Err(NnError::Diverged { epoch, batch, loss: total });
            }
            epoch_loss += data_loss * chunk.len() as f64;
            let mut grads = tape.backward(root);
            for (i, p) in model.params_mut().iter_mut().enumerate() {
                let Some(mut g) = grads.take(vars[i]) else { continue };
                let mask = masks.and_then(|m| m.get(i));
                if let Some(mask) = mask {
                    g.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                }
                opt.step(i, p, &g)?;
                if let Some(mask) = mask {
                    p.data_mut().iter_mut().zip(mask).for_each(|(w, m)| {
                        if *m == 0.0 {
                            *w = 0.0
                        }
                    });
                }
            }
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok(history)
}

/// Fully connected stack with ReLU between layers; weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    params: Vec<Tensor>,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let mut params = Vec::new();
        for w in dims.windows(2) {
            params.push(Tensor::kaiming_uniform(&[w[1], w[0]], w[0], rng));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Self {
            params,
            dims: dims.to_vec(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
}

impl Model for Mlp {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|l| [format!("fc{l}.weight"), format!("fc{l}.bias")])
            .collect()
    }

    fn prunable_layers(&self) -> Vec<LayerInfo> {
        self.dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerInfo {
                name: format!("fc{l}"),
                param: 2 * l,
                in_ch: w[0],
                out_ch: w[1],
                kh: 1,
                kw: 1,
                feat_h: 1,
                feat_w: 1,
            })
            .collect()
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let wt = tape.transpose(params[2 * l])?;
            h = tape.matmul(h, wt)?;
            h = tape.add_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
