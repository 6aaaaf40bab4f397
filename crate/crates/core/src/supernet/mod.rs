//! Toy super-resolution supernet trained one random path at a time.
//!
//! Every cell holds one instance of each block type. A path picks one block
//! per cell; cells communicate through a single feature map, so any block
//! can follow any other. Head, tail and the global residual are shared by
//! all paths.

mod data;

pub use data::{downsample, texture, texture_dataset};

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latency::{LatencyError, LayerDescriptor, LayerType, ModelLayer};
use crate::nn::{Dataset, LayerInfo, Model, NnError};
use crate::search_space::{BlockChoice, Candidate, SearchSpace};
use crate::tensor::{load_tensors, save_tensors, AdamConfig, AdamState, ConvGeom, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SupernetError {
    #[error("invalid supernet configuration: {0}")]
    Config(String),
    #[error("path has {got} cells, supernet has {expected}")]
    PathLength { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetConfig {
    pub cells: usize,
    pub width: usize,
    pub scale: usize,
    pub in_ch: usize,
    pub expand_a: usize,
    pub expand_b: usize,
    /// Low-resolution input side length, used for latency descriptors.
    pub lr_size: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            cells: 2,
            width: 8,
            scale: 2,
            in_ch: 1,
            expand_a: 4,
            expand_b: 6,
            lr_size: 8,
        }
    }
}

/// Shape of one block's parameters and which of them are searched.
struct ConvSpec {
    out_ch: usize,
    in_ch: usize,
    k: usize,
    prunable: bool,
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<(), SupernetError> {
        let fields = [
            ("cells", self.cells),
            ("width", self.width),
            ("scale", self.scale),
            ("in_ch", self.in_ch),
            ("expand_a", self.expand_a),
            ("expand_b", self.expand_b),
            ("lr_size", self.lr_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(SupernetError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.lr_size < 3 {
            return Err(SupernetError::Config("lr_size must be at least 3".into()));
        }
        Ok(())
    }

    fn block_convs(&self, b: BlockChoice) -> Vec<ConvSpec> {
        let w = self.width;
        let c = |out_ch, in_ch, k, prunable| ConvSpec { out_ch, in_ch, k, prunable };
        match b {
            BlockChoice::TypeA => vec![c(w * self.expand_a, w, 3, true), c(w, w * self.expand_a, 3, true)],
            BlockChoice::TypeB => vec![
                c(w * self.expand_b, w, 3, true),
                c(w, w * self.expand_b, 1, false),
                c(w, w, 3, true),
            ],
        }
    }

    /// Searchable layers per block type, indexed like [`BlockChoice::index`].
    pub fn search_space(&self) -> SearchSpace {
        let layers = BlockChoice::ALL
            .iter()
            .map(|&b| self.block_convs(b).iter().filter(|c| c.prunable).count())
            .collect();
        SearchSpace::new(self.cells, layers)
    }

    /// Analytic parameter count of one block.
    pub fn block_param_count(&self, b: BlockChoice) -> usize {
        self.block_convs(b).iter().map(|c| c.out_ch * c.in_ch * c.k * c.k).sum()
    }

    /// Head and tail parameters (shared by every path).
    pub fn shared_param_count(&self) -> usize {
        let r2 = self.scale * self.scale * self.in_ch;
        self.width * self.in_ch * 9 + self.width + r2 * self.width * 9 + r2
    }

    fn conv_desc(&self, c: &ConvSpec) -> Result<LayerDescriptor, LatencyError> {
        let lt = LayerType::conv(c.k).ok_or_else(|| LatencyError::Invalid(format!("no layer type for {0}x{0}", c.k)))?;
        LayerDescriptor::new(lt, c.in_ch, c.out_ch, self.lr_size, self.lr_size)
    }

    /// Every layer of one block, skip add included.
    pub fn block_descriptors(&self, b: BlockChoice) -> Result<Vec<(LayerDescriptor, bool)>, LatencyError> {
        let mut out = Vec::new();
        for c in self.block_convs(b) {
            out.push((self.conv_desc(&c)?, c.prunable));
        }
        out.push((
            LayerDescriptor::new(LayerType::SkipAdd, self.width, self.width, self.lr_size, self.lr_size)?,
            false,
        ));
        Ok(out)
    }

    /// Layers outside the cells: head, tail, pixel shuffle and global add.
    pub fn shared_descriptors(&self) -> Result<Vec<LayerDescriptor>, LatencyError> {
        let (s, r, c) = (self.lr_size, self.scale, self.in_ch);
        Ok(vec![
            LayerDescriptor::new(LayerType::Conv3x3, c, self.width, s, s)?,
            LayerDescriptor::new(LayerType::Conv3x3, self.width, r * r * c, s, s)?,
            LayerDescriptor::new(LayerType::PixelShuffle, r * r * c, c, s, s)?,
            LayerDescriptor::new(LayerType::SkipAdd, c, c, s * r, s * r)?,
        ])
    }

    /// Per-block-type cell templates for cell-count determination.
    pub fn cell_templates(&self) -> Result<Vec<Vec<LayerDescriptor>>, LatencyError> {
        BlockChoice::ALL
            .iter()
            .map(|&b| Ok(self.block_descriptors(b)?.into_iter().map(|(d, _)| d).collect()))
            .collect()
    }

    /// Every distinct layer shape any path can contain, sorted.
    pub fn layer_descriptors(&self) -> Result<Vec<LayerDescriptor>, LatencyError> {
        let mut out = self.shared_descriptors()?;
        for t in self.cell_templates()? {
            out.extend(t);
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Latency-model view of a candidate. Searched convs carry the
    /// candidate's scheme at ratio 0; everything else is dense.
    pub fn candidate_layers(&self, cand: &Candidate) -> Result<Vec<ModelLayer>, LatencyError> {
        let mut out: Vec<ModelLayer> = Vec::new();
        let shared = self.shared_descriptors()?;
        out.push(ModelLayer::dense(shared[0]));
        let mut schemes = cand.schemes.iter();
        for &b in &cand.cells {
            for (d, prunable) in self.block_descriptors(b)? {
                let scheme = if prunable {
                    Some(*schemes.next().ok_or_else(|| LatencyError::Invalid("candidate has too few schemes".into()))?)
                } else {
                    None
                };
                out.push(ModelLayer { desc: d, scheme, ratio: 0.0 });
            }
        }
        out.extend(shared[1..].iter().map(|&d| ModelLayer::dense(d)));
        Ok(out)
    }
}

fn conv_forward(tape: &mut Tape, x: Var, w: Var) -> Result<Var, TensorError> {
    let k = tape.shape(w)[2];
    tape.conv2d(x, w, ConvGeom::same(k))
}

fn block_forward(tape: &mut Tape, b: BlockChoice, p: &[Var], x: Var) -> Result<Var, TensorError> {
    let mut h = conv_forward(tape, x, p[0])?;
    h = tape.relu(h);
    h = conv_forward(tape, h, p[1])?;
    if b == BlockChoice::TypeB {
        h = conv_forward(tape, h, p[2])?;
    }
    tape.add(h, x)
}

/// Shared forward: head, the chosen blocks in order, tail, pixel shuffle
/// and the nearest-neighbour global residual.
fn path_forward(
    tape: &mut Tape,
    scale: usize,
    head: [Var; 2],
    blocks: &[(BlockChoice, &[Var])],
    tail: [Var; 2],
    x: Var,
) -> Result<Var, TensorError> {
    let mut h = conv_forward(tape, x, head[0])?;
    h = tape.add_bias(h, head[1])?;
    for &(b, p) in blocks {
        h = block_forward(tape, b, p, h)?;
    }
    let t = conv_forward(tape, h, tail[0])?;
    let t = tape.add_bias(t, tail[1])?;
    let up = tape.pixel_shuffle(t, scale)?;
    let skip = tape.upsample_nearest(x, scale)?;
    tape.add(up, skip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    config: SupernetConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    /// `blocks[n][k]` is the parameter range of block `k` in cell `n`.
    blocks: Vec<Vec<Range<usize>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SupernetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub path_counts: BTreeMap<Vec<BlockChoice>, usize>,
}

/// Uniformly random path.
pub fn sample_path<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> Vec<BlockChoice> {
    (0..cells)
        .map(|_| BlockChoice::ALL[rng.gen_range(0..BlockChoice::ALL.len())])
        .collect()
}

impl Supernet {
    /// Kaiming-uniform initialisation of every block; biases start at zero.
    pub fn new<R: Rng + ?Sized>(config: SupernetConfig, rng: &mut R) -> Result<Self, SupernetError> {
        config.validate()?;
        let conv = |o: usize, i: usize, k: usize, rng: &mut R| Tensor::kaiming_uniform(&[o, i, k, k], i * k * k, rng);
        let w = config.width;
        let r2 = config.scale * config.scale * config.in_ch;
        let mut names = vec!["head.weight".to_string(), "head.bias".to_string()];
        let mut params = vec![conv(w, config.in_ch, 3, rng), Tensor::zeros(&[w])];
        let mut blocks = Vec::with_capacity(config.cells);
        for n in 0..config.cells {
            let mut cell = Vec::new();
            for b in BlockChoice::ALL {
                let start = params.len();
                for (j, c) in config.block_convs(b).iter().enumerate() {
                    names.push(format!("cell{n}.block{}.conv{j}.weight", b.index()));
                    params.push(conv(c.out_ch, c.in_ch, c.k, rng));
                }
                cell.push(start..params.len());
            }
            blocks.push(cell);
        }
        names.extend(["tail.weight".to_string(), "tail.bias".to_string()]);
        params.extend([conv(r2, w, 3, rng), Tensor::zeros(&[r2])]);
        Ok(Self { config, params, names, blocks })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Number of distinct paths, `K^N`.
    pub fn path_count(&self) -> u128 {
        (BlockChoice::ALL.len() as u128).pow(self.config.cells as u32)
    }

    fn check_path(&self, path: &[BlockChoice]) -> Result<(), SupernetError> {
        if path.len() != self.config.cells {
            return Err(SupernetError::PathLength {
                got: path.len(),
                expected: self.config.cells,
            });
        }
        Ok(())
    }

    /// Parameter indices that a path reads, in path-model order.
    pub fn path_param_indices(&self, path: &[BlockChoice]) -> Result<Vec<usize>, SupernetError> {
        self.check_path(path)?;
        let last = self.params.len();
        let mut idx = vec![0, 1];
        for (n, b) in path.iter().enumerate() {
            idx.extend(self.blocks[n][b.index()].clone());
        }
        idx.extend([last - 2, last - 1]);
        Ok(idx)
    }

    fn forward_indices(&self, tape: &mut Tape, path: &[BlockChoice], vars: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut blocks = Vec::with_capacity(path.len());
        let mut at = 2;
        for (n, b) in path.iter().enumerate() {
            let len = self.blocks[n][b.index()].len();
            blocks.push((*b, &vars[at..at + len]));
            at += len;
        }
        path_forward(tape, self.config.scale, [vars[0], vars[1]], &blocks, [vars[at], vars[at + 1]], x)
    }

    /// Output of the supernet with `path` active.
    pub fn forward(&self, path: &[BlockChoice], x: &Tensor) -> Result<Tensor, SupernetError> {
        let idx = self.path_param_indices(path)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = idx.iter().map(|&i| tape.constant(self.params[i].clone())).collect();
        let xv = tape.constant(x.clone());
        let out = self.forward_indices(&mut tape, path, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    /// One Adam step on a single batch through `path`. Only that path's
    /// blocks plus head and tail are read or written.
    pub fn train_step(
        &mut self,
        path: &[BlockChoice],
        x: Tensor,
        y: Tensor,
        adam: &mut AdamState,
    ) -> Result<f64, SupernetError> {
        let idx = self.path_param_indices(path)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = idx.iter().map(|&i| tape.param(&self.params[i])).collect();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let out = self.forward_indices(&mut tape, path, &vars, xv)?;
        let loss = tape.mse(out, yv)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(NnError::Diverged {
                epoch: 0,
                batch: 0,
                loss: value,
            }
            .into());
        }
        let mut grads = tape.backward(loss);
        for (v, &i) in vars.iter().zip(&idx) {
            if let Some(g) = grads.take(*v) {
                adam.step(i, &mut self.params[i], &g)?;
            }
        }
        Ok(value)
    }

    /// Single-path training: every batch samples a path uniformly and
    /// updates only the weights on it.
    pub fn train_single_path<R: Rng + ?Sized>(
        &mut self,
        data: &Dataset,
        cfg: &SupernetTrainConfig,
        rng: &mut R,
    ) -> Result<TrainStats, SupernetError> {
        if data.is_empty() {
            return Err(NnError::EmptyData.into());
        }
        let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), self.params.len());
        let mut stats = TrainStats::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for (batch, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                let path = sample_path(self.config.cells, rng);
                let (x, y) = data.batch(chunk);
                let loss = match self.train_step(&path, x, y, &mut adam) {
                    Err(SupernetError::Nn(NnError::Diverged { loss, .. })) => {
                        return Err(NnError::Diverged { epoch, batch, loss }.into())
                    }
                    other => other?,
                };
                total += loss * chunk.len() as f64;
                *stats.path_counts.entry(path).or_default() += 1;
            }
            stats.epoch_losses.push(total / data.len() as f64);
            log::debug!("supernet epoch {epoch}: loss {:.6}", total / data.len() as f64);
        }
        Ok(stats)
    }

    /// Mean validation loss of one path.
    pub fn path_loss(&self, path: &[BlockChoice], data: &Dataset) -> Result<f64, SupernetError> {
        let m = self.extract_path(path)?;
        Ok(crate::nn::evaluate(&m, data, 64)?)
    }

    /// Standalone copy of one path's weights.
    pub fn extract_path(&self, path: &[BlockChoice]) -> Result<PathModel, SupernetError> {
        let idx = self.path_param_indices(path)?;
        Ok(PathModel {
            config: self.config,
            path: path.to_vec(),
            params: idx.iter().map(|&i| self.params[i].clone()).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        })
    }

    /// Writes a path model's weights back into the supernet.
    pub fn insert_path(&mut self, model: &PathModel) -> Result<(), SupernetError> {
        let idx = self.path_param_indices(&model.path)?;
        for (&i, p) in idx.iter().zip(&model.params) {
            if self.params[i].shape() != p.shape() {
                return Err(SupernetError::Config(format!("shape mismatch for {}", self.names[i])));
            }
            self.params[i] = p.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SupernetError> {
        let meta = config_tensor(&self.config);
        let mut named: Vec<(String, &Tensor)> = vec![("meta.config".into(), &meta)];
        named.extend(self.names.iter().cloned().zip(self.params.iter()));
        save_tensors(path, &named)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SupernetError> {
        let mut map: BTreeMap<String, Tensor> = load_tensors(path)?.into_iter().collect();
        let config = take_config(&mut map)?;
        let mut sn = Supernet::new(config, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        fill_params(&sn.names, &mut sn.params, map)?;
        Ok(sn)
    }
}

fn config_tensor(c: &SupernetConfig) -> Tensor {
    let v = [c.cells, c.width, c.scale, c.in_ch, c.expand_a, c.expand_b, c.lr_size];
    Tensor::from_fn(&[7], |i| v[i] as f64)
}

fn take_config(map: &mut BTreeMap<String, Tensor>) -> Result<SupernetConfig, SupernetError> {
    let meta = map
        .remove("meta.config")
        .ok_or_else(|| SupernetError::Checkpoint("missing meta.config".into()))?;
    let m = meta.data();
    if m.len() != 7 {
        return Err(SupernetError::Checkpoint("meta.config must have 7 entries".into()));
    }
    Ok(SupernetConfig {
        cells: m[0] as usize,
        width: m[1] as usize,
        scale: m[2] as usize,
        in_ch: m[3] as usize,
        expand_a: m[4] as usize,
        expand_b: m[5] as usize,
        lr_size: m[6] as usize,
    })
}

fn fill_params(names: &[String], params: &mut [Tensor], mut map: BTreeMap<String, Tensor>) -> Result<(), SupernetError> {
    for (name, p) in names.iter().zip(params.iter_mut()) {
        let t = map
            .remove(name)
            .ok_or_else(|| SupernetError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != p.shape() {
            return Err(SupernetError::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.shape())));
        }
        *p = t;
    }
    if let Some(extra) = map.keys().next() {
        return Err(SupernetError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// One path of a supernet as an ordinary model.
#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    config: SupernetConfig,
    path: Vec<BlockChoice>,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl PathModel {
    pub fn path(&self) -> &[BlockChoice] {
        &self.path
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    /// Fresh Kaiming initialisation of the same architecture.
    pub fn fresh<R: Rng + ?Sized>(config: SupernetConfig, path: &[BlockChoice], rng: &mut R) -> Result<Self, SupernetError> {
        let cfg = SupernetConfig {
            cells: path.len(),
            ..config
        };
        Supernet::new(cfg, rng)?.extract_path(path)
    }

    /// Saves weights plus `meta.config` and `meta.path` (block indices).
    pub fn save(&self, path: &Path) -> Result<(), SupernetError> {
        let meta = config_tensor(&self.config);
        let p = Tensor::from_fn(&[self.path.len()], |i| self.path[i].index() as f64);
        let mut named: Vec<(String, &Tensor)> = vec![("meta.config".into(), &meta), ("meta.path".into(), &p)];
        named.extend(self.names.iter().cloned().zip(self.params.iter()));
        save_tensors(path, &named)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SupernetError> {
        let mut map: BTreeMap<String, Tensor> = load_tensors(path)?.into_iter().collect();
        let config = take_config(&mut map)?;
        let p = map
            .remove("meta.path")
            .ok_or_else(|| SupernetError::Checkpoint("missing meta.path".into()))?;
        let choices = p
            .data()
            .iter()
            .map(|&v| BlockChoice::from_index(v as usize).ok_or_else(|| SupernetError::Checkpoint(format!("bad block index {v}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut model = PathModel::fresh(config, &choices, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        fill_params(&model.names, &mut model.params, map)?;
        Ok(model)
    }
}

impl Model for PathModel {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn prunable_layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut at = 2;
        for &b in &self.path {
            for c in self.config.block_convs(b) {
                if c.prunable {
                    out.push(LayerInfo {
                        name: self.names[at].trim_end_matches(".weight").to_string(),
                        param: at,
                        in_ch: c.in_ch,
                        out_ch: c.out_ch,
                        kh: c.k,
                        kw: c.k,
                        feat_h: self.config.lr_size,
                        feat_w: self.config.lr_size,
                    });
                }
                at += 1;
            }
        }
        out
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut blocks = Vec::with_capacity(self.path.len());
        let mut at = 2;
        for &b in &self.path {
            let len = self.config.block_convs(b).len();
            blocks.push((b, &params[at..at + len]));
            at += len;
        }
        path_forward(tape, self.config.scale, [params[0], params[1]], &blocks, [params[at], params[at + 1]], x)
    }
}
