//! Conventional, semi-siamese and multi-agent semi-siamese training loops.

mod agents;
mod queue;

pub use agents::{masst_update, sst_update, AgentStack};
pub use queue::GalleryQueue;

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::curvature::{CurvatureTrace, PowerIterConfig, DEFAULT_MAX_ITERS, DEFAULT_THR};
use crate::diffcore::{self, Activation, Matrix};
use crate::embedmodel::EmbeddingNet;
use crate::error::{invalid, Error, Result};
use crate::losses::{self, LossConfig, PrototypeSet};
use crate::rngs::{self, LabRng, Stream};
use crate::synthdata::{IdentityUniverse, SampledDataset};

pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_LR_MILESTONES: [f64; 2] = [0.6, 0.85];
pub const DEFAULT_LR_FACTOR: f64 = 0.1;
pub const DEFAULT_ITERATIONS: usize = 4000;
pub const DEFAULT_BATCH_IDS: usize = 32;
pub const DEFAULT_QUEUE_CAPACITY: usize = 512;
pub const DEFAULT_AGENTS: usize = 3;
pub const DEFAULT_AGENT_MOMENTUM: f64 = 0.7;
pub const DEFAULT_MIX: f64 = 0.1;
pub const CONVT_SGD_MOMENTUM: f64 = 0.9;
pub const CONVT_WEIGHT_DECAY: f64 = 5e-4;
pub const DEFAULT_INPUT_DIM: usize = 32;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_EMB_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Learnable prototype matrix, one row per training identity.
    Convt,
    Sst,
    Masst,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Convt => "convt",
            Mode::Sst => "sst",
            Mode::Masst => "masst",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convt" => Ok(Mode::Convt),
            "sst" => Ok(Mode::Sst),
            "masst" => Ok(Mode::Masst),
            other => Err(invalid("train.mode", format!("unknown mode '{other}' (expected convt, sst or masst)"))),
        }
    }
}

/// Step decay: the rate is multiplied by `factor` once the iteration passes
/// each milestone, given as a fraction of the run length.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let mut lr = self.initial;
        for &m in &self.milestones {
            if iter as f64 >= m * total as f64 {
                lr *= self.factor;
            }
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(invalid("train.lr", "learning rate must be positive"));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(invalid("train.lr_factor", "decay factor must lie in (0, 1]"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid("train.lr_milestones", "milestones are fractions in [0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("train.lr_milestones", "milestones must be non-decreasing"));
        }
        Ok(())
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: DEFAULT_LR, milestones: DEFAULT_LR_MILESTONES.to_vec(), factor: DEFAULT_LR_FACTOR }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.emb_dim);
        sizes
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: DEFAULT_HIDDEN.to_vec(), emb_dim: DEFAULT_EMB_DIM, activation: Activation::Tanh }
    }
}

/// Adds `β(α − ||w_y||)` per sample to the conventional loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtoReg {
    pub alpha: f64,
    pub beta: f64,
}

/// Adds `weight·max(0, ||θ_p − θ_g|| − ε')` to the semi-siamese loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetPenalty {
    pub eps_prime: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub loss: LossConfig,
    pub lr: LrSchedule,
    pub iterations: usize,
    /// Identities per batch; each contributes one gallery and one probe sample.
    pub batch_ids: usize,
    /// Agent momentum `m`.
    pub agent_momentum: f64,
    pub agents: usize,
    /// Dispersion weight `a`.
    pub mix: f64,
    pub queue_capacity: usize,
    pub seed: u64,
    /// Heavy-ball coefficient of the probe (and prototype) optimizer.
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub proto_reg: Option<ProtoReg>,
    pub net_penalty: Option<NetPenalty>,
    pub curvature_every: Option<usize>,
    pub power_thr: f64,
    pub power_max_iters: usize,
    pub model: ModelConfig,
}

impl TrainerConfig {
    /// Defaults for `mode`. Only convt uses optimizer momentum and weight decay;
    /// sst runs a single agent without dispersion.
    pub fn new(mode: Mode) -> Self {
        let convt = mode == Mode::Convt;
        TrainerConfig {
            mode,
            loss: LossConfig::default(),
            lr: LrSchedule::default(),
            iterations: DEFAULT_ITERATIONS,
            batch_ids: DEFAULT_BATCH_IDS,
            agent_momentum: DEFAULT_AGENT_MOMENTUM,
            agents: if mode == Mode::Sst { 1 } else { DEFAULT_AGENTS },
            mix: if mode == Mode::Sst { 0.0 } else { DEFAULT_MIX },
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            seed: 0,
            sgd_momentum: if convt { CONVT_SGD_MOMENTUM } else { 0.0 },
            weight_decay: if convt { CONVT_WEIGHT_DECAY } else { 0.0 },
            proto_reg: None,
            net_penalty: None,
            curvature_every: None,
            power_thr: DEFAULT_THR,
            power_max_iters: DEFAULT_MAX_ITERS,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.lr.validate()?;
        if self.batch_ids < 1 {
            return Err(invalid("train.batch_ids", "need at least one identity per batch"));
        }
        if !(0.0..=1.0).contains(&self.agent_momentum) {
            return Err(invalid("train.momentum", "agent momentum must lie in [0, 1]"));
        }
        if !(self.mix >= 0.0 && self.mix.is_finite()) {
            return Err(invalid("train.mix", "mixing weight must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(invalid("train.sgd_momentum", "optimizer momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("train.weight_decay", "weight decay must be >= 0"));
        }
        match self.mode {
            Mode::Sst if self.agents != 1 || self.mix != 0.0 => {
                return Err(invalid("train.agents", "sst uses exactly one agent and no mixing; use masst"));
            }
            Mode::Masst if self.agents < 2 && self.mix > 0.0 => {
                return Err(invalid("train.agents", "masst with a > 0 needs at least two agents"));
            }
            Mode::Masst if self.agents < 1 => return Err(invalid("train.agents", "need at least one agent")),
            _ => {}
        }
        if let Some(reg) = self.proto_reg {
            if self.mode != Mode::Convt {
                return Err(invalid("ablation.proto_reg", "prototype regularizer applies to convt only"));
            }
            if !(reg.beta >= 0.0 && reg.alpha.is_finite() && reg.beta.is_finite()) {
                return Err(invalid("ablation.proto_reg", "need finite alpha and beta >= 0"));
            }
        }
        if let Some(pen) = self.net_penalty {
            if self.mode == Mode::Convt {
                return Err(invalid("ablation.net_penalty", "network penalty needs a gallery network (sst or masst)"));
            }
            if !(pen.weight >= 0.0 && pen.eps_prime >= 0.0 && pen.weight.is_finite() && pen.eps_prime.is_finite()) {
                return Err(invalid("ablation.net_penalty", "need eps' >= 0 and weight >= 0"));
            }
        }
        if self.curvature_every == Some(0) {
            return Err(invalid("curvature.every", "probe interval must be >= 1"));
        }
        self.power_config().validate()?;
        if self.model.emb_dim < 1 || self.model.hidden.iter().any(|&h| h < 1) {
            return Err(invalid("model", "layer sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn power_config(&self) -> PowerIterConfig {
        PowerIterConfig { thr: self.power_thr, max_iters: self.power_max_iters, seed: self.seed }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig::new(Mode::Masst)
    }
}

/// One gallery and one probe sample for each of a set of distinct identities.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub gallery: Matrix,
    pub probe: Matrix,
}

impl Batch {
    pub fn new(ids: Vec<u32>, gallery: Matrix, probe: Matrix) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid("batch", "batch must not be empty"));
        }
        if gallery.rows() != ids.len() || probe.rows() != ids.len() || gallery.cols() != probe.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gallery and probe rows of equal width", ids.len()),
                found: format!(
                    "{}x{} gallery, {}x{} probe",
                    gallery.rows(),
                    gallery.cols(),
                    probe.rows(),
                    probe.cols()
                ),
            });
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("batch", "identities within a batch must be distinct"));
        }
        Ok(Batch { ids, gallery, probe })
    }

    /// Picks `size` identities uniformly without replacement, then one
    /// gallery/probe pair for each.
    pub fn draw(dataset: &SampledDataset, size: usize, rng: &mut LabRng) -> Result<Self> {
        if size < 1 || size > dataset.num_ids() {
            return Err(invalid(
                "train.batch_ids",
                format!("batch of {size} identities from a dataset with {}", dataset.num_ids()),
            ));
        }
        let ids: Vec<u32> = index::sample(rng, dataset.num_ids(), size).into_iter().map(|i| i as u32).collect();
        let dim = dataset.input_dim();
        let mut gallery = Vec::with_capacity(size * dim);
        let mut probe = Vec::with_capacity(size * dim);
        for &id in &ids {
            let (g, p) = dataset.draw_pair(id, rng)?;
            gallery.extend_from_slice(g);
            probe.extend_from_slice(p);
        }
        Batch::new(ids, Matrix::new(size, dim, gallery)?, Matrix::new(size, dim, probe)?)
    }

    /// Like [`Batch::draw`] but with fresh samples from the universe, so the
    /// batch is held out from any dataset sampled from it.
    pub fn draw_fresh(universe: &IdentityUniverse, size: usize, rng: &mut LabRng) -> Result<Self> {
        if size < 1 || size > universe.num_ids() {
            return Err(invalid(
                "train.batch_ids",
                format!("batch of {size} identities from a universe with {}", universe.num_ids()),
            ));
        }
        let ids: Vec<u32> = index::sample(rng, universe.num_ids(), size).into_iter().map(|i| i as u32).collect();
        let dim = universe.input_dim();
        let mut gallery = Vec::with_capacity(size * dim);
        let mut probe = Vec::with_capacity(size * dim);
        for &id in &ids {
            gallery.extend(universe.draw_sample(id as usize, rng));
            probe.extend(universe.draw_sample(id as usize, rng));
        }
        Batch::new(ids, Matrix::new(size, dim, gallery)?, Matrix::new(size, dim, probe)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Iterations completed, counting this one.
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub queue_len: usize,
    pub agent_idx: Option<usize>,
    pub min_agent_dist: Option<f64>,
    pub mean_agent_dist: Option<f64>,
    pub lambda_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<StepMetrics>,
}

impl MetricLog {
    pub fn rows(&self) -> &[StepMetrics] {
        &self.rows
    }

    pub fn push(&mut self, row: StepMetrics) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        fn opt<T: fmt::Display>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from("iter,loss,lr,queue_len,agent_idx,min_agent_dist,mean_agent_dist,lambda_max\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.loss,
                r.lr,
                r.queue_len,
                opt(r.agent_idx),
                opt(r.min_agent_dist),
                opt(r.mean_agent_dist),
                opt(r.lambda_max)
            );
        }
        out
    }
}

/// Everything a finished run hands back. Only the probe network is kept.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub probe: EmbeddingNet,
    pub log: MetricLog,
    pub curvature: Option<CurvatureTrace>,
}

/// Loss and probe-parameter gradient of the semi-siamese objective. The
/// prototypes are plain values, so nothing flows back into the gallery side.
pub fn semi_siamese_objective(
    net: &EmbeddingNet,
    params: &[f64],
    probe_inputs: &Matrix,
    protos: &PrototypeSet,
    loss: &LossConfig,
    penalty: Option<(NetPenalty, &[f64])>,
) -> Result<(f64, Vec<f64>)> {
    let tape = net.forward_tape_with_params(params, probe_inputs)?;
    let labels: Vec<usize> = (0..probe_inputs.rows()).collect();
    let out = losses::prototype_loss(tape.output(), protos, loss, &labels)?;
    let mut grad = net.backward_tape_with_params(params, &tape, &out.grad_features)?;
    let mut value = out.loss;
    if let Some((pen, agent)) = penalty {
        let dist = diffcore::distance(params, agent);
        value += losses::network_distance_penalty(dist, pen.eps_prime, pen.weight);
        let slope = losses::network_distance_penalty_slope(dist, pen.eps_prime, pen.weight);
        if slope > 0.0 && dist > 0.0 {
            for ((g, p), a) in grad.iter_mut().zip(params).zip(agent) {
                *g += slope * (p - a) / dist;
            }
        }
    }
    Ok((value, grad))
}

/// Row-normalized copy of a raw prototype matrix.
pub fn normalize_rows(w: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for (r, row) in w.iter_rows().enumerate() {
        out.row_mut(r).copy_from_slice(&diffcore::l2_normalize(row)?);
    }
    Ok(out)
}

/// Loss of conventional training plus gradients for the network parameters
/// and the raw (unnormalized) prototype matrix.
pub fn convt_objective(
    net: &EmbeddingNet,
    params: &[f64],
    prototypes: &Matrix,
    inputs: &Matrix,
    ids: &[u32],
    loss: &LossConfig,
    proto_reg: Option<ProtoReg>,
) -> Result<(f64, Vec<f64>, Matrix)> {
    let normalized = normalize_rows(prototypes)?;
    let all_ids: Vec<u32> = (0..prototypes.rows() as u32).collect();
    let protos = PrototypeSet::positives_only(normalized, all_ids)?;
    let labels: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
    let tape = net.forward_tape_with_params(params, inputs)?;
    let out = losses::prototype_loss(tape.output(), &protos, loss, &labels)?;
    let grad_params = net.backward_tape_with_params(params, &tape, &out.grad_features)?;
    let mut grad_w = Matrix::zeros(prototypes.rows(), prototypes.cols());
    for r in 0..prototypes.rows() {
        let g = out.grad_positives.row(r);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        grad_w.row_mut(r).copy_from_slice(&diffcore::l2_normalize_backward(prototypes.row(r), g)?);
    }
    let mut value = out.loss;
    if let Some(reg) = proto_reg {
        let b = labels.len() as f64;
        for &y in &labels {
            let (v, g) = losses::prototype_norm_reg(prototypes.row(y), reg.alpha, reg.beta)?;
            value += v / b;
            diffcore::axpy(1.0 / b, &g, grad_w.row_mut(y));
        }
    }
    Ok((value, grad_params, grad_w))
}

fn sgd_step(params: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Mutable training state. Drive it with [`Trainer::step`] or [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainerConfig,
    dataset: &'a SampledDataset,
    probe: EmbeddingNet,
    agents: Option<AgentStack>,
    queue: GalleryQueue,
    prototypes: Option<Matrix>,
    velocity: Vec<f64>,
    proto_velocity: Vec<f64>,
    iter: usize,
    batch_rng: LabRng,
    curvature_batch: Option<Batch>,
    trace: Option<CurvatureTrace>,
    log: MetricLog,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainerConfig, dataset: &'a SampledDataset) -> Result<Self> {
        config.validate()?;
        if dataset.num_ids() < config.batch_ids {
            return Err(invalid(
                "train.batch_ids",
                format!("batch of {} identities exceeds the {} in the dataset", config.batch_ids, dataset.num_ids()),
            ));
        }
        let sizes = config.model.layer_sizes(dataset.input_dim());
        let probe = EmbeddingNet::init(&sizes, config.model.activation, config.seed)?;
        let agents = match config.mode {
            Mode::Convt => None,
            _ => Some(AgentStack::new(&probe, config.agents, config.agent_momentum, config.mix)?),
        };
        let prototypes = match config.mode {
            Mode::Convt => Some(init_prototypes(dataset.num_ids(), config.model.emb_dim, config.seed)?),
            _ => None,
        };
        let proto_velocity = prototypes.as_ref().map_or(Vec::new(), |w| vec![0.0; w.data().len()]);
        let curvature_batch = match config.curvature_every {
            Some(_) => Some(Batch::draw(dataset, config.batch_ids, &mut rngs::stream(config.seed, Stream::Curvature))?),
            None => None,
        };
        Ok(Trainer {
            queue: GalleryQueue::new(config.queue_capacity, config.model.emb_dim),
            velocity: vec![0.0; probe.param_count()],
            batch_rng: rngs::stream(config.seed, Stream::Batch),
            trace: config.curvature_every.map(|_| CurvatureTrace::new()),
            config,
            dataset,
            probe,
            agents,
            prototypes,
            proto_velocity,
            iter: 0,
            curvature_batch,
            log: MetricLog::default(),
        })
    }

    /// Replaces the batch on which curvature is probed. By default it is drawn
    /// from the training data.
    pub fn with_curvature_batch(mut self, batch: Batch) -> Result<Self> {
        if batch.probe.cols() != self.probe.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("inputs of dim {}", self.probe.input_dim()),
                found: format!("dim {}", batch.probe.cols()),
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.dataset.num_ids()) {
            return Err(Error::UnknownId(id));
        }
        self.curvature_batch = Some(batch);
        Ok(self)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn probe(&self) -> &EmbeddingNet {
        &self.probe
    }

    pub fn agents(&self) -> Option<&AgentStack> {
        self.agents.as_ref()
    }

    pub fn queue(&self) -> &GalleryQueue {
        &self.queue
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    pub fn curvature(&self) -> Option<&CurvatureTrace> {
        self.trace.as_ref()
    }

    /// Raw learnable prototypes (convt only).
    pub fn prototypes(&self) -> Option<&Matrix> {
        self.prototypes.as_ref()
    }

    /// Unit-norm prototype rows as used in the logits (convt only).
    pub fn prototype_matrix(&self) -> Option<Matrix> {
        self.prototypes.as_ref().map(|w| normalize_rows(w).expect("prototype rows stay nonzero"))
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        Batch::draw(self.dataset, self.config.batch_ids, &mut self.batch_rng)
    }

    /// One full iteration on `batch`, including the scheduled curvature probe.
    pub fn step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        if batch.gallery.cols() != self.probe.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("inputs of dim {}", self.probe.input_dim()),
                found: format!("dim {}", batch.gallery.cols()),
            });
        }
        let lr = self.config.lr.lr_at(self.iter, self.config.iterations);
        let (loss, agent_idx) = match self.config.mode {
            Mode::Convt => (self.convt_step(batch, lr)?, None),
            Mode::Sst | Mode::Masst => {
                let (loss, idx) = self.semi_siamese_step(batch, lr)?;
                (loss, Some(idx))
            }
        };
        self.iter += 1;
        let lambda_max = match self.config.curvature_every {
            Some(k) if self.iter.is_multiple_of(k) => Some(self.probe_curvature(agent_idx)?),
            _ => None,
        };
        let stack = self.agents.as_ref();
        let row = StepMetrics {
            iter: self.iter,
            loss,
            lr,
            queue_len: self.queue.len(),
            agent_idx,
            min_agent_dist: stack.and_then(AgentStack::min_distance),
            mean_agent_dist: stack.and_then(AgentStack::mean_distance),
            lambda_max,
        };
        self.log.push(row);
        Ok(row)
    }

    fn semi_siamese_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, usize)> {
        let stack = self.agents.as_mut().expect("semi-siamese modes own an agent stack");
        let idx = stack.rotate();
        let gallery = stack.agent(idx).forward(&batch.gallery)?;
        let (neg, neg_ids) = self.queue.negatives_for(&batch.ids);
        let protos = PrototypeSet::new(gallery.clone(), batch.ids.clone(), neg, neg_ids)?;
        let penalty = self.config.net_penalty.map(|p| (p, stack.agent(idx).params()));
        let theta = self.probe.params();
        let (loss, grad) =
            semi_siamese_objective(&self.probe, theta, &batch.probe, &protos, &self.config.loss, penalty)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: "training gradient" });
        }
        let mut next = self.probe.params_vector();
        sgd_step(&mut next, &grad, &mut self.velocity, lr, self.config.sgd_momentum, self.config.weight_decay);
        self.probe.set_params(next);
        stack.update(idx, &self.probe)?;
        self.queue.push(&gallery, &batch.ids)?;
        Ok((loss, idx))
    }

    fn convt_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let w = self.prototypes.as_mut().expect("convt mode owns a prototype matrix");
        let (loss, grad, grad_w) = convt_objective(
            &self.probe,
            self.probe.params(),
            w,
            &batch.probe,
            &batch.ids,
            &self.config.loss,
            self.config.proto_reg,
        )?;
        if !loss.is_finite() || grad.iter().chain(grad_w.data()).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: "training gradient" });
        }
        let (mu, wd) = (self.config.sgd_momentum, self.config.weight_decay);
        let mut next = self.probe.params_vector();
        sgd_step(&mut next, &grad, &mut self.velocity, lr, mu, wd);
        self.probe.set_params(next);
        sgd_step(w.data_mut(), grad_w.data(), &mut self.proto_velocity, lr, mu, wd);
        Ok(loss)
    }

    /// Gradient closure of the classification loss on the fixed curvature
    /// batch with the current prototypes frozen.
    fn frozen_gradient(&self, agent_idx: Option<usize>) -> Result<impl FnMut(&[f64]) -> Result<Vec<f64>> + '_> {
        let batch = self.curvature_batch.as_ref().expect("curvature batch exists when probing is enabled");
        let net = &self.probe;
        let loss = self.config.loss;
        let (protos, labels): (PrototypeSet, Vec<usize>) = match (&self.prototypes, &self.agents, agent_idx) {
            (Some(w), _, _) => (
                PrototypeSet::positives_only(normalize_rows(w)?, (0..w.rows() as u32).collect())?,
                batch.ids.iter().map(|&id| id as usize).collect(),
            ),
            (None, Some(stack), Some(idx)) => {
                let gallery = stack.agent(idx).forward(&batch.gallery)?;
                let (neg, neg_ids) = self.queue.negatives_for(&batch.ids);
                (PrototypeSet::new(gallery, batch.ids.clone(), neg, neg_ids)?, (0..batch.len()).collect())
            }
            _ => return Err(invalid("curvature", "no prototypes available")),
        };
        Ok(move |theta: &[f64]| {
            let tape = net.forward_tape_with_params(theta, &batch.probe)?;
            let out = losses::prototype_loss(tape.output(), &protos, &loss, &labels)?;
            net.backward_tape_with_params(theta, &tape, &out.grad_features)
        })
    }

    fn probe_curvature(&mut self, agent_idx: Option<usize>) -> Result<f64> {
        let cfg = self.config.power_config();
        let theta = self.probe.params_vector();
        let mut trace = self.trace.take().expect("trace exists when probing is enabled");
        let result =
            self.frozen_gradient(agent_idx).and_then(|mut grad| trace.probe(self.iter, &mut grad, &theta, &cfg));
        self.trace = Some(trace);
        Ok(result?.lambda_max)
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while self.iter < self.config.iterations {
            let batch = self.next_batch()?;
            self.step(&batch)?;
        }
        Ok(())
    }

    /// Drops agents, queue and prototypes; only the probe survives.
    pub fn finish(self) -> TrainOutcome {
        TrainOutcome { probe: self.probe, log: self.log, curvature: self.trace }
    }
}

fn init_prototypes(num_ids: usize, dim: usize, seed: u64) -> Result<Matrix> {
    let mut rng = rngs::stream(seed, Stream::Prototypes);
    let mut w = Matrix::zeros(num_ids, dim);
    for r in 0..num_ids {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        w.row_mut(r).copy_from_slice(&diffcore::l2_normalize(&raw)?);
    }
    Ok(w)
}

/// Full training run.
pub fn train(config: &TrainerConfig, dataset: &SampledDataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// Feeds one recorded probe trajectory through a fresh agent stack and returns
/// the mean pairwise agent distance after every update.
pub fn replay_dispersion(
    init: &EmbeddingNet,
    trajectory: &[Vec<f64>],
    agents: usize,
    momentum: f64,
    mix: f64,
) -> Result<Vec<f64>> {
    let mut stack = AgentStack::new(init, agents, momentum, mix)?;
    let mut out = Vec::with_capacity(trajectory.len());
    for theta in trajectory {
        let idx = stack.rotate();
        stack.update_from_params(idx, theta)?;
        out.push(stack.mean_distance().unwrap_or(0.0));
    }
    Ok(out)
}
