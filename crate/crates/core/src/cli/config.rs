//! Flat `key = value` experiment configuration.
//!
//! Keys carry a section prefix (`train.mode`, `loss.kind`, `data.path`).
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, and every value is validated before any compute starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::diffcore::Activation;
use crate::error::{invalid, Error, Result};
use crate::evalsuite::DEFAULT_FARS;
use crate::losses::{LossConfig, LossKind};
use crate::synthdata::{Regime, UniverseParams};
use crate::trainer::{Mode, ModelConfig, NetPenalty, ProtoReg, TrainerConfig};

pub const KEYS: &[&str] = &[
    "seed",
    "data.path",
    "data.ids",
    "data.dim",
    "data.regime",
    "data.seed",
    "data.noise_scale",
    "data.variations",
    "data.variation_strength",
    "train.mode",
    "train.iterations",
    "train.batch_ids",
    "train.lr",
    "train.lr_milestones",
    "train.lr_factor",
    "train.momentum",
    "train.agents",
    "train.mix",
    "train.queue",
    "train.sgd_momentum",
    "train.weight_decay",
    "loss.kind",
    "loss.margin",
    "loss.scale",
    "model.hidden",
    "model.emb_dim",
    "model.activation",
    "ablation.proto_reg_alpha",
    "ablation.proto_reg_beta",
    "ablation.net_penalty_eps",
    "ablation.net_penalty_weight",
    "curvature.every",
    "curvature.thr",
    "curvature.max",
    "eval.ids",
    "eval.samples_per_id",
    "eval.seed",
    "eval.fars",
    "output.dir",
];

const DEFAULT_DATA_IDS: usize = 500;
const DEFAULT_EVAL_IDS: usize = 300;
const DEFAULT_EVAL_SAMPLES: usize = 4;
/// Offset between the training and evaluation universe seeds.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Generate { ids: usize, dim: usize, regime: Regime, seed: u64, params: UniverseParams },
}

/// Held-out identities embedded after training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub ids: usize,
    pub samples_per_id: usize,
    pub seed: u64,
    pub fars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    pub data: DataSource,
    pub eval: Option<EvalSpec>,
    pub output_dir: Option<PathBuf>,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(key, format!("cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits text into a key→value map, rejecting malformed lines, unknown keys
/// and duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { line: n + 1, column: 1, message: "expected key = value".into() });
        };
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(invalid(key, "unknown configuration key"));
        }
        if map.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(invalid(key, "key given more than once"));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_pairs(text)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        let seed: u64 = get("seed").map_or(Ok(0), |v| parse_num("seed", v))?;

        let mode: Mode = get("train.mode").unwrap_or("masst").parse()?;
        let mut t = TrainerConfig::new(mode);
        t.seed = seed;
        if let Some(v) = get("train.iterations") {
            t.iterations = parse_num("train.iterations", v)?;
        }
        if let Some(v) = get("train.batch_ids") {
            t.batch_ids = parse_num("train.batch_ids", v)?;
        }
        if let Some(v) = get("train.lr") {
            t.lr.initial = parse_num("train.lr", v)?;
        }
        if let Some(v) = get("train.lr_milestones") {
            t.lr.milestones = parse_list("train.lr_milestones", v)?;
        }
        if let Some(v) = get("train.lr_factor") {
            t.lr.factor = parse_num("train.lr_factor", v)?;
        }
        if let Some(v) = get("train.momentum") {
            t.agent_momentum = parse_num("train.momentum", v)?;
        }
        if let Some(v) = get("train.agents") {
            t.agents = parse_num("train.agents", v)?;
        }
        if let Some(v) = get("train.mix") {
            t.mix = parse_num("train.mix", v)?;
        }
        if let Some(v) = get("train.queue") {
            t.queue_capacity = parse_num("train.queue", v)?;
        }
        if let Some(v) = get("train.sgd_momentum") {
            t.sgd_momentum = parse_num("train.sgd_momentum", v)?;
        }
        if let Some(v) = get("train.weight_decay") {
            t.weight_decay = parse_num("train.weight_decay", v)?;
        }

        let margin = get("loss.margin").map(|v| parse_num::<f64>("loss.margin", v)).transpose()?;
        let kind = LossKind::parse(get("loss.kind").unwrap_or("softmax"), margin)?;
        let scale = get("loss.scale").map_or(Ok(t.loss.scale), |v| parse_num("loss.scale", v))?;
        t.loss = LossConfig::new(kind, scale)?;

        let mut model = ModelConfig::default();
        if let Some(v) = get("model.hidden") {
            model.hidden = parse_list("model.hidden", v)?;
        }
        if let Some(v) = get("model.emb_dim") {
            model.emb_dim = parse_num("model.emb_dim", v)?;
        }
        if let Some(v) = get("model.activation") {
            model.activation =
                Activation::parse(v).ok_or_else(|| invalid("model.activation", format!("unknown activation '{v}'")))?;
        }
        t.model = model;

        t.proto_reg = match (get("ablation.proto_reg_alpha"), get("ablation.proto_reg_beta")) {
            (None, None) => None,
            (Some(a), Some(b)) => Some(ProtoReg {
                alpha: parse_num("ablation.proto_reg_alpha", a)?,
                beta: parse_num("ablation.proto_reg_beta", b)?,
            }),
            _ => return Err(invalid("ablation.proto_reg_alpha", "alpha and beta must be given together")),
        };
        t.net_penalty = match (get("ablation.net_penalty_eps"), get("ablation.net_penalty_weight")) {
            (None, None) => None,
            (Some(e), Some(w)) => Some(NetPenalty {
                eps_prime: parse_num("ablation.net_penalty_eps", e)?,
                weight: parse_num("ablation.net_penalty_weight", w)?,
            }),
            _ => return Err(invalid("ablation.net_penalty_eps", "eps and weight must be given together")),
        };

        if let Some(v) = get("curvature.every") {
            t.curvature_every = Some(parse_num("curvature.every", v)?);
        }
        if let Some(v) = get("curvature.thr") {
            t.power_thr = parse_num("curvature.thr", v)?;
        }
        if let Some(v) = get("curvature.max") {
            t.power_max_iters = parse_num("curvature.max", v)?;
        }
        t.validate()?;

        let generation_keys = [
            "data.ids",
            "data.dim",
            "data.regime",
            "data.seed",
            "data.noise_scale",
            "data.variations",
            "data.variation_strength",
        ];
        let data = match get("data.path") {
            Some(p) => {
                if let Some(k) = generation_keys.iter().find(|k| map.contains_key(**k)) {
                    return Err(invalid(k, "cannot be combined with data.path"));
                }
                DataSource::File(PathBuf::from(p))
            }
            None => {
                let mut params = UniverseParams::default();
                if let Some(v) = get("data.noise_scale") {
                    params.noise_scale = parse_num("data.noise_scale", v)?;
                }
                if let Some(v) = get("data.variations") {
                    params.num_variations = parse_num("data.variations", v)?;
                }
                if let Some(v) = get("data.variation_strength") {
                    params.variation_strength = parse_num("data.variation_strength", v)?;
                }
                let ids = get("data.ids").map_or(Ok(DEFAULT_DATA_IDS), |v| parse_num("data.ids", v))?;
                let dim =
                    get("data.dim").map_or(Ok(crate::trainer::DEFAULT_INPUT_DIM), |v| parse_num("data.dim", v))?;
                if ids < 2 || dim < 2 {
                    return Err(invalid("data.ids", "need at least 2 identities and input_dim >= 2"));
                }
                let regime: Regime = match get("data.regime") {
                    Some(v) => v.parse().map_err(|e: Error| invalid("data.regime", e.to_string()))?,
                    None => Regime::Shallow,
                };
                let seed = get("data.seed").map_or(Ok(seed), |v| parse_num("data.seed", v))?;
                DataSource::Generate { ids, dim, regime, seed, params }
            }
        };

        let eval_keys = ["eval.ids", "eval.samples_per_id", "eval.seed", "eval.fars"];
        let eval = if eval_keys.iter().any(|k| map.contains_key(*k)) {
            let ids = get("eval.ids").map_or(Ok(DEFAULT_EVAL_IDS), |v| parse_num("eval.ids", v))?;
            let samples_per_id =
                get("eval.samples_per_id").map_or(Ok(DEFAULT_EVAL_SAMPLES), |v| parse_num("eval.samples_per_id", v))?;
            let seed =
                get("eval.seed").map_or(Ok(seed.wrapping_add(EVAL_SEED_OFFSET)), |v| parse_num("eval.seed", v))?;
            let fars = get("eval.fars").map_or(Ok(DEFAULT_FARS.to_vec()), |v| parse_list("eval.fars", v))?;
            if ids < 2 || samples_per_id < 2 {
                return Err(invalid("eval.ids", "need at least 2 identities with at least 2 samples each"));
            }
            if fars.is_empty() || fars.iter().any(|f| !(0.0..=1.0).contains(f)) {
                return Err(invalid("eval.fars", "need one or more FAR values in [0, 1]"));
            }
            Some(EvalSpec { ids, samples_per_id, seed, fars })
        } else {
            None
        };

        Ok(ExperimentConfig { trainer: t, data, eval, output_dir: get("output.dir").map(PathBuf::from) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form with every key resolved; parsing it yields `self`.
    pub fn to_config_string(&self) -> String {
        let t = &self.trainer;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", t.seed.to_string());
        match &self.data {
            DataSource::File(p) => put("data.path", p.display().to_string()),
            DataSource::Generate { ids, dim, regime, seed, params } => {
                put("data.ids", ids.to_string());
                put("data.dim", dim.to_string());
                put("data.regime", regime.to_string());
                put("data.seed", seed.to_string());
                put("data.noise_scale", params.noise_scale.to_string());
                put("data.variations", params.num_variations.to_string());
                put("data.variation_strength", params.variation_strength.to_string());
            }
        }
        put("train.mode", t.mode.to_string());
        put("train.iterations", t.iterations.to_string());
        put("train.batch_ids", t.batch_ids.to_string());
        put("train.lr", t.lr.initial.to_string());
        put("train.lr_milestones", join(&t.lr.milestones));
        put("train.lr_factor", t.lr.factor.to_string());
        put("train.momentum", t.agent_momentum.to_string());
        put("train.agents", t.agents.to_string());
        put("train.mix", t.mix.to_string());
        put("train.queue", t.queue_capacity.to_string());
        put("train.sgd_momentum", t.sgd_momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("loss.kind", t.loss.kind.name().to_string());
        if !matches!(t.loss.kind, LossKind::Softmax) {
            put("loss.margin", t.loss.kind.margin_value().to_string());
        }
        put("loss.scale", t.loss.scale.to_string());
        put("model.hidden", join(&t.model.hidden));
        put("model.emb_dim", t.model.emb_dim.to_string());
        put("model.activation", t.model.activation.name().to_string());
        if let Some(r) = t.proto_reg {
            put("ablation.proto_reg_alpha", r.alpha.to_string());
            put("ablation.proto_reg_beta", r.beta.to_string());
        }
        if let Some(p) = t.net_penalty {
            put("ablation.net_penalty_eps", p.eps_prime.to_string());
            put("ablation.net_penalty_weight", p.weight.to_string());
        }
        if let Some(k) = t.curvature_every {
            put("curvature.every", k.to_string());
        }
        put("curvature.thr", t.power_thr.to_string());
        put("curvature.max", t.power_max_iters.to_string());
        if let Some(e) = &self.eval {
            put("eval.ids", e.ids.to_string());
            put("eval.samples_per_id", e.samples_per_id.to_string());
            put("eval.seed", e.seed.to_string());
            put("eval.fars", join(&e.fars));
        }
        if let Some(d) = &self.output_dir {
            put("output.dir", d.display().to_string());
        }
        out
    }
}

/// Regime used when evaluation data is generated: a fixed number of samples
/// for every identity.
pub fn eval_regime(spec: &EvalSpec) -> Regime {
    if spec.samples_per_id == 2 {
        Regime::Shallow
    } else {
        Regime::Deep(spec.samples_per_id)
    }
}
