//! The embedding network and its flat parameter view.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::diffcore::{self, Activation, LayerStack, Matrix, Tape};
use crate::error::{Error, Result};
use crate::rngs::{self, Stream};

const CHECKPOINT_MAGIC: &str = "masstlab-net";

/// Small feedforward network whose last layer L2-normalizes its output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    layer_sizes: Vec<usize>,
    activation: Activation,
    stack: LayerStack,
    params: Vec<f64>,
}

impl EmbeddingNet {
    /// Glorot-uniform weights, zero biases, deterministic per `seed`.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let stack = LayerStack::mlp(layer_sizes, activation)?;
        let mut rng = rngs::stream(seed, Stream::Init);
        let mut params = Vec::with_capacity(stack.param_count());
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        debug_assert_eq!(params.len(), stack.param_count());
        Ok(EmbeddingNet { layer_sizes: layer_sizes.to_vec(), activation, stack, params })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn emb_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layer sizes")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_vector(&self) -> Vec<f64> {
        self.params.clone()
    }

    /// Same architecture, new parameters.
    pub fn load_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.params.len()),
                found: format!("{} parameters", params.len()),
            });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "load_params" });
        }
        Ok(EmbeddingNet { params, ..self.clone() })
    }

    pub(crate) fn set_params(&mut self, params: Vec<f64>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn same_architecture(&self, other: &EmbeddingNet) -> bool {
        self.layer_sizes == other.layer_sizes && self.activation == other.activation
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.stack.forward(&self.params, batch)
    }

    pub fn forward_with_params(&self, params: &[f64], batch: &Matrix) -> Result<Matrix> {
        self.stack.forward(params, batch)
    }

    pub fn forward_tape(&self, batch: &Matrix) -> Result<Tape> {
        self.stack.forward_tape(&self.params, batch)
    }

    pub fn forward_tape_with_params(&self, params: &[f64], batch: &Matrix) -> Result<Tape> {
        self.stack.forward_tape(params, batch)
    }

    pub fn backward_tape(&self, tape: &Tape, upstream: &Matrix) -> Result<Vec<f64>> {
        self.stack.backward(&self.params, tape, upstream)
    }

    pub fn backward_tape_with_params(&self, params: &[f64], tape: &Tape, upstream: &Matrix) -> Result<Vec<f64>> {
        self.stack.backward(params, tape, upstream)
    }

    /// `d(sum(upstream ∘ forward(batch))) / dθ` in canonical parameter order.
    pub fn backward(&self, batch: &Matrix, upstream: &Matrix) -> Result<Vec<f64>> {
        let tape = self.forward_tape(batch)?;
        self.backward_tape(&tape, upstream)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        let mut out =
            format!("{CHECKPOINT_MAGIC} v1 {} {} {}\n", sizes.join(","), self.activation.name(), self.params.len());
        for p in &self.params {
            let _ = writeln!(out, "{p:.16e}");
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, 1, "empty checkpoint"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != CHECKPOINT_MAGIC || fields[1] != "v1" {
            return Err(parse_err(1, 1, "expected header `masstlab-net v1 <sizes> <activation> <q>`"));
        }
        let sizes = fields[2]
            .split(',')
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(1, header.find(fields[2]).unwrap_or(0) + 1, &format!("layer sizes: {e}")))?;
        let activation = Activation::parse(fields[3])
            .ok_or_else(|| parse_err(1, header.find(fields[3]).unwrap_or(0) + 1, "unknown activation"))?;
        let q: usize =
            fields[4].parse().map_err(|_| parse_err(1, header.find(fields[4]).unwrap_or(0) + 1, "parameter count"))?;
        let mut net = EmbeddingNet::init(&sizes, activation, 0)?;
        if net.param_count() != q {
            return Err(parse_err(
                1,
                1,
                &format!("header declares {q} parameters, architecture has {}", net.param_count()),
            ));
        }
        let mut params = Vec::with_capacity(q);
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| parse_err(idx + 1, 1, "not a float"))?;
            params.push(v);
        }
        if params.len() != q {
            return Err(parse_err(
                text.lines().count() + 1,
                1,
                &format!("expected {q} parameters, found {}", params.len()),
            ));
        }
        net.params = params;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

fn parse_err(line: usize, column: usize, message: &str) -> Error {
    Error::Parse { line, column, message: message.to_string() }
}

/// `||θ_A − θ_B||₂` between two nets of the same architecture.
pub fn net_distance(a: &EmbeddingNet, b: &EmbeddingNet) -> Result<f64> {
    if !a.same_architecture(b) {
        return Err(Error::ArchitectureMismatch { left: a.layer_sizes.clone(), right: b.layer_sizes.clone() });
    }
    Ok(diffcore::distance(&a.params, &b.params))
}

/// Elementwise mean of the parameter vectors of `nets`.
pub fn average(nets: &[&EmbeddingNet]) -> Result<EmbeddingNet> {
    let first = nets
        .first()
        .ok_or_else(|| Error::InvalidConfig { key: "average".into(), reason: "no networks to average".into() })?;
    let mut acc = vec![0.0; first.param_count()];
    for net in nets {
        if !net.same_architecture(first) {
            return Err(Error::ArchitectureMismatch {
                left: first.layer_sizes.clone(),
                right: net.layer_sizes.clone(),
            });
        }
        acc.iter_mut().zip(&net.params).for_each(|(a, p)| *a += p);
    }
    let k = nets.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    first.load_params(acc)
}
