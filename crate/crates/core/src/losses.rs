//! Normalized-prototype classification losses with analytic gradients.
//!
//! Logit `(i, j)` is `s * ψ(cos θ_ij)`, where `ψ` is the margin transform on
//! the label column of row `i` and the identity elsewhere. Prototypes are
//! either learnable class weights (conventional training) or gallery
//! features (semi-siamese training); this module does not care which.

use crate::diffcore::{self, Matrix};
use crate::error::{invalid, Error, Result};

/// Cosines are clamped to `[-COS_CLAMP, COS_CLAMP]` before angle transforms.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;
const UNIT_TOL: f64 = 1e-6;

pub const DEFAULT_SCALE: f64 = 30.0;
pub const DEFAULT_AM_MARGIN: f64 = 0.35;
pub const DEFAULT_ARC_MARGIN: f64 = 0.5;
pub const DEFAULT_ANGLE_MULTIPLIER: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Softmax,
    /// Multiplicative angular margin `cos(m·θ)` with the monotonic extension.
    ASoftmax {
        m: u32,
    },
    /// Additive cosine margin `cos θ − m`.
    AmSoftmax {
        margin: f64,
    },
    /// Additive angular margin `cos(θ + m)`.
    ArcSoftmax {
        margin: f64,
    },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::ASoftmax { .. } => "a-softmax",
            LossKind::AmSoftmax { .. } => "am-softmax",
            LossKind::ArcSoftmax { .. } => "arc-softmax",
        }
    }

    /// Parses a kind name, using `margin` when given or the kind's default.
    pub fn parse(name: &str, margin: Option<f64>) -> Result<Self> {
        let kind = match name {
            "softmax" => LossKind::Softmax,
            "a-softmax" => {
                let m = margin.unwrap_or(DEFAULT_ANGLE_MULTIPLIER as f64);
                if m.fract() != 0.0 || m < 1.0 {
                    return Err(invalid("loss.margin", "a-softmax needs an integer multiplier >= 1"));
                }
                LossKind::ASoftmax { m: m as u32 }
            }
            "am-softmax" => LossKind::AmSoftmax { margin: margin.unwrap_or(DEFAULT_AM_MARGIN) },
            "arc-softmax" => LossKind::ArcSoftmax { margin: margin.unwrap_or(DEFAULT_ARC_MARGIN) },
            other => return Err(invalid("loss.kind", format!("unknown loss kind `{other}`"))),
        };
        Ok(kind)
    }

    pub fn margin_value(&self) -> f64 {
        match *self {
            LossKind::Softmax => 0.0,
            LossKind::ASoftmax { m } => m as f64,
            LossKind::AmSoftmax { margin } | LossKind::ArcSoftmax { margin } => margin,
        }
    }

    /// `(ψ(c), dψ/dc)` for the positive column.
    pub fn transform(&self, cos: f64) -> (f64, f64) {
        match *self {
            LossKind::Softmax => (cos, 1.0),
            LossKind::AmSoftmax { margin } => (cos - margin, 1.0),
            LossKind::ArcSoftmax { margin } => {
                let (c, dclamp) = clamp_cos(cos);
                let theta = c.acos();
                if theta + margin <= std::f64::consts::PI {
                    let sin_theta = (1.0 - c * c).sqrt();
                    ((theta + margin).cos(), dclamp * (theta + margin).sin() / sin_theta)
                } else {
                    // Past π the angle margin would start rewarding larger angles;
                    // fall back to a linear cosine penalty that stays monotone.
                    (c - margin * margin.sin(), dclamp)
                }
            }
            LossKind::ASoftmax { m } => {
                let (c, dclamp) = clamp_cos(cos);
                let theta = c.acos();
                let mf = m as f64;
                let k = ((mf * theta) / std::f64::consts::PI).floor().min(mf - 1.0);
                let sign = if (k as i64) % 2 == 0 { 1.0 } else { -1.0 };
                let psi = sign * (mf * theta).cos() - 2.0 * k;
                let sin_theta = (1.0 - c * c).sqrt();
                let dpsi = dclamp * sign * mf * (mf * theta).sin() / sin_theta;
                (psi, dpsi)
            }
        }
    }
}

fn clamp_cos(cos: f64) -> (f64, f64) {
    if cos > COS_CLAMP {
        (COS_CLAMP, 0.0)
    } else if cos < -COS_CLAMP {
        (-COS_CLAMP, 0.0)
    } else {
        (cos, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub scale: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind, scale: f64) -> Result<Self> {
        let cfg = LossConfig { kind, scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid("loss.scale", "scale must be positive"));
        }
        match self.kind {
            LossKind::AmSoftmax { margin } if !(0.0..1.0).contains(&margin) => {
                Err(invalid("loss.margin", "cosine margin must lie in [0, 1)"))
            }
            LossKind::ArcSoftmax { margin } if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) => {
                Err(invalid("loss.margin", "angle margin must lie in [0, π/2)"))
            }
            LossKind::ASoftmax { m } if m < 1 => Err(invalid("loss.margin", "angle multiplier must be >= 1")),
            _ => Ok(()),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Softmax, scale: DEFAULT_SCALE }
    }
}

/// Unit-norm prototypes: one positive per batch identity, then queue negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    positives: Matrix,
    positive_ids: Vec<u32>,
    negatives: Matrix,
    negative_ids: Vec<u32>,
}

impl PrototypeSet {
    pub fn new(positives: Matrix, positive_ids: Vec<u32>, negatives: Matrix, negative_ids: Vec<u32>) -> Result<Self> {
        if positives.rows() != positive_ids.len() || negatives.rows() != negative_ids.len() {
            return Err(Error::ShapeMismatch {
                expected: "one id tag per prototype".into(),
                found: format!(
                    "{}/{} positives, {}/{} negatives",
                    positives.rows(),
                    positive_ids.len(),
                    negatives.rows(),
                    negative_ids.len()
                ),
            });
        }
        if negatives.rows() > 0 && positives.rows() > 0 && negatives.cols() != positives.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", positives.cols()),
                found: format!("{} columns", negatives.cols()),
            });
        }
        let mut seen = positive_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("prototypes", "positive id tags must be distinct"));
        }
        for row in positives.iter_rows().chain(negatives.iter_rows()) {
            check_unit(row)?;
        }
        Ok(PrototypeSet { positives, positive_ids, negatives, negative_ids })
    }

    pub fn positives_only(positives: Matrix, positive_ids: Vec<u32>) -> Result<Self> {
        let cols = positives.cols();
        Self::new(positives, positive_ids, Matrix::zeros(0, cols), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.positives.rows() + self.negatives.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_positives(&self) -> usize {
        self.positives.rows()
    }

    pub fn positives(&self) -> &Matrix {
        &self.positives
    }

    pub fn negatives(&self) -> &Matrix {
        &self.negatives
    }

    pub fn positive_ids(&self) -> &[u32] {
        &self.positive_ids
    }

    pub fn negative_ids(&self) -> &[u32] {
        &self.negative_ids
    }

    /// Column `j` of the logit table: positives first, then negatives.
    pub fn column(&self, j: usize) -> &[f64] {
        let p = self.positives.rows();
        if j < p {
            self.positives.row(j)
        } else {
            self.negatives.row(j - p)
        }
    }

    pub fn dim(&self) -> usize {
        if self.positives.rows() > 0 {
            self.positives.cols()
        } else {
            self.negatives.cols()
        }
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = diffcore::norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit { norm: n });
    }
    Ok(())
}

fn check_inputs(features: &Matrix, protos: &PrototypeSet, labels: &[usize]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", features.rows()),
            found: format!("{} labels", labels.len()),
        });
    }
    if protos.is_empty() {
        return Err(invalid("prototypes", "empty prototype set"));
    }
    if features.cols() != protos.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("features of dim {}", protos.dim()),
            found: format!("dim {}", features.cols()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= protos.len()) {
        return Err(invalid("labels", format!("label column {bad} out of range {}", protos.len())));
    }
    for row in features.iter_rows() {
        check_unit(row)?;
    }
    Ok(())
}

/// Logits and `d logit / d cos` for every entry.
fn logit_table(features: &Matrix, protos: &PrototypeSet, cfg: &LossConfig, labels: &[usize]) -> (Matrix, Matrix) {
    let n = protos.len();
    let mut logits = Matrix::zeros(features.rows(), n);
    let mut slopes = Matrix::zeros(features.rows(), n);
    for (i, x) in features.iter_rows().enumerate() {
        for j in 0..n {
            let c = diffcore::dot(x, protos.column(j));
            let (psi, dpsi) = if j == labels[i] { cfg.kind.transform(c) } else { (c, 1.0) };
            logits.set(i, j, cfg.scale * psi);
            slopes.set(i, j, cfg.scale * dpsi);
        }
    }
    (logits, slopes)
}

pub fn logits(features: &Matrix, protos: &PrototypeSet, cfg: &LossConfig, labels: &[usize]) -> Result<Matrix> {
    cfg.validate()?;
    check_inputs(features, protos, labels)?;
    Ok(logit_table(features, protos, cfg, labels).0)
}

/// Batch-mean softmax cross-entropy over a logit table.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probs: Matrix,
    /// `dL/dlogits`, already divided by the batch size.
    pub grad_logits: Matrix,
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    if !logits.is_finite() {
        return Err(Error::NonFinite { context: "cross_entropy logits" });
    }
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", logits.rows()),
            found: format!("{} labels", labels.len()),
        });
    }
    let b = logits.rows().max(1) as f64;
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, row) in logits.iter_rows().enumerate() {
        let y = labels[i];
        if y >= row.len() {
            return Err(invalid("labels", format!("label {y} out of range {}", row.len())));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, z) in row.iter().enumerate() {
            let p = (z - log_z).exp();
            probs.set(i, j, p);
            let target = if j == y { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) / b);
        }
    }
    Ok(CrossEntropy { loss: loss / b, probs, grad_logits: grad })
}

/// Loss plus gradients with respect to features and every prototype column.
///
/// Prototype gradients are always returned; semi-siamese training discards
/// them because gallery features are computed without gradient tracking.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub logits: Matrix,
    pub probs: Matrix,
    pub grad_features: Matrix,
    pub grad_positives: Matrix,
    pub grad_negatives: Matrix,
}

pub fn prototype_loss(
    features: &Matrix,
    protos: &PrototypeSet,
    cfg: &LossConfig,
    labels: &[usize],
) -> Result<LossOutput> {
    cfg.validate()?;
    check_inputs(features, protos, labels)?;
    let (logits, slopes) = logit_table(features, protos, cfg, labels);
    let ce = cross_entropy(&logits, labels)?;
    let d = features.cols();
    let p = protos.num_positives();
    let mut grad_features = Matrix::zeros(features.rows(), d);
    let mut grad_positives = Matrix::zeros(p, d);
    let mut grad_negatives = Matrix::zeros(protos.len() - p, d);
    for (i, x) in features.iter_rows().enumerate() {
        for j in 0..protos.len() {
            let g = ce.grad_logits.get(i, j) * slopes.get(i, j);
            if g == 0.0 {
                continue;
            }
            diffcore::axpy(g, protos.column(j), grad_features.row_mut(i));
            let target = if j < p { grad_positives.row_mut(j) } else { grad_negatives.row_mut(j - p) };
            diffcore::axpy(g, x, target);
        }
    }
    Ok(LossOutput { loss: ce.loss, logits, probs: ce.probs, grad_features, grad_positives, grad_negatives })
}

/// Prototype-norm regularizer `β(α − ||w||)` and its gradient `−β·w/||w||`.
pub fn prototype_norm_reg(w: &[f64], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    if beta < 0.0 {
        return Err(invalid("ablation.proto_reg_beta", "beta must be >= 0"));
    }
    let n = diffcore::norm(w);
    if n <= diffcore::NORM_FLOOR {
        return Err(Error::NormTooSmall { norm: n });
    }
    let value = beta * (alpha - n);
    let grad = w.iter().map(|x| -beta * x / n).collect();
    Ok((value, grad))
}

/// Hinge penalty `weight · max(0, dist − eps_prime)`.
pub fn network_distance_penalty(dist: f64, eps_prime: f64, weight: f64) -> f64 {
    weight * (dist - eps_prime).max(0.0)
}

/// Derivative of [`network_distance_penalty`] with respect to `dist`.
pub fn network_distance_penalty_slope(dist: f64, eps_prime: f64, weight: f64) -> f64 {
    if dist > eps_prime {
        weight
    } else {
        0.0
    }
}
