//! Loss-landscape curvature diagnostics.
//!
//! Hessian-vector products are taken matrix-free as central differences of
//! the gradient along the probe direction, which keeps memory at `O(q)`.
//! [`power_iteration`] builds the principal eigenvalue estimate on top of
//! them, and [`CurvatureTrace`] collects those estimates over a training run.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{self, l2_normalize, Matrix};
use crate::embedmodel::EmbeddingNet;
use crate::error::{invalid, Error, Result};
use crate::rngs::{self, LabRng, Stream};

pub const DEFAULT_THR: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 50;
/// `||Hv||` below this counts as a collapsed direction.
pub const HV_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterConfig {
    /// Stop once successive eigenvalue estimates differ by less than this.
    pub thr: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl PowerIterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thr.is_nan() || self.thr <= 0.0 {
            return Err(invalid("curvature.thr", "threshold must be > 0"));
        }
        if self.max_iters < 1 {
            return Err(invalid("curvature.max", "iteration cap must be >= 1"));
        }
        Ok(())
    }
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig { thr: DEFAULT_THR, max_iters: DEFAULT_MAX_ITERS, seed: 0 }
    }
}

/// Finite-difference step used by [`hvp`].
pub fn hvp_step(theta: &[f64]) -> f64 {
    f64::EPSILON.sqrt() * (1.0 + diffcore::norm(theta))
}

/// `H(θ)·v` from two gradient evaluations at `θ ± ε·v/||v||`.
pub fn hvp<G>(grad: &mut G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if theta.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("direction of length {}", theta.len()),
            found: format!("length {}", v.len()),
        });
    }
    let v_norm = diffcore::norm(v);
    if v_norm <= diffcore::NORM_FLOOR {
        return Err(Error::NormTooSmall { norm: v_norm });
    }
    let eps = hvp_step(theta);
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * eps * d / v_norm).collect() };
    let g_plus = grad(&shifted(1.0))?;
    let g_minus = grad(&shifted(-1.0))?;
    if g_plus.len() != theta.len() || g_minus.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("gradient of length {}", theta.len()),
            found: format!("length {}", g_plus.len()),
        });
    }
    let out: Vec<f64> = g_plus.iter().zip(&g_minus).map(|(a, b)| (a - b) / (2.0 * eps) * v_norm).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: "hvp gradient evaluation" });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterResult {
    /// Magnitude of the principal eigenvalue estimate.
    pub lambda_max: f64,
    /// `vᵀHv` for the final unit direction; carries the sign.
    pub rayleigh: f64,
    pub iterations: usize,
}

fn random_direction(dim: usize, rng: &mut LabRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Matrix-free power method on the Hessian of the loss behind `grad`.
pub fn power_iteration<G>(grad: &mut G, theta: &[f64], cfg: &PowerIterConfig) -> Result<PowerIterResult>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if theta.is_empty() {
        return Err(invalid("power_iteration", "empty parameter vector"));
    }
    let mut rng = rngs::stream(cfg.seed, Stream::PowerV);
    let mut v = random_direction(theta.len(), &mut rng);
    let mut resampled = false;
    let mut prev: Option<f64> = None;
    let mut last = PowerIterResult { lambda_max: 0.0, rayleigh: 0.0, iterations: 0 };
    let mut k = 0;
    while k < cfg.max_iters {
        k += 1;
        let hv = hvp(grad, theta, &v)?;
        let hv_norm = diffcore::norm(&hv);
        if hv_norm < HV_FLOOR {
            if resampled {
                return Err(Error::DegeneratePowerIteration);
            }
            resampled = true;
            v = random_direction(theta.len(), &mut rng);
            prev = None;
            continue;
        }
        let rayleigh = diffcore::dot(&v, &hv);
        let lambda = if rayleigh < 0.0 { -hv_norm } else { hv_norm };
        v = hv.iter().map(|x| x / hv_norm).collect();
        last = PowerIterResult { lambda_max: hv_norm, rayleigh, iterations: k };
        if let Some(p) = prev {
            if (lambda - p).abs() < cfg.thr {
                break;
            }
        }
        prev = Some(lambda);
    }
    Ok(last)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureSample {
    pub iter: usize,
    pub lambda_max: f64,
    pub rayleigh: f64,
    pub power_iters: usize,
}

/// Principal-eigenvalue estimates recorded along a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurvatureTrace {
    samples: Vec<CurvatureSample>,
}

impl CurvatureTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn samples(&self) -> &[CurvatureSample] {
        &self.samples
    }

    pub fn push(&mut self, sample: CurvatureSample) {
        self.samples.push(sample);
    }

    /// Runs the power method at `theta` and records the result. A landscape
    /// whose HVP vanishes in every sampled direction is recorded as zero
    /// curvature.
    pub fn probe<G>(
        &mut self,
        iter: usize,
        grad: &mut G,
        theta: &[f64],
        cfg: &PowerIterConfig,
    ) -> Result<CurvatureSample>
    where
        G: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let sample = match power_iteration(grad, theta, cfg) {
            Ok(r) => {
                CurvatureSample { iter, lambda_max: r.lambda_max, rayleigh: r.rayleigh, power_iters: r.iterations }
            }
            Err(Error::DegeneratePowerIteration) => {
                CurvatureSample { iter, lambda_max: 0.0, rayleigh: 0.0, power_iters: 0 }
            }
            Err(e) => return Err(e),
        };
        self.samples.push(sample);
        Ok(sample)
    }

    pub fn avg(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.lambda_max).sum::<f64>() / self.samples.len() as f64
    }

    /// Population standard deviation of the recorded magnitudes.
    pub fn sd(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let mean = self.avg();
        let var = self.samples.iter().map(|s| (s.lambda_max - mean).powi(2)).sum::<f64>() / self.samples.len() as f64;
        var.sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lambda_max,rayleigh,power_iters\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{:.10e},{:.10e},{}", s.iter, s.lambda_max, s.rayleigh, s.power_iters);
        }
        let _ = writeln!(out, "# avg={:.10e} sd={:.10e}", self.avg(), self.sd());
        out
    }
}

/// `1 / (e^c + e^{-c} + 2)`, the gradient-ratio kernel of a two-way softmax.
pub fn psi(c: f64) -> f64 {
    1.0 / (c.exp() + (-c).exp() + 2.0)
}

/// Gradient of the loss with respect to the positive (gallery) prototype:
/// `s·(p_y − 1)·x_p`, where `p_y` is the softmax probability of the positive
/// against the given negatives.
pub fn gallery_gradient(x_g: &[f64], x_p: &[f64], negatives: &Matrix, s: f64) -> Vec<f64> {
    let z_pos = s * diffcore::dot(x_g, x_p);
    let z_neg: Vec<f64> = negatives.iter_rows().map(|w| s * diffcore::dot(w, x_p)).collect();
    let max = z_neg.iter().copied().fold(z_pos, f64::max);
    let denom: f64 = (z_pos - max).exp() + z_neg.iter().map(|z| (z - max).exp()).sum::<f64>();
    let p = (z_pos - max).exp() / denom;
    x_p.iter().map(|x| s * (p - 1.0) * x).collect()
}

/// `||η(x_g) − η(x_g')|| / ||x_g − x_g'||`, or `None` for coincident points.
pub fn lipschitz_ratio(x_g: &[f64], x_g_prime: &[f64], x_p: &[f64], negatives: &Matrix, s: f64) -> Option<f64> {
    let denom = diffcore::distance(x_g, x_g_prime);
    if denom == 0.0 {
        return None;
    }
    let a = gallery_gradient(x_g, x_p, negatives, s);
    let b = gallery_gradient(x_g_prime, x_p, negatives, s);
    Some(diffcore::distance(&a, &b) / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzProbeResult {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// `s²/2`
    pub bound: f64,
}

impl LipschitzProbeResult {
    pub fn within_bound(&self) -> bool {
        self.ratios.iter().all(|&r| r <= self.bound + 1e-6)
    }
}

/// Embeds `(gallery, probe)` input pairs with the two networks, perturbs
/// each gallery feature `num_perturbations` times (re-normalizing), and
/// measures the gradient-variation ratio against `negatives`.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_probe(
    gallery_net: &EmbeddingNet,
    probe_net: &EmbeddingNet,
    gallery_inputs: &Matrix,
    probe_inputs: &Matrix,
    negatives: &Matrix,
    s: f64,
    num_perturbations: usize,
    perturbation: f64,
    seed: u64,
) -> Result<LipschitzProbeResult> {
    if gallery_inputs.rows() != probe_inputs.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} probe inputs", gallery_inputs.rows()),
            found: format!("{}", probe_inputs.rows()),
        });
    }
    let xg = gallery_net.forward(gallery_inputs)?;
    let xp = probe_net.forward(probe_inputs)?;
    let mut rng = rngs::stream(seed, Stream::Eval);
    let mut ratios = Vec::with_capacity(xg.rows() * num_perturbations);
    for i in 0..xg.rows() {
        for _ in 0..num_perturbations {
            let mut moved = xg.row(i).to_vec();
            for m in moved.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *m += perturbation * g;
            }
            let Ok(moved) = l2_normalize(&moved) else { continue };
            if let Some(r) = lipschitz_ratio(xg.row(i), &moved, xp.row(i), negatives, s) {
                ratios.push(r);
            }
        }
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(LipschitzProbeResult { ratios, max_ratio, bound: s * s / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use rand::SeedableRng;

    fn quadratic(a: Matrix) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
        move |theta: &[f64]| Ok(a.iter_rows().map(|r| diffcore::dot(r, theta)).collect())
    }

    fn diag(values: &[f64]) -> Matrix {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    #[test]
    fn hvp_on_quadratic_is_exact() {
        let a = Matrix::from_rows(&[[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 4.0]]).unwrap();
        let mut g = quadratic(a.clone());
        let theta = [0.3, -2.0, 1.5];
        let v = [1.0, 2.0, -0.5];
        let hv = hvp(&mut g, &theta, &v).unwrap();
        let av: Vec<f64> = a.iter_rows().map(|r| diffcore::dot(r, &v)).collect();
        assert!(diffcore::distance(&hv, &av) / diffcore::norm(&av) < 1e-6);
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let hv3 = hvp(&mut g, &theta, &v3).unwrap();
        for (x, y) in hv.iter().zip(&hv3) {
            assert!((3.0 * x - y).abs() < 1e-6 * (1.0 + y.abs()));
        }
        assert!(hvp(&mut g, &theta, &[0.0; 3]).is_err());
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let mut g = quadratic(diag(&[1.0, 2.0, 5.0]));
        let r = power_iteration(&mut g, &[0.1, 0.2, 0.3], &PowerIterConfig::default()).unwrap();
        assert!((r.lambda_max - 5.0).abs() < DEFAULT_THR);
        assert!(r.iterations <= DEFAULT_MAX_ITERS);
        assert!(r.rayleigh > 0.0);
    }

    #[test]
    fn negative_dominant_eigenvalue_keeps_its_sign_in_rayleigh() {
        let mut g = quadratic(diag(&[1.0, -6.0, 2.0]));
        let r = power_iteration(&mut g, &[0.0; 3], &PowerIterConfig::default()).unwrap();
        assert!((r.lambda_max - 6.0).abs() < 1e-3);
        assert!(r.rayleigh < 0.0);
    }

    #[test]
    fn seed_of_initial_direction_does_not_matter_with_a_gap() {
        let mut g = quadratic(diag(&[1.0, 3.0, 4.0, 8.0, 10.0]));
        let estimates: Vec<f64> = (0..10)
            .map(|seed| {
                let cfg = PowerIterConfig { seed, ..Default::default() };
                power_iteration(&mut g, &[0.0; 5], &cfg).unwrap().lambda_max
            })
            .collect();
        for e in &estimates {
            assert!((e - estimates[0]).abs() <= 2.0 * DEFAULT_THR);
        }
    }

    #[test]
    fn flat_landscape_is_degenerate_but_traces_as_zero() {
        let mut zero = |t: &[f64]| Ok(vec![0.0; t.len()]);
        assert_eq!(
            power_iteration(&mut zero, &[1.0, 2.0], &PowerIterConfig::default()),
            Err(Error::DegeneratePowerIteration)
        );
        let mut trace = CurvatureTrace::new();
        for it in 0..5 {
            trace.probe(it, &mut zero, &[1.0, 2.0], &PowerIterConfig::default()).unwrap();
        }
        assert!(trace.samples().iter().all(|s| s.lambda_max == 0.0));
        assert_eq!(trace.sd(), 0.0);
    }

    #[test]
    fn constant_hessian_gives_flat_trace() {
        let mut g = quadratic(diag(&[0.5, 2.0, 3.0]));
        let mut trace = CurvatureTrace::new();
        for it in 0..6 {
            let theta = [it as f64, -(it as f64), 0.5];
            trace.probe(it * 40, &mut g, &theta, &PowerIterConfig { seed: it as u64, ..Default::default() }).unwrap();
        }
        assert!(trace.sd() < DEFAULT_THR);
        assert!((trace.avg() - 3.0).abs() < DEFAULT_THR);
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,lambda_max,rayleigh,power_iters\n"));
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.lines().last().unwrap().starts_with("# avg="));
    }

    #[test]
    fn trace_statistics() {
        let mut t = CurvatureTrace::new();
        for (i, l) in [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0].iter().enumerate() {
            t.push(CurvatureSample { iter: i, lambda_max: *l, rayleigh: *l, power_iters: 1 });
        }
        assert_eq!(t.avg(), 5.0);
        assert_eq!(t.sd(), 2.0);
    }

    #[test]
    fn psi_examples_and_shape() {
        assert_eq!(psi(0.0), 0.25);
        assert!((psi(3f64.ln()) - 0.1875).abs() < 1e-15);
        for k in -10_000..10_000 {
            let c = k as f64 * 1e-3;
            assert_eq!(psi(c), psi(-c));
            if c > 0.0 {
                assert!(psi(c + 1e-3) < psi(c));
            } else {
                assert!(psi(c + 1e-3) > psi(c) || c + 1e-3 > 0.0);
            }
        }
    }

    #[test]
    fn gallery_gradient_without_negatives_vanishes() {
        let none = Matrix::zeros(0, 3);
        let xg = [1.0, 0.0, 0.0];
        let xg2 = l2_normalize(&[0.9, 0.3, 0.0]).unwrap();
        let xp = l2_normalize(&[0.5, 0.5, 0.1]).unwrap();
        assert!(gallery_gradient(&xg, &xp, &none, 30.0).iter().all(|&x| x == 0.0));
        assert_eq!(lipschitz_ratio(&xg, &xg2, &xp, &none, 30.0), Some(0.0));
        assert_eq!(lipschitz_ratio(&xg, &xg, &xp, &none, 30.0), None);
    }

    #[test]
    fn probe_ratios_respect_bound() {
        let g = EmbeddingNet::init(&[6, 8, 4], Activation::Tanh, 1).unwrap();
        let p = EmbeddingNet::init(&[6, 8, 4], Activation::Tanh, 2).unwrap();
        let mut rng = LabRng::seed_from_u64(0);
        let mut rand_rows =
            |n: usize, d: usize| Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gi = rand_rows(20, 6);
        let pi = rand_rows(20, 6);
        let negs_raw = rand_rows(10, 4);
        let negs =
            Matrix::from_rows(&negs_raw.iter_rows().map(|r| l2_normalize(r).unwrap()).collect::<Vec<_>>()).unwrap();
        let res = lipschitz_probe(&g, &p, &gi, &pi, &negs, 30.0, 5, 0.1, 3).unwrap();
        assert_eq!(res.bound, 450.0);
        assert_eq!(res.ratios.len(), 100);
        assert!(res.within_bound());
    }
}
