//! Dense arithmetic and reverse-mode rules for small feedforward stacks.
//!
//! A network is a flat parameter slice interpreted by a [`LayerStack`]. The
//! canonical parameter order is layers in forward order; within an affine
//! layer the weight matrix is stored row-major (`out x in`) followed by the
//! bias vector.

use crate::error::{Error, Result};

/// Norms at or below this value are treated as degenerate by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("row of length {cols}"),
                    found: format!("row {i} of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", self.cols),
                found: format!("{} columns", other.cols),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `y += k * x`
pub fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += k * xi);
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite { context: "l2_normalize input" });
    }
    if n <= NORM_FLOOR {
        return Err(Error::NormTooSmall { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of `v -> v/||v||`: `(I - u u^T) g / ||v||`.
pub fn l2_normalize_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= NORM_FLOOR {
        return Err(Error::NormTooSmall { norm: n });
    }
    let ug: f64 = v.iter().zip(upstream).map(|(vi, gi)| vi / n * gi).sum();
    Ok(v.iter().zip(upstream).map(|(vi, gi)| (gi - vi / n * ug) / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative evaluated at pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// One step of a feedforward stack. Every variant has a matched backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPrimitive {
    Affine { fan_in: usize, fan_out: usize },
    Nonlinearity(Activation),
    L2Normalize,
}

impl LayerPrimitive {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerPrimitive::Affine { fan_in, fan_out } => fan_in * fan_out + fan_out,
            _ => 0,
        }
    }

    /// Applies the primitive to every row of `input`.
    pub fn forward(&self, params: &[f64], input: &Matrix) -> Result<Matrix> {
        match *self {
            LayerPrimitive::Affine { fan_in, fan_out } => {
                if input.cols() != fan_in {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{fan_in} input columns"),
                        found: input.shape_str(),
                    });
                }
                let (weights, bias) = params.split_at(fan_in * fan_out);
                let mut out = Matrix::zeros(input.rows(), fan_out);
                for (r, x) in input.iter_rows().enumerate() {
                    let y = out.row_mut(r);
                    for (o, yo) in y.iter_mut().enumerate() {
                        *yo = bias[o] + dot(&weights[o * fan_in..(o + 1) * fan_in], x);
                    }
                }
                Ok(out)
            }
            LayerPrimitive::Nonlinearity(act) => {
                let data = input.data().iter().map(|&z| act.apply(z)).collect();
                Matrix::new(input.rows(), input.cols(), data)
            }
            LayerPrimitive::L2Normalize => {
                let mut out = Matrix::zeros(input.rows(), input.cols());
                for (r, x) in input.iter_rows().enumerate() {
                    out.row_mut(r).copy_from_slice(&l2_normalize(x)?);
                }
                Ok(out)
            }
        }
    }

    /// Given the forward input and the upstream gradient on the output,
    /// returns the gradient on the input and accumulates parameter gradients
    /// into `grad_params`.
    pub fn backward(
        &self,
        params: &[f64],
        input: &Matrix,
        upstream: &Matrix,
        grad_params: &mut [f64],
    ) -> Result<Matrix> {
        match *self {
            LayerPrimitive::Affine { fan_in, fan_out } => {
                if upstream.cols() != fan_out || upstream.rows() != input.rows() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}x{fan_out} upstream", input.rows()),
                        found: upstream.shape_str(),
                    });
                }
                let weights = &params[..fan_in * fan_out];
                let (gw, gb) = grad_params.split_at_mut(fan_in * fan_out);
                let mut grad_in = Matrix::zeros(input.rows(), fan_in);
                for r in 0..input.rows() {
                    let x = input.row(r);
                    let g = upstream.row(r);
                    let gx = grad_in.row_mut(r);
                    for o in 0..fan_out {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let w_row = &weights[o * fan_in..(o + 1) * fan_in];
                        let gw_row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        axpy(go, x, gw_row);
                        axpy(go, w_row, gx);
                    }
                }
                Ok(grad_in)
            }
            LayerPrimitive::Nonlinearity(act) => {
                check_same_shape(input, upstream)?;
                let data = input.data().iter().zip(upstream.data()).map(|(&z, &g)| g * act.derivative(z)).collect();
                Matrix::new(input.rows(), input.cols(), data)
            }
            LayerPrimitive::L2Normalize => {
                check_same_shape(input, upstream)?;
                let mut grad_in = Matrix::zeros(input.rows(), input.cols());
                for r in 0..input.rows() {
                    let g = l2_normalize_backward(input.row(r), upstream.row(r))?;
                    grad_in.row_mut(r).copy_from_slice(&g);
                }
                Ok(grad_in)
            }
        }
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch { expected: a.shape_str(), found: b.shape_str() });
    }
    Ok(())
}

/// Affine/nonlinearity pairs for every hidden layer, a final affine, then
/// L2 normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStack {
    layers: Vec<LayerPrimitive>,
    offsets: Vec<usize>,
    param_count: usize,
}

/// Intermediate values recorded by [`LayerStack::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[k]` is the input of layer `k`; the last entry is the stack output.
    values: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("tape always holds the input")
    }
}

impl LayerStack {
    pub fn mlp(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig {
                key: "model.layer_sizes".into(),
                reason: format!("need at least input and output sizes, all >= 1; got {layer_sizes:?}"),
            });
        }
        let mut layers = Vec::new();
        let n = layer_sizes.len() - 1;
        for (k, pair) in layer_sizes.windows(2).enumerate() {
            layers.push(LayerPrimitive::Affine { fan_in: pair[0], fan_out: pair[1] });
            if k + 1 < n {
                layers.push(LayerPrimitive::Nonlinearity(activation));
            }
        }
        layers.push(LayerPrimitive::L2Normalize);
        let mut offsets = Vec::with_capacity(layers.len());
        let mut acc = 0;
        for l in &layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        Ok(LayerStack { layers, offsets, param_count: acc })
    }

    pub fn layers(&self) -> &[LayerPrimitive] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    fn params_of<'a>(&self, k: usize, params: &'a [f64]) -> &'a [f64] {
        &params[self.offsets[k]..self.offsets[k] + self.layers[k].param_count()]
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_count),
                found: format!("{} parameters", params.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], batch: &Matrix) -> Result<Matrix> {
        self.check_params(params)?;
        let mut x = batch.clone();
        for k in 0..self.layers.len() {
            x = self.layers[k].forward(self.params_of(k, params), &x)?;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { context: "forward" });
        }
        Ok(x)
    }

    pub fn forward_tape(&self, params: &[f64], batch: &Matrix) -> Result<Tape> {
        self.check_params(params)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(batch.clone());
        for k in 0..self.layers.len() {
            let next = self.layers[k].forward(self.params_of(k, params), &values[k])?;
            values.push(next);
        }
        if !values.last().is_none_or(Matrix::is_finite) {
            return Err(Error::NonFinite { context: "forward" });
        }
        Ok(Tape { values })
    }

    /// Gradient of `sum(upstream ∘ output)` with respect to the flat parameters.
    pub fn backward(&self, params: &[f64], tape: &Tape, upstream: &Matrix) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let out = tape.output();
        if out.rows() != upstream.rows() || out.cols() != upstream.cols() {
            return Err(Error::ShapeMismatch { expected: out.shape_str(), found: upstream.shape_str() });
        }
        let mut grad = vec![0.0; self.param_count];
        let mut g = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let start = self.offsets[k];
            let end = start + self.layers[k].param_count();
            g = self.layers[k].backward(self.params_of(k, params), &tape.values[k], &g, &mut grad[start..end])?;
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "backward" });
        }
        Ok(grad)
    }
}

/// Central-difference gradient of `loss_fn` at `theta`.
pub fn finite_diff_grad<F>(mut loss_fn: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss_fn(&probe);
        probe[i] = orig - step;
        let minus = loss_fn(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { context: "finite_diff_grad loss evaluation" });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        distance(a, b) / norm(a).max(norm(b)).max(1e-12)
    }

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let unit = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&unit).unwrap(), unit.to_vec());
        assert!(matches!(l2_normalize(&[0.0; 5]), Err(Error::NormTooSmall { .. })));
        assert!(matches!(l2_normalize(&[1e-13, 0.0]), Err(Error::NormTooSmall { .. })));
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..7).map(|_| rng.random_range(-5.0..5.0)).collect();
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            assert!((norm(&once) - 1.0).abs() < 1e-12);
            assert!(distance(&once, &twice) <= 1e-15);
        }
    }

    #[test]
    fn every_primitive_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prims = [
            LayerPrimitive::Affine { fan_in: 4, fan_out: 3 },
            LayerPrimitive::Nonlinearity(Activation::Tanh),
            LayerPrimitive::Nonlinearity(Activation::Relu),
            LayerPrimitive::L2Normalize,
        ];
        for prim in prims {
            for _ in 0..20 {
                let in_cols = match prim {
                    LayerPrimitive::Affine { fan_in, .. } => fan_in,
                    _ => 4,
                };
                let x = rand_matrix(&mut rng, 3, in_cols);
                let params: Vec<f64> = (0..prim.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = prim.forward(&params, &x).unwrap();
                let up = rand_matrix(&mut rng, y.rows(), y.cols());
                let mut gp = vec![0.0; params.len()];
                let gx = prim.backward(&params, &x, &up, &mut gp).unwrap();

                let fd_x = finite_diff_grad(
                    |xd| {
                        let xm = Matrix::new(x.rows(), x.cols(), xd.to_vec()).unwrap();
                        dot(prim.forward(&params, &xm).unwrap().data(), up.data())
                    },
                    x.data(),
                    1e-6,
                )
                .unwrap();
                assert!(rel_err(gx.data(), &fd_x) <= 1e-5, "{prim:?} input grad");
                if !params.is_empty() {
                    let fd_p = finite_diff_grad(|p| dot(prim.forward(p, &x).unwrap().data(), up.data()), &params, 1e-6)
                        .unwrap();
                    assert!(rel_err(&gp, &fd_p) <= 1e-5, "{prim:?} param grad");
                }
            }
        }
    }

    #[test]
    fn stack_backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = LayerStack::mlp(&[5, 6, 3], Activation::Tanh).unwrap();
        let params: Vec<f64> = (0..stack.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = rand_matrix(&mut rng, 4, 5);
        let tape = stack.forward_tape(&params, &x).unwrap();
        let zero = Matrix::zeros(4, 3);
        assert!(stack.backward(&params, &tape, &zero).unwrap().iter().all(|&g| g == 0.0));
        let up = rand_matrix(&mut rng, 4, 3);
        let mut up2 = up.clone();
        up2.scale(2.0);
        let g1 = stack.backward(&params, &tape, &up).unwrap();
        let g2 = stack.backward(&params, &tape, &up2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        assert!(stack.backward(&params, &tape, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let theta = [0.3, -1.2, 2.5];
        let g = finite_diff_grad(|t| 0.5 * dot(t, t), &theta, 1e-6).unwrap();
        assert!(distance(&g, &theta) < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &theta, 1e-6).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let g = finite_diff_grad(|t| t.iter().map(|x| x.sin()).sum(), &[0.0; 4], 1e-6).unwrap();
        assert!(g.iter().all(|&x| (x - 1.0).abs() < 1e-8));
        assert!(finite_diff_grad(|_| f64::NAN, &theta, 1e-6).is_err());
    }

    #[test]
    fn fuzzed_primitives_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let stack = LayerStack::mlp(&[6, 8, 4], Activation::Relu).unwrap();
        for _ in 0..10_000 {
            let params: Vec<f64> = (0..stack.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = rand_matrix(&mut rng, 1, 6);
            match stack.forward_tape(&params, &x) {
                Ok(tape) => {
                    assert!(tape.output().is_finite());
                    let up = rand_matrix(&mut rng, 1, 4);
                    let g = stack.backward(&params, &tape, &up).unwrap();
                    assert!(g.iter().all(|v| v.is_finite()));
                }
                // relu can zero the whole pre-normalization vector; that is a surfaced error
                Err(e) => assert!(matches!(e, Error::NormTooSmall { .. })),
            }
        }
    }
}
