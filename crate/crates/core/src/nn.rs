//! Dense networks trained with hand-written backpropagation.
//!
//! Everything is `f64` so that finite-difference checks stay tight. Layer
//! weights are stored `[fan_in × fan_out]` and a batch is a row-major
//! `[n × features]` matrix, so a layer computes `X·W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `indices` gathered into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul row counts");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t column counts");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[fan_in × fan_out]`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

/// Feed-forward stack. Dropout (inverted scaling) follows every layer but
/// the last, in train mode only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub layers: Vec<Dense>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    /// Per layer: 0 for dropped units, `1/keep` for kept ones.
    masks: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

/// One gradient buffer per parameter tensor, in [`MlpNet::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.concat()
    }
}

impl MlpNet {
    /// He-uniform initialisation: weights `U(±sqrt(6/fan_in))`, zero bias.
    /// `dims` lists layer widths from input to output.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer dims {dims:?}")));
        }
        if !(0.0..=0.5).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 0.5], got {dropout_rate}"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Dense {
                    weights: Matrix::from_vec(w[0], w[1], data).unwrap(),
                    bias: vec![0.0; w[1]],
                    activation: if i == last { output } else { hidden },
                }
            })
            .collect();
        Ok(MlpNet {
            layers,
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in() * l.fan_out() + l.fan_out()).sum()
    }

    /// Parameter tensors `[W0, b0, W1, b1, …]`.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }

    pub fn forward(
        &self,
        input: &Matrix,
        train_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout_rate;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
            shapes: self.shapes(),
        };
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul(&layer.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            if layer.activation == Activation::Relu {
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let mask = if train_mode && i < last && self.dropout_rate > 0.0 {
                let m: Vec<f64> = (0..a.data().len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                a.data_mut().iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            } else {
                None
            };
            cache.inputs.push(x);
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            x = a;
        }
        if !x.is_finite() {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok((x, cache))
    }

    /// Eval-mode forward without a cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let mut rng = crate::rng::rng_for(0, "eval");
        self.forward(input, false, &mut rng).map(|(out, _)| out)
    }

    /// Exact gradients of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.shapes != self.shapes() || cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument("forward cache does not match network".into()));
        }
        let n = cache.inputs[0].rows();
        if grad_output.shape() != (n, self.output_dim()) {
            return Err(Error::Dimension(format!(
                "grad_output is {:?}, expected {:?}",
                grad_output.shape(),
                (n, self.output_dim())
            )));
        }
        let mut tensors = vec![Vec::new(); 2 * self.layers.len()];
        let mut delta = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &cache.masks[i] {
                delta.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            if layer.activation == Activation::Relu {
                delta
                    .data_mut()
                    .iter_mut()
                    .zip(cache.pre_activations[i].data())
                    .for_each(|(d, &z)| {
                        if z <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            let grad_w = cache.inputs[i].t_matmul(&delta);
            let mut grad_b = vec![0.0; layer.fan_out()];
            for r in 0..delta.rows() {
                for (g, d) in grad_b.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            tensors[2 * i] = grad_w.into_data();
            tensors[2 * i + 1] = grad_b;
            delta = delta.matmul_t(&layer.weights);
        }
        Ok((Gradients { tensors }, delta))
    }

    /// Smallest `|z|` over all ReLU pre-activations for this input.
    pub fn relu_margin(&self, input: &Matrix) -> Result<f64> {
        let mut rng = crate::rng::rng_for(0, "eval");
        let (_, cache) = self.forward(input, false, &mut rng)?;
        Ok(self
            .layers
            .iter()
            .zip(&cache.pre_activations)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }
}

pub fn mlp_forward(
    net: &MlpNet,
    input: &Matrix,
    train_mode: bool,
    rng: &mut impl Rng,
) -> Result<(Matrix, ForwardCache)> {
    net.forward(input, train_mode, rng)
}

pub fn mlp_backward(net: &MlpNet, cache: &ForwardCache, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
    net.backward(cache, grad_output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RAdamBranch {
    /// Variance is not yet tractable: plain bias-corrected momentum step.
    Momentum,
    Rectified,
}

/// Rectified Adam. The adaptive step is used only once the approximated
/// SMA length `ρ_t` exceeds 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl RAdamState {
    pub fn new(shapes: &[usize], base_lr: f64) -> Self {
        Self::with_betas(shapes, base_lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(shapes: &[usize], base_lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        RAdamState {
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1,
            beta2,
            eps,
            base_lr,
        }
    }

    /// `ρ_t` for a (1-based) step count.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<RAdamBranch> {
        let lr = self.base_lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update at learning rate `lr`. Parameters and state are left
    /// untouched when any gradient is non-finite.
    pub fn step_with_lr(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<RAdamBranch> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Dimension("parameter/gradient shape mismatch".into()));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }

        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = self.rho(t);
        let branch = if rho_t > 4.0 {
            RAdamBranch::Rectified
        } else {
            RAdamBranch::Momentum
        };
        let rect = if branch == RAdamBranch::Rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        } else {
            0.0
        };

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                p[i] -= match branch {
                    RAdamBranch::Momentum => lr * m_hat,
                    RAdamBranch::Rectified => {
                        let v_hat = (v[i] / bias2).sqrt();
                        lr * rect * m_hat / (v_hat + self.eps)
                    }
                };
            }
        }
        Ok(branch)
    }
}

/// `lr(epoch) = base_lr · gamma^epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, gamma: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) || !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need base_lr > 0 and gamma in (0, 1], got {base_lr} / {gamma}"
            )));
        }
        Ok(LrSchedule { base_lr, gamma })
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.base_lr * self.gamma.powi(epoch as i32)
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: u32) -> f64 {
    schedule.lr_at(epoch)
}

/// Relative error used by the gradient checks. The floor keeps entries that
/// are zero on both sides from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of [`MlpNet::backward`] over every parameter.
///
/// `loss` maps the network output to `(value, d value / d output)`. When the
/// net has dropout, every evaluation replays the same masks from `mask_seed`.
pub fn grad_check<F>(net: &MlpNet, input: &Matrix, loss: F, eps: f64, mask_seed: u64) -> Result<f64>
where
    F: Fn(&Matrix) -> (f64, Matrix),
{
    let train = net.dropout_rate > 0.0;
    let eval = |n: &MlpNet| -> Result<(Matrix, ForwardCache)> {
        let mut rng = crate::rng::rng_for(mask_seed, "grad-check");
        n.forward(input, train, &mut rng)
    };
    let (out, cache) = eval(net)?;
    let (_, grad_out) = loss(&out);
    let (analytic, _) = net.backward(&cache, &grad_out)?;

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (t, grads) in analytic.tensors.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let original = probe.params()[t][i];
            probe.params_mut()[t][i] = original + eps;
            let plus = loss(&eval(&probe)?.0).0;
            probe.params_mut()[t][i] = original - eps;
            let minus = loss(&eval(&probe)?.0).0;
            probe.params_mut()[t][i] = original;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
