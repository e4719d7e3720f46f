//! Small dense numerics: flat-vector helpers, a row-major matrix, and the
//! classifier family used by every client (logistic regression or a
//! one-hidden-layer ReLU network) with hand-written backpropagation.
//!
//! Parameters are stored as a single flat `Vec<f64>`; layered views are
//! computed from [`ModelDims`]. The flat layout is: for each layer in order,
//! the weight matrix (`out x in`, row-major) followed by its bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

pub mod vecops {
    //! Plain slice arithmetic shared by aggregators and attacks.

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        dist_sq(a, b).sqrt()
    }

    /// `y += a * x`
    pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }

    pub fn scale(a: f64, x: &mut [f64]) {
        for xi in x.iter_mut() {
            *xi *= a;
        }
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    /// Unweighted coordinate-wise mean of equally sized vectors.
    pub fn mean(vectors: &[&[f64]]) -> Vec<f64> {
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut out = vec![0.0; dim];
        for v in vectors {
            axpy(1.0, v, &mut out);
        }
        let n = vectors.len().max(1) as f64;
        scale(1.0 / n, &mut out);
        out
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = norm(a);
        let nb = norm(b);
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot(a, b) / (na * nb)
        }
    }

    pub fn all_finite(a: &[f64]) -> bool {
        a.iter().all(|x| x.is_finite())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(FedError::Dimension {
                    expected: cols,
                    actual: r.len(),
                    context: "matrix row length",
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Shape of a classifier. `hidden == 0` selects logistic regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn logistic(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: 0,
            classes,
        }
    }

    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
        }
    }

    /// `(fan_in, fan_out)` per layer, in flat-layout order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        if self.hidden == 0 {
            vec![(self.input, self.classes)]
        } else {
            vec![(self.input, self.hidden), (self.hidden, self.classes)]
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.classes < 2 {
            return Err(FedError::config(format!(
                "model needs input >= 1 and classes >= 2, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Borrowed view of one layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_out x fan_in`, row-major.
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

impl LayerView<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.fan_in).zip(self.bias))
        {
            *o = vecops::dot(row, x) + b;
        }
    }
}

/// Classifier parameters `w = f ∘ g`: an optional ReLU backbone layer and a
/// linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: ModelDims,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            values: vec![0.0; dims.param_count()],
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut values = Vec::with_capacity(dims.param_count());
        for (fan_in, fan_out) in dims.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self { dims, values })
    }

    /// Rebuilds parameters from a flat vector laid out as [`Self::as_flat`].
    pub fn unflatten(dims: ModelDims, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.param_count() {
            return Err(FedError::Dimension {
                expected: dims.param_count(),
                actual: values.len(),
                context: "flat parameter vector",
            });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layers(&self) -> Vec<LayerView<'_>> {
        let mut offset = 0;
        self.dims
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w_end = offset + fan_in * fan_out;
                let b_end = w_end + fan_out;
                let view = LayerView {
                    fan_in,
                    fan_out,
                    weight: &self.values[offset..w_end],
                    bias: &self.values[w_end..b_end],
                };
                offset = b_end;
                view
            })
            .collect()
    }

    /// Little-endian byte image of the flat vector.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn is_finite(&self) -> bool {
        vecops::all_finite(&self.values)
    }

    /// Logits for every row of `inputs`.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols != self.dims.input {
            return Err(FedError::Dimension {
                expected: self.dims.input,
                actual: inputs.cols,
                context: "batch feature width",
            });
        }
        let layers = self.layers();
        let mut out = Matrix::zeros(inputs.rows, self.dims.classes);
        let mut hidden = vec![0.0; self.dims.hidden];
        for r in 0..inputs.rows {
            let x = inputs.row(r);
            match layers.as_slice() {
                [head] => head.apply(x, out.row_mut(r)),
                [backbone, head] => {
                    backbone.apply(x, &mut hidden);
                    hidden.iter_mut().for_each(|h| *h = h.max(0.0));
                    head.apply(&hidden, out.row_mut(r));
                }
                _ => unreachable!("at most two layers"),
            }
        }
        Ok(out)
    }

    /// Argmax class for a single feature vector; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let m = Matrix {
            rows: 1,
            cols: x.len(),
            data: x.to_vec(),
        };
        Ok(argmax(self.logits(&m)?.row(0)))
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch of labelled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows != labels.len() {
            return Err(FedError::Dimension {
                expected: inputs.rows,
                actual: labels.len(),
                context: "batch labels",
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ModelParams,
    pub logits: Matrix,
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(FedError::Empty("batch"));
    }
    let dims = params.dims();
    if batch.inputs.cols != dims.input {
        return Err(FedError::Dimension {
            expected: dims.input,
            actual: batch.inputs.cols,
            context: "batch feature width",
        });
    }
    if let Some(bad) = batch.labels.iter().find(|&&y| y >= dims.classes) {
        return Err(FedError::config(format!(
            "label {bad} outside class range 0..{}",
            dims.classes
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    let logits = params.logits(&batch.inputs)?;
    let mut logp = vec![0.0; logits.cols];
    let mut total = 0.0;
    for (r, &y) in batch.labels.iter().enumerate() {
        log_softmax_row(logits.row(r), &mut logp);
        total -= logp[y];
    }
    Ok(total / batch.len() as f64)
}

/// Mean softmax cross-entropy, its gradient, and the batch logits.
pub fn forward_loss_grad(params: &ModelParams, batch: &Batch) -> Result<LossGrad> {
    check_batch(params, batch)?;
    let dims = params.dims();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let layers = params.layers();
    let mut grads = ModelParams::zeros(dims)?;

    let mut logits = Matrix::zeros(n, dims.classes);
    let mut hidden = Matrix::zeros(n, dims.hidden);
    for r in 0..n {
        let x = batch.inputs.row(r);
        if let [backbone, head] = layers.as_slice() {
            let h = hidden.row_mut(r);
            backbone.apply(x, h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            head.apply(hidden.row(r), logits.row_mut(r));
        } else {
            layers[0].apply(x, logits.row_mut(r));
        }
    }

    let mut loss = 0.0;
    let mut dz = vec![0.0; dims.classes];
    let mut dh = vec![0.0; dims.hidden];
    let head_offset = if dims.hidden == 0 {
        0
    } else {
        dims.input * dims.hidden + dims.hidden
    };
    let head_in = if dims.hidden == 0 {
        dims.input
    } else {
        dims.hidden
    };
    for r in 0..n {
        let y = batch.labels[r];
        log_softmax_row(logits.row(r), &mut dz);
        loss -= dz[y];
        for v in dz.iter_mut() {
            *v = v.exp() * inv_n;
        }
        dz[y] -= inv_n;

        let head_input = if dims.hidden == 0 {
            batch.inputs.row(r)
        } else {
            hidden.row(r)
        };
        let g = grads.as_flat_mut();
        for (c, dzc) in dz.iter().enumerate() {
            let wrow = &mut g[head_offset + c * head_in..head_offset + (c + 1) * head_in];
            vecops::axpy(*dzc, head_input, wrow);
            g[head_offset + head_in * dims.classes + c] += dzc;
        }

        if let [_, head] = layers.as_slice() {
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (c, dzc) in dz.iter().enumerate() {
                vecops::axpy(*dzc, &head.weight[c * head_in..(c + 1) * head_in], &mut dh);
            }
            let x = batch.inputs.row(r);
            let g = grads.as_flat_mut();
            for (j, (dhj, hj)) in dh.iter().zip(hidden.row(r)).enumerate() {
                if *hj <= 0.0 {
                    continue;
                }
                vecops::axpy(*dhj, x, &mut g[j * dims.input..(j + 1) * dims.input]);
                g[dims.input * dims.hidden + j] += dhj;
            }
        }
    }

    Ok(LossGrad {
        loss: loss * inv_n,
        grads,
        logits,
    })
}

/// Central finite-difference gradient of [`loss`], used as a test oracle.
pub fn finite_difference_grad(params: &ModelParams, batch: &Batch, step: f64) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let up = loss(&probe, batch)?;
        probe.values[i] = orig - step;
        let down = loss(&probe, batch)?;
        probe.values[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Hyper-parameters of heavy-ball SGD with decoupled weight-decay input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffer; empty until the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentumBuffer {
    velocity: Option<Vec<f64>>,
}

impl MomentumBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self) -> Option<&[f64]> {
        self.velocity.as_deref()
    }
}

/// In-place SGD update on flat slices:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
/// The first step initialises `v` to the raw decayed gradient.
pub fn sgd_apply(
    params: &mut [f64],
    grads: &[f64],
    cfg: &SgdConfig,
    state: &mut MomentumBuffer,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(FedError::Dimension {
            expected: params.len(),
            actual: grads.len(),
            context: "gradient length",
        });
    }
    let d: Vec<f64> = grads
        .iter()
        .zip(params.iter())
        .map(|(g, p)| g + cfg.weight_decay * p)
        .collect();
    let step = if cfg.momentum == 0.0 {
        d
    } else {
        match state.velocity.as_mut() {
            Some(v) => {
                for (vi, di) in v.iter_mut().zip(&d) {
                    *vi = cfg.momentum * *vi + di;
                }
                v.clone()
            }
            None => {
                state.velocity = Some(d.clone());
                d
            }
        }
    };
    vecops::axpy(-cfg.lr, &step, params);
    Ok(())
}

/// Value-semantics wrapper around [`sgd_apply`].
pub fn sgd_step(
    params: &ModelParams,
    grads: &ModelParams,
    cfg: &SgdConfig,
    state: &mut MomentumBuffer,
) -> Result<ModelParams> {
    if params.dims() != grads.dims() {
        return Err(FedError::config("parameter and gradient shapes differ"));
    }
    let mut out = params.clone();
    sgd_apply(&mut out.values, &grads.values, cfg, state)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> Batch {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let p = ModelParams::zeros(ModelDims::logistic(3, 4)).unwrap();
        let b = Batch::new(Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap(), vec![2]).unwrap();
        let lg = forward_loss_grad(&p, &b).unwrap();
        assert!((lg.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(lg.logits.rows, 1);
    }

    #[test]
    fn zero_logistic_bias_grad_is_softmax_minus_onehot() {
        let dims = ModelDims::logistic(2, 3);
        let p = ModelParams::zeros(dims).unwrap();
        let b = Batch::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
            vec![0, 2],
        )
        .unwrap();
        let lg = forward_loss_grad(&p, &b).unwrap();
        let bias = lg.grads.layers()[0].bias.to_vec();
        let third = 1.0 / 3.0;
        let expected = [(third - 1.0 + third) / 2.0, third, (third + third - 1.0) / 2.0];
        for (g, e) in bias.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dims in [ModelDims::logistic(5, 3), ModelDims::mlp(5, 4, 3)] {
            let p = ModelParams::init(dims, &mut rng).unwrap();
            let b = random_batch(&mut rng, 6, 5, 3);
            let analytic = forward_loss_grad(&p, &b).unwrap().grads.into_flat();
            let numeric = finite_difference_grad(&p, &b, 1e-5).unwrap();
            let err = vecops::dist(&analytic, &numeric)
                / vecops::norm(&analytic).max(vecops::norm(&numeric));
            assert!(err < 1e-4, "{dims:?}: {err}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = ModelParams::zeros(ModelDims::logistic(3, 2)).unwrap();
        let b = Batch::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), vec![0]).unwrap();
        assert!(matches!(
            forward_loss_grad(&p, &b),
            Err(FedError::Dimension { .. })
        ));
        assert!(ModelParams::unflatten(ModelDims::logistic(3, 2), vec![0.0; 5]).is_err());
        let empty = Batch::new(Matrix::zeros(0, 3), vec![]).unwrap();
        assert!(forward_loss_grad(&p, &empty).is_err());
    }

    #[test]
    fn flat_length_and_layout() {
        let dims = ModelDims::logistic(2, 2);
        assert_eq!(dims.param_count(), 6);
        let p = ModelParams::unflatten(dims, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let l = p.layers()[0];
        assert_eq!(l.weight, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(l.bias, &[5.0, 6.0]);
        assert_eq!(ModelDims::mlp(3, 4, 2).param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let dims = ModelDims::mlp(4, 3, 2);
        let a = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let back = ModelParams::unflatten(dims, a.to_flat()).unwrap();
        assert_eq!(back.to_le_bytes(), a.to_le_bytes());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let dims = ModelDims::logistic(2, 2);
        let p = ModelParams::unflatten(dims, vec![1.0; 6]).unwrap();
        let g = ModelParams::unflatten(dims, vec![3.0; 6]).unwrap();
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let out = sgd_step(&p, &g, &cfg, &mut MomentumBuffer::new()).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn sgd_plain_step() {
        let dims = ModelDims::logistic(2, 2);
        let p = ModelParams::unflatten(dims, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = ModelParams::unflatten(dims, vec![0.5; 6]).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let out = sgd_step(&p, &g, &cfg, &mut MomentumBuffer::new()).unwrap();
        for (o, x) in out.as_flat().iter().zip(p.as_flat()) {
            assert_eq!(*o, x - 0.1 * 0.5);
        }
    }

    #[test]
    fn sgd_momentum_unrolls() {
        let mut p = vec![0.0, 0.0];
        let g = vec![1.0, -2.0];
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut buf = MomentumBuffer::new();
        sgd_apply(&mut p, &g, &cfg, &mut buf).unwrap();
        sgd_apply(&mut p, &g, &cfg, &mut buf).unwrap();
        // displacement g + 1.9 g
        assert!((p[0] + 2.9).abs() < 1e-12);
        assert!((p[1] - 5.8).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
