//! Forward primitives. Each validates shapes, computes its value, and
//! records what its adjoint needs.

use super::tape::Op;
use super::{AutodiffError, Coeff, Result, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic per update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-column running mean and (biased) variance of a batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(width: usize) -> Self {
        RunningStats { mean: vec![T::zero(); width], var: vec![T::one(); width] }
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `sum_k alpha_k * x_k`, accumulated in input order.
    pub fn weighted_sum(&mut self, inputs: &[Var], coeffs: &[Coeff]) -> Result<Var> {
        let first = *inputs.first().ok_or(AutodiffError::EmptyInput("weighted_sum"))?;
        if inputs.len() != coeffs.len() {
            return Err(AutodiffError::CoeffCount("weighted_sum"));
        }
        let shape = self.value(first).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for (x, c) in inputs.iter().zip(coeffs) {
            let xv = self.value(*x);
            xv.same_shape(&out, "weighted_sum")?;
            let cv = self.value(c.var);
            if c.index >= cv.len() {
                return Err(AutodiffError::CoeffIndex { index: c.index, len: cv.len() });
            }
            let alpha = cv.data()[c.index];
            for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += alpha * v;
            }
        }
        Ok(self.push(out, Op::WeightedSum { inputs: inputs.to_vec(), coeffs: coeffs.to_vec() }))
    }

    /// `x W + b` with `W` of shape `(in, out)` and `b` of shape `(1, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "linear", left: xv.shape(), right: wv.shape() });
        }
        if bv.shape() != (1, wv.cols()) {
            return Err(AutodiffError::ShapeMismatch { op: "linear bias", left: bv.shape(), right: (1, wv.cols()) });
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Tensor::zeros(n, m);
        {
            let od = out.data_mut();
            for r in 0..n {
                let orow = &mut od[r * m..(r + 1) * m];
                orow.copy_from_slice(bv.data());
                let xr = xv.row(r);
                for i in 0..k {
                    let xi = xr[i];
                    if xi == T::zero() {
                        continue;
                    }
                    for (o, &wv) in orow.iter_mut().zip(wv.row(i)) {
                        *o += xi * wv;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).unwrap();
        self.push(out, Op::Relu { x })
    }

    /// Per-column normalization followed by `scale * xhat + shift`.
    ///
    /// Train mode standardizes with the batch mean and biased variance and
    /// returns the updated running statistics; eval mode uses `stats` and
    /// leaves them alone.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        for (p, name) in [(scale, "batch_norm scale"), (shift, "batch_norm shift")] {
            if self.value(p).shape() != (1, m) {
                return Err(AutodiffError::ShapeMismatch { op: name, left: self.value(p).shape(), right: (1, m) });
            }
        }
        if stats.mean.len() != m || stats.var.len() != m {
            return Err(AutodiffError::ShapeMismatch { op: "batch_norm stats", left: (1, stats.mean.len()), right: (1, m) });
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(AutodiffError::BatchTooSmall(n));
        }
        let (mut mean, mut var) = (vec![0.0f64; m], vec![0.0f64; m]);
        if train {
            for c in 0..m {
                let mu = (0..n).map(|r| xv.get(r, c).as_f64()).sum::<f64>() / n as f64;
                let v = (0..n).map(|r| (xv.get(r, c).as_f64() - mu).powi(2)).sum::<f64>() / n as f64;
                mean[c] = mu;
                var[c] = v;
            }
        } else {
            for c in 0..m {
                mean[c] = stats.mean[c].as_f64();
                var[c] = stats.var[c].as_f64();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = Tensor::zeros(n, m);
        let mut out = Tensor::zeros(n, m);
        for r in 0..n {
            for c in 0..m {
                let h = T::of((xv.get(r, c).as_f64() - mean[c]) * inv_std[c].as_f64());
                xhat.set(r, c, h);
                out.set(r, c, gamma[c] * h + beta[c]);
            }
        }
        let updated = train.then(|| RunningStats {
            mean: (0..m)
                .map(|c| T::of(BN_MOMENTUM * stats.mean[c].as_f64() + (1.0 - BN_MOMENTUM) * mean[c]))
                .collect(),
            var: (0..m)
                .map(|c| T::of(BN_MOMENTUM * stats.var[c].as_f64() + (1.0 - BN_MOMENTUM) * var[c]))
                .collect(),
        });
        let v = self.push(out, Op::BatchNorm { x, scale, shift, xhat, inv_std, train });
        Ok((v, updated))
    }

    /// Mean cross-entropy of `softmax(logits)` against label-smoothed
    /// targets `(1 - eps) * onehot + eps / classes`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(AutodiffError::InvalidSmoothing(smoothing));
        }
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if labels.len() != n {
            return Err(AutodiffError::BatchSizeMismatch { rows: n, labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes: k });
        }
        let off = smoothing / k as f64;
        let mut probs = Tensor::zeros(n, k);
        let mut target = Tensor::zeros(n, k);
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            for c in 0..k {
                let logp = row[c].as_f64() - lse;
                let t = if c == label { 1.0 - smoothing + off } else { off };
                total -= t * logp;
                probs.set(r, c, T::of(logp.exp()));
                target.set(r, c, T::of(t));
            }
        }
        let loss = Tensor::scalar(T::of(total / n as f64));
        Ok(self.push(loss, Op::SoftmaxCrossEntropy { logits, probs, target }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).unwrap();
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).unwrap();
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).unwrap();
        self.push(out, Op::Scale { x, c })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum { x })
    }

    /// Appends zero columns up to `width`.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = xv.shape();
        if width < k {
            return Err(AutodiffError::ShapeMismatch { op: "pad_cols", left: (n, k), right: (n, width) });
        }
        if width == k {
            return Ok(x);
        }
        let mut out = Tensor::zeros(n, width);
        for r in 0..n {
            out.data_mut()[r * width..r * width + k].copy_from_slice(xv.row(r));
        }
        Ok(self.push(out, Op::PadCols { x }))
    }
}
