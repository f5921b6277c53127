use super::{AutodiffError, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A scalar coefficient taken from one element of a recorded tensor, such
/// as a single edge weight inside a stage's alpha matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coeff {
    pub var: Var,
    pub index: usize,
}

pub(crate) enum Op<T: Scalar> {
    Constant,
    Param(ParamId),
    WeightedSum { inputs: Vec<Var>, coeffs: Vec<Coeff> },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor<T>, target: Tensor<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    PadCols { x: Var },
}

pub(crate) struct Record<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    pub(crate) records: Vec<Record<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.records.push(Record { value, op });
        Var(self.records.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records the current value of a parameter; gradients flow back into
    /// the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.records[v.0].value
    }

    /// Propagates adjoints from `loss` back through every recorded
    /// primitive, visiting each once in reverse order.
    ///
    /// Every parameter gradient in `store` is reset first, so parameters
    /// not reachable from `loss` end with exact zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        store.zero_grad();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.records.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let record = &self.records[idx];
            match &record.op {
                Op::Constant => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                op => self.propagate(op, &record.value, &g, &mut grads),
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::WeightedSum { inputs, coeffs } => {
                for (x, c) in inputs.iter().zip(coeffs) {
                    let alpha = self.value(c.var).data()[c.index];
                    let xv = self.value(*x);
                    let dx = Tensor::from_vec(g.rows(), g.cols(), g.data().iter().map(|&u| u * alpha).collect()).unwrap();
                    Self::accumulate(grads, *x, dx);
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(&u, &v)| u.as_f64() * v.as_f64()).sum();
                    let cv = self.value(c.var);
                    let mut dc = Tensor::zeros(cv.rows(), cv.cols());
                    dc.data_mut()[c.index] = T::of(dot);
                    Self::accumulate(grads, c.var, dc);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                let mut dx = Tensor::zeros(n, k);
                let mut dw = Tensor::zeros(k, m);
                let mut db = Tensor::zeros(1, m);
                for r in 0..n {
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    for (c, &gv) in gr.iter().enumerate() {
                        db.data_mut()[c] += gv;
                    }
                    for i in 0..k {
                        let wrow = wv.row(i);
                        let mut acc = T::zero();
                        for c in 0..m {
                            acc += gr[c] * wrow[c];
                        }
                        dx.data_mut()[r * k + i] = acc;
                        let xi = xr[i];
                        let dwrow = &mut dw.data_mut()[i * m..(i + 1) * m];
                        for c in 0..m {
                            dwrow[c] += xi * gr[c];
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *w, dw);
                Self::accumulate(grads, *b, db);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data).unwrap());
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, train } => {
                let (n, m) = g.shape();
                let gamma = self.value(*scale).data();
                let mut dgamma = Tensor::zeros(1, m);
                let mut dbeta = Tensor::zeros(1, m);
                let mut dx = Tensor::zeros(n, m);
                for c in 0..m {
                    let mut sum_g = 0.0f64;
                    let mut sum_gx = 0.0f64;
                    for r in 0..n {
                        let gv = g.get(r, c).as_f64();
                        sum_g += gv;
                        sum_gx += gv * xhat.get(r, c).as_f64();
                    }
                    dbeta.data_mut()[c] = T::of(sum_g);
                    dgamma.data_mut()[c] = T::of(sum_gx);
                    let gm = gamma[c].as_f64();
                    let is = inv_std[c].as_f64();
                    for r in 0..n {
                        let dxhat = g.get(r, c).as_f64() * gm;
                        let v = if *train {
                            // mean and variance depend on every row of the column
                            let nf = n as f64;
                            is / nf * (nf * dxhat - gm * sum_g - xhat.get(r, c).as_f64() * gm * sum_gx)
                        } else {
                            dxhat * is
                        };
                        dx.set(r, c, T::of(v));
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *scale, dgamma);
                Self::accumulate(grads, *shift, dbeta);
            }
            Op::SoftmaxCrossEntropy { logits, probs, target } => {
                let n = probs.rows() as f64;
                let up = g.item().as_f64();
                let data = probs
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| T::of((p.as_f64() - t.as_f64()) / n * up))
                    .collect();
                Self::accumulate(grads, *logits, Tensor::from_vec(probs.rows(), probs.cols(), data).unwrap());
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = g.data().iter().zip(bv.data()).map(|(&u, &v)| u * v).collect();
                let db = g.data().iter().zip(av.data()).map(|(&u, &v)| u * v).collect();
                Self::accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), da).unwrap());
                Self::accumulate(grads, *b, Tensor::from_vec(g.rows(), g.cols(), db).unwrap());
            }
            Op::Scale { x, c } => {
                let d = g.data().iter().map(|&u| u * *c).collect();
                Self::accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                Self::accumulate(grads, *x, Tensor::full(xv.rows(), xv.cols(), g.item()));
            }
            Op::PadCols { x } => {
                let xv = self.value(*x);
                let (n, k) = xv.shape();
                let mut d = Tensor::zeros(n, k);
                for r in 0..n {
                    d.data_mut()[r * k..(r + 1) * k].copy_from_slice(&g.row(r)[..k]);
                }
                debug_assert_eq!(out.rows(), n);
                Self::accumulate(grads, *x, d);
            }
        }
    }
}

/// Adjoints of every recorded value after a backward pass.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `d loss / d v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
