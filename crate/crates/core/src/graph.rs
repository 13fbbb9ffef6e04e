//! Reverse-mode autodiff over a flat tape of 2-D tensors.
//!
//! Every forward op appends a node with its eagerly computed value;
//! `backward` walks the tape once in reverse accumulating gradients.
//! The op set is exactly what the transformer, its two pretraining
//! losses, and the fine-tuning head need. Values are f64 throughout so
//! central finite differences can pin every backward rule to ~1e-10.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Index into the gradient vector returned by [`Tape::backward`].
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[m,n] + [1,n]`, the bias broadcast.
    AddRow(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Copy of `base` with `rows[i]` written at row `indices[i]`.
    ScatterRowsReplace {
        base: Var,
        rows: Var,
        indices: Vec<usize>,
    },
    /// `[1,n]` repeated to `[m,n]`.
    TileRows(Var, usize),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        offset: Var,
        eps: f64,
    },
    SumAll(Var),
    Sigmoid(Var),
    /// Binary cross-entropy of `sigmoid(z)` against a fixed 0/1 target,
    /// in the numerically stable logits form.
    BceWithLogits { z: Var, y: f64 },
    /// Mean softmax cross-entropy over rows against fixed class labels.
    CrossEntropyRows { logits: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list. One tape per forward/backward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    fn view(t: &Tensor) -> (usize, usize) {
        (t.rows(), t.cols())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(Self::view(self.value(a)), Self::view(self.value(b)));
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(Self::view(self.value(a)), Self::view(self.value(b)));
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::from_vec(self.value(a).dims(), data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(Self::view(self.value(a)), Self::view(self.value(b)));
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::from_vec(self.value(a).dims(), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_in_place(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let n = self.value(a).cols();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.value(row).data()[i % n])
            .collect();
        let v = Tensor::from_vec(self.value(a).dims(), data);
        self.push(v, Op::AddRow(a, row))
    }

    /// x @ w + b, the ubiquitous affine layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let t = self.value(a);
        assert!(lo < hi && hi <= t.cols());
        let m = t.rows();
        let mut out = Tensor::zeros(&[m, hi - lo]);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&t.row(r)[lo..hi]);
        }
        self.push(out, Op::SliceCols(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[m, total]);
        for r in 0..m {
            let mut at = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), m);
                out.row_mut(r)[at..at + t.cols()].copy_from_slice(t.row(r));
                at += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(&[total, n]);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n);
            for r in 0..t.rows() {
                out.row_mut(at + r).copy_from_slice(t.row(r));
            }
            at += t.rows();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        assert!(indices.iter().all(|&i| i < t.rows()));
        let mut out = Tensor::zeros(&[indices.len(), t.cols()]);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn scatter_rows_replace(&mut self, base: Var, rows: Var, indices: &[usize]) -> Var {
        let b = self.value(base);
        let r = self.value(rows);
        assert_eq!(b.cols(), r.cols());
        assert_eq!(r.rows(), indices.len());
        assert!(indices.iter().all(|&i| i < b.rows()));
        let mut out = b.clone();
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(rows).row(k));
        }
        self.push(
            out,
            Op::ScatterRowsReplace {
                base,
                rows,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn tile_rows(&mut self, a: Var, m: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1);
        let n = t.cols();
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&self.value(a).data()[..n]);
        }
        self.push(out, Op::TileRows(a, m))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let v = Tensor::from_vec(self.value(a).dims(), data);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = t.cols();
        assert_eq!(self.value(gain).len(), n);
        assert_eq!(self.value(offset).len(), n);
        let mut out = t.clone();
        for r in 0..out.rows() {
            let (mu, sigma) = row_moments(self.value(x).row(r), eps);
            let g = self.value(gain).data();
            let o = self.value(offset).data();
            let src = self.value(x).row(r).to_vec();
            let row = out.row_mut(r);
            for c in 0..n {
                row[c] = (src[c] - mu) / sigma * g[c] + o[c];
            }
        }
        self.push(out, Op::LayerNormRows { x, gain, offset, eps })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::matrix(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let v = Tensor::from_vec(self.value(a).dims(), data);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn bce_with_logits(&mut self, z: Var, y: f64) -> Var {
        assert_eq!(self.value(z).len(), 1);
        let zv = self.value(z).data()[0];
        let loss = zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p();
        self.push(Tensor::matrix(1, 1, vec![loss]), Op::BceWithLogits { z, y })
    }

    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), labels.len());
        assert!(labels.iter().all(|&l| l < t.cols()));
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label];
        }
        loss /= labels.len() as f64;
        self.push(
            Tensor::matrix(1, 1, vec![loss]),
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Gradients of a scalar node with respect to every tape node.
    /// Unreached nodes get `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::matrix(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(acc) => acc.add_in_place(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let bt = self.value(*b).transpose();
                add_to(grads, *a, reshape_like(g.matmul(&bt), self.value(*a)));
                let at = self.value(*a).transpose();
                add_to(grads, *b, reshape_like(at.matmul(g), self.value(*b)));
            }
            Op::Transpose(a) => add_to(grads, *a, reshape_like(g.transpose(), self.value(*a))),
            Op::Add(a, b) => {
                add_to(grads, *a, reshape_like(g.clone(), self.value(*a)));
                add_to(grads, *b, reshape_like(g.clone(), self.value(*b)));
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, reshape_like(g.clone(), self.value(*a)));
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                add_to(grads, *b, reshape_like(neg, self.value(*b)));
            }
            Op::Mul(a, b) => {
                let da = elementwise(g, self.value(*b), |x, y| x * y);
                let db = elementwise(g, self.value(*a), |x, y| x * y);
                add_to(grads, *a, reshape_like(da, self.value(*a)));
                add_to(grads, *b, reshape_like(db, self.value(*b)));
            }
            Op::Scale(a, c) => {
                let mut d = g.clone();
                d.scale_in_place(*c);
                add_to(grads, *a, reshape_like(d, self.value(*a)));
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, reshape_like(g.clone(), self.value(*a)));
                let n = self.value(*row).cols();
                let mut sums = vec![0.0; n];
                for r in 0..g.rows() {
                    for (s, v) in sums.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                add_to(
                    grads,
                    *row,
                    reshape_like(Tensor::matrix(1, n, sums), self.value(*row)),
                );
            }
            Op::SliceCols(a, lo, _hi) => {
                let t = self.value(*a);
                let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                for r in 0..g.rows() {
                    d.row_mut(r)[*lo..*lo + g.cols()].copy_from_slice(g.row(r));
                }
                add_to(grads, *a, reshape_like(d, t));
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let t = self.value(p);
                    let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                    for r in 0..t.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[at..at + t.cols()]);
                    }
                    at += t.cols();
                    add_to(grads, p, reshape_like(d, t));
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let t = self.value(p);
                    let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                    for r in 0..t.rows() {
                        d.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    at += t.rows();
                    add_to(grads, p, reshape_like(d, t));
                }
            }
            Op::GatherRows(a, indices) => {
                let t = self.value(*a);
                let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                for (r, &src) in indices.iter().enumerate() {
                    for (acc, v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                add_to(grads, *a, reshape_like(d, t));
            }
            Op::ScatterRowsReplace { base, rows, indices } => {
                let mut dbase = g.clone();
                let mut drows = Tensor::zeros(&[indices.len(), g.cols()]);
                for (k, &i) in indices.iter().enumerate() {
                    drows.row_mut(k).copy_from_slice(g.row(i));
                    for v in dbase.row_mut(i) {
                        *v = 0.0;
                    }
                }
                add_to(grads, *base, reshape_like(dbase, self.value(*base)));
                add_to(grads, *rows, reshape_like(drows, self.value(*rows)));
            }
            Op::TileRows(a, _m) => {
                let n = self.value(*a).cols();
                let mut sums = vec![0.0; n];
                for r in 0..g.rows() {
                    for (s, v) in sums.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                add_to(
                    grads,
                    *a,
                    reshape_like(Tensor::matrix(1, n, sums), self.value(*a)),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(&[y.rows(), y.cols()]);
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, v)| x * v).sum();
                    let gr = g.row(r).to_vec();
                    let yr = y.row(r).to_vec();
                    for (c, slot) in d.row_mut(r).iter_mut().enumerate() {
                        *slot = yr[c] * (gr[c] - dot);
                    }
                }
                add_to(grads, *a, reshape_like(d, self.value(*a)));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                add_to(grads, *a, Tensor::from_vec(x.dims(), data));
            }
            Op::LayerNormRows { x, gain, offset, eps } => {
                let xt = self.value(*x);
                let n = xt.cols() as f64;
                let gaint = self.value(*gain).data().to_vec();
                let mut dx = Tensor::zeros(&[xt.rows(), xt.cols()]);
                let mut dgain = vec![0.0; xt.cols()];
                let mut doffset = vec![0.0; xt.cols()];
                for r in 0..xt.rows() {
                    let (mu, sigma) = row_moments(xt.row(r), *eps);
                    let xhat: Vec<f64> = xt.row(r).iter().map(|&v| (v - mu) / sigma).collect();
                    let gr = g.row(r);
                    let h: Vec<f64> = gr.iter().zip(&gaint).map(|(a, b)| a * b).collect();
                    let mean_h: f64 = h.iter().sum::<f64>() / n;
                    let mean_hx: f64 =
                        h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xt.cols() {
                        dgain[c] += gr[c] * xhat[c];
                        doffset[c] += gr[c];
                        dx.set(r, c, (h[c] - mean_h - xhat[c] * mean_hx) / sigma);
                    }
                }
                add_to(grads, *x, reshape_like(dx, xt));
                add_to(
                    grads,
                    *gain,
                    reshape_like(Tensor::vector(dgain), self.value(*gain)),
                );
                add_to(
                    grads,
                    *offset,
                    reshape_like(Tensor::vector(doffset), self.value(*offset)),
                );
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                let s = g.data()[0];
                add_to(grads, *a, Tensor::from_vec(t.dims(), vec![s; t.len()]));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                add_to(grads, *a, Tensor::from_vec(self.value(*a).dims(), data));
            }
            Op::BceWithLogits { z, y } => {
                let zv = self.value(*z).data()[0];
                let p = 1.0 / (1.0 + (-zv).exp());
                let d = (p - y) * g.data()[0];
                add_to(
                    grads,
                    *z,
                    Tensor::from_vec(self.value(*z).dims(), vec![d]),
                );
            }
            Op::CrossEntropyRows { logits, labels } => {
                let t = self.value(*logits);
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                for (r, &label) in labels.iter().enumerate() {
                    let row = t.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    let src = row.to_vec();
                    for (c, slot) in d.row_mut(r).iter_mut().enumerate() {
                        let soft = (src[c] - max).exp() / sum;
                        *slot = scale * (soft - if c == label { 1.0 } else { 0.0 });
                    }
                }
                add_to(grads, *logits, reshape_like(d, t));
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

/// Gradients must come back with the same dims (1-D vs 2-D) as the value
/// they differentiate, so parameter stores can consume them directly.
fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    if t.dims() == like.dims() {
        t
    } else {
        Tensor::from_vec(like.dims(), t.into_data())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.dims(), data)
}
