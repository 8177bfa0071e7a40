//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Operations are recorded in execution order; [`Tape::backward`] walks the
//! list in reverse. Leaves created with [`Tape::constant`] never receive a
//! gradient and nothing that depends only on constants is differentiated.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::forward::attention_kernel;
use crate::numerics::{gelu, gelu_grad, layer_norm_into, matmul_transposed, transposed_matmul, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix<S>, rstd: Vec<S> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, mask: Rc<MaskSpec>, heads: usize, probs: Vec<S> },
    Gather { x: Var, rows: Vec<usize> },
    Stack { parts: Vec<(Var, usize)> },
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Matrix<S> },
    SumSquares(Var),
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let r = self.value(row);
        if r.rows() != 1 || r.cols() != self.value(x).cols() {
            return Err(Error::Shape(format!("add_row: {:?} onto {:?}", r.shape(), self.value(x).shape())));
        }
        let mut value = self.value(x).clone();
        let bias = r.data().to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let g = self.needs(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), g))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if self.value(gain).data().len() != c || self.value(bias).data().len() != c {
            return Err(Error::Shape("layer_norm parameter width".into()));
        }
        let ones = vec![S::one(); c];
        let zeros = vec![S::zero(); c];
        let mut xhat = Matrix::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            rstd.push(layer_norm_into(xv.row(r), &ones, &zeros, eps, xhat.row_mut(r)));
            layer_norm_into(xv.row(r), self.value(gain).data(), self.value(bias).data(), eps, out.row_mut(r));
        }
        let g = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, g))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let g = self.needs(&[x]);
        self.push(value, Op::Gelu(x), g)
    }

    /// Masked multi-head attention, numerically identical to the inference
    /// kernel.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Rc<MaskSpec>, heads: usize) -> Result<Var> {
        let nq = self.value(q).rows();
        let nk = self.value(k).rows();
        let mut probs = vec![S::zero(); nq * heads * nk];
        let value = attention_kernel(self.value(q), self.value(k), self.value(v), &mask, heads, &mut 0, |i, h, w| {
            probs[(i * heads + h) * nk..(i * heads + h + 1) * nk].copy_from_slice(w);
        })?;
        let g = self.needs(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, mask, heads, probs }, g))
    }

    pub fn gather(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.value(x).rows()) {
            return Err(Error::Shape(format!("gather row {bad} of {}", self.value(x).rows())));
        }
        let value = self.value(x).select_rows(&rows);
        let g = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, rows }, g))
    }

    /// Row `i` of the result is row `parts[i].1` of `parts[i].0`.
    pub fn stack(&mut self, parts: Vec<(Var, usize)>) -> Result<Var> {
        let cols = parts.first().map_or(0, |(v, _)| self.value(*v).cols());
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &(v, r) in &parts {
            let m = self.value(v);
            if m.cols() != cols || r >= m.rows() {
                return Err(Error::Shape("stack parts disagree".into()));
            }
            data.extend_from_slice(m.row(r));
        }
        let value = Matrix::from_vec(parts.len(), cols, data)?;
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let g = self.needs(&vars);
        Ok(self.push(value, Op::Stack { parts }, g))
    }

    /// `1 × c` mean of the rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        if m.rows() == 0 {
            return Err(Error::Shape("mean of zero rows".into()));
        }
        let mut acc = vec![S::zero(); m.cols()];
        for row in m.row_iter() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = S::from_usize_lossy(m.rows());
        acc.iter_mut().for_each(|a| *a /= n);
        let value = Matrix::from_vec(1, acc.len(), acc)?;
        let g = self.needs(&[x]);
        Ok(self.push(value, Op::MeanRows(x), g))
    }

    /// Mean cross-entropy of `(row, class)` targets; a `1 × 1` result.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        let l = self.value(logits);
        if targets.is_empty() {
            return Err(Error::Shape("cross entropy without targets".into()));
        }
        let mut probs = Matrix::zeros(targets.len(), l.cols());
        let mut loss = S::zero();
        for (t, &(r, c)) in targets.iter().enumerate() {
            if r >= l.rows() || c >= l.cols() {
                return Err(Error::Shape(format!("target ({r}, {c}) outside logits {:?}", l.shape())));
            }
            let row = l.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let p = probs.row_mut(t);
            let mut z = S::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            loss += z.ln() + max - row[c];
        }
        loss /= S::from_usize_lossy(targets.len());
        let g = self.needs(&[logits]);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::CrossEntropy { logits, targets, probs }, g))
    }

    /// Sum of squared entries, `1 × 1`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<S>();
        let g = self.needs(&[x]);
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(x), g)
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Grads<S>> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::filled(1, 1, S::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) -> Result<()> {
        let mut acc = |v: Var, d: Matrix<S>| -> Result<()> {
            if !self.nodes[v.0].grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(m) => m.add_assign(&d),
                slot => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].grad {
                    acc(*a, matmul_transposed(g, self.value(*b))?)?;
                }
                if self.nodes[b.0].grad {
                    acc(*b, transposed_matmul(self.value(*a), g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone())?;
                acc(*row, column_sums(g))?;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, c) = g.shape();
                let gv = self.value(*gain).data();
                let mut dx = Matrix::zeros(n, c);
                let mut dgain = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                let cn = S::from_usize_lossy(c);
                for (r, &rs) in rstd.iter().enumerate().take(n) {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..c {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 /= cn;
                    m2 /= cn;
                    let out = dx.row_mut(r);
                    for j in 0..c {
                        out[j] = rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                    }
                }
                acc(*x, dx)?;
                acc(*gain, Matrix::from_vec(1, c, dgain)?)?;
                acc(*bias, Matrix::from_vec(1, c, dbias)?)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g.data().iter().zip(xv.data()).map(|(&d, &v)| d * gelu_grad(v)).collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?)?;
            }
            Op::Attention { q, k, v, mask, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = qv.shape();
                let nk = kv.rows();
                let dk = d / heads;
                let scale = S::one() / S::from_usize_lossy(dk).sqrt();
                let mut dq = Matrix::zeros(nq, d);
                let mut dkm = Matrix::zeros(nk, d);
                let mut dv = Matrix::zeros(nk, d);
                let mut dp = vec![S::zero(); nk];
                for i in 0..nq {
                    let allow = mask.row(i);
                    for h in 0..*heads {
                        let span = h * dk..(h + 1) * dk;
                        let p = &probs[(i * heads + h) * nk..(i * heads + h + 1) * nk];
                        let go = &g.row(i)[span.clone()];
                        let mut inner = S::zero();
                        for j in 0..nk {
                            if !allow[j] {
                                continue;
                            }
                            let vj = &vv.row(j)[span.clone()];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<S>();
                            inner += p[j] * dp[j];
                            for (o, &gg) in dv.row_mut(j)[span.clone()].iter_mut().zip(go) {
                                *o += p[j] * gg;
                            }
                        }
                        for j in 0..nk {
                            if !allow[j] {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - inner) * scale;
                            if ds == S::zero() {
                                continue;
                            }
                            let kj = &kv.row(j)[span.clone()];
                            for (o, &kk) in dq.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                                *o += ds * kk;
                            }
                            let qi = &qv.row(i)[span.clone()];
                            for (o, &qq) in dkm.row_mut(j)[span.clone()].iter_mut().zip(qi) {
                                *o += ds * qq;
                            }
                        }
                    }
                }
                acc(*q, dq)?;
                acc(*k, dkm)?;
                acc(*v, dv)?;
            }
            Op::Gather { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &d) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += d;
                    }
                }
                acc(*x, dx)?;
            }
            Op::Stack { parts } => {
                let mut by_var: Vec<(Var, Matrix<S>)> = Vec::new();
                for (i, &(v, r)) in parts.iter().enumerate() {
                    if !self.nodes[v.0].grad {
                        continue;
                    }
                    let pos = match by_var.iter().position(|(u, _)| *u == v) {
                        Some(p) => p,
                        None => {
                            let m = self.value(v);
                            by_var.push((v, Matrix::zeros(m.rows(), m.cols())));
                            by_var.len() - 1
                        }
                    };
                    for (o, &d) in by_var[pos].1.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += d;
                    }
                }
                for (v, d) in by_var {
                    acc(v, d)?;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = S::from_usize_lossy(xv.rows());
                let row: Vec<S> = g.row(0).iter().map(|&d| d / n).collect();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r).copy_from_slice(&row);
                }
                acc(*x, dx)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let scale = g.get(0, 0) / S::from_usize_lossy(targets.len());
                let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                for (t, &(r, c)) in targets.iter().enumerate() {
                    let out = dl.row_mut(r);
                    for (o, &p) in out.iter_mut().zip(probs.row(t)) {
                        *o += p * scale;
                    }
                    out[c] -= scale;
                }
                acc(*logits, dl)?;
            }
            Op::SumSquares(x) => {
                let two = S::lit(2.0) * g.get(0, 0);
                acc(*x, self.value(*x).map(|v| two * v))?;
            }
        }
        Ok(())
    }
}

fn column_sums<S: Scalar>(g: &Matrix<S>) -> Matrix<S> {
    let mut out = vec![S::zero(); g.cols()];
    for row in g.row_iter() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Matrix::from_vec(1, g.cols(), out).expect("sized")
}

pub struct Grads<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of `v`, or `None` when `v` is a constant or unreachable.
    pub fn get(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` around every entry of `x`.
    fn numeric(x: &Matrix<f64>, f: &dyn Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn linear_layer_quadratic_loss_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(3, 4, &mut rng);
        let w = rand_matrix(4, 2, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.leaf(w.clone());
        let y = t.matmul(xv, wv).unwrap();
        let loss = t.sum_squares(y);
        let g = t.backward(loss).unwrap();
        // d/dW ‖XW‖² = 2·Xᵀ·X·W
        let closed = transposed_matmul(&x, &x.matmul(&w).unwrap()).unwrap().scale(2.0);
        assert!(g.get(wv).unwrap().max_abs_diff(&closed).unwrap() <= 1e-12);
        assert!(g.get(xv).is_none());
    }

    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_matrix(4, 6, &mut rng);
        let w0 = rand_matrix(6, 6, &mut rng);
        let gain0 = rand_matrix(1, 6, &mut rng);
        let mask = Rc::new(MaskSpec::causal(4));
        let build = |x: &Matrix<f64>, w: &Matrix<f64>, gain: &Matrix<f64>| {
            let mut t = Tape::new();
            let (xv, wv, gv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(gain.clone()));
            let bv = t.constant(Matrix::zeros(1, 6));
            let h = t.layer_norm(xv, gv, bv, 1e-5).unwrap();
            let q = t.matmul(h, wv).unwrap();
            let a = t.attention(q, h, xv, mask.clone(), 2).unwrap();
            let s = t.gelu(a);
            let m = t.mean_rows(s).unwrap();
            let st = t.stack(vec![(s, 3), (m, 0), (xv, 1)]).unwrap();
            let r = t.add_row(st, m).unwrap();
            let gth = t.gather(r, vec![2, 0, 2]).unwrap();
            let ce = t.cross_entropy(gth, vec![(0, 1), (1, 4), (2, 5)]).unwrap();
            (t, ce, xv, wv, gv)
        };
        let (t, ce, xv, wv, gv) = build(&x0, &w0, &gain0);
        let g = t.backward(ce).unwrap();
        let fx = |x: &Matrix<f64>| {
            let (t, ce, ..) = build(x, &w0, &gain0);
            t.value(ce).get(0, 0)
        };
        let fw = |w: &Matrix<f64>| {
            let (t, ce, ..) = build(&x0, w, &gain0);
            t.value(ce).get(0, 0)
        };
        let fg = |gain: &Matrix<f64>| {
            let (t, ce, ..) = build(&x0, &w0, gain);
            t.value(ce).get(0, 0)
        };
        for (var, num) in [(xv, numeric(&x0, &fx)), (wv, numeric(&w0, &fw)), (gv, numeric(&gain0, &fg))] {
            let diff = g.get(var).unwrap().max_abs_diff(&num).unwrap();
            assert!(diff < 1e-8, "{diff}");
        }
    }
}
