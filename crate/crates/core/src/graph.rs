//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value; [`Graph::backward`] walks the nodes in
//! reverse and returns the gradient of a scalar with respect to every node
//! that depends on a parameter or variable. Gradients reaching a
//! parameter are added into its grad buffer by [`Graph::backward_into`].
//!
//! Reductions in both directions run in a fixed index order (ascending rows,
//! then part order for scatters), so results are independent of threading.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    MeanTokens(Var),
    SumRows(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    GatherEntries { x: Var, entries: Vec<(usize, usize)> },
    ScaleRows { x: Var, s: Var },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    CvSquared(Var),
    LoadProbs { clean: Var, noisy: Var, sigma: f64, thresholds: Vec<Option<usize>> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of one scalar with respect to the nodes of a [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rows_of(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!(
            "{op} expects a rank-2 tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// `k`-th largest entry of `row` excluding position `skip`; ties go to the
/// lower index.
fn kth_largest_excluding(row: &[f64], skip: usize, k: usize) -> Option<usize> {
    let mut others: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    if k == 0 || k > others.len() {
        return None;
    }
    others.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Some(others[k - 1])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let mut value = t.clone();
        value.clear_grad();
        self.nodes.push(Node {
            needs_grad: t.requires_grad(),
            value,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Affine map along the last axis: `x[..., Din] @ w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let (din, dout) = rows_of(wv, "linear weight")?;
        if xv.last_dim() != din {
            return Err(Error::shape(format!(
                "linear: input {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let rows = xv.len() / din;
        let mut out = tensor::matmul(xv.data(), wv.data(), rows, din, dout);
        if let Some(b) = b {
            let bv = self.val(b);
            if bv.shape() != [dout] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} for output width {dout}",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose_last_two(self.val(x))?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.val(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu(v)).collect());
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let c = xv.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm: input {:?} with gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.val(x))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Mean over the token axis: `[B, S, C] -> [B, C]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        if xv.rank() != 3 {
            return Err(Error::shape(format!("mean_tokens expects [B,S,C], got {:?}", xv.shape())));
        }
        let (b, s, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for si in 0..s {
                let row = &xv.data()[(bi * s + si) * c..(bi * s + si + 1) * c];
                for (a, v) in o.iter_mut().zip(row) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a /= s as f64);
        }
        self.push("mean_tokens", Tensor::from_parts(vec![b, c], out), Op::MeanTokens(x), &[x])
    }

    /// Column sums of a `[M, N]` matrix.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let (_, n) = rows_of(xv, "sum_rows")?;
        let mut out = vec![0.0; n];
        for row in xv.data().chunks(n) {
            for (a, v) in out.iter_mut().zip(row) {
                *a += v;
            }
        }
        self.push("sum_rows", Tensor::from_parts(vec![n], out), Op::SumRows(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        let (m, d) = rows_of(xv, "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape(format!("gather_rows: bad row list for {m} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![rows.len(), d], out);
        self.push("gather_rows", out, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn gather_entries(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let xv = self.val(x);
        let (m, n) = rows_of(xv, "gather_entries")?;
        if entries.is_empty() || entries.iter().any(|&(r, c)| r >= m || c >= n) {
            return Err(Error::shape("gather_entries: bad entry list"));
        }
        let out: Vec<f64> = entries.iter().map(|&(r, c)| xv.data()[r * n + c]).collect();
        let out = Tensor::from_parts(vec![entries.len()], out);
        self.push("gather_entries", out, Op::GatherEntries { x, entries: entries.to_vec() }, &[x])
    }

    /// `y[r, :] = s[r] * x[r, :]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.val(x), self.val(s));
        let (m, d) = rows_of(xv, "scale_rows")?;
        if sv.shape() != [m] {
            return Err(Error::shape(format!("scale_rows: {:?} by {:?}", xv.shape(), sv.shape())));
        }
        let mut out = xv.data().to_vec();
        for (row, &f) in out.chunks_mut(d).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::from_parts(vec![m, d], out);
        self.push("scale_rows", out, Op::ScaleRows { x, s }, &[x, s])
    }

    /// Sums each part's rows into the listed rows of a zero `[rows, D]`
    /// matrix, visiting parts in the order given.
    pub fn scatter_rows(&mut self, rows: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let d = match parts.first() {
            Some((v, _)) => self.val(*v).last_dim(),
            None => return Err(Error::shape("scatter_rows with no parts")),
        };
        let mut out = vec![0.0; rows * d];
        for (v, idx) in &parts {
            let pv = self.val(*v);
            if pv.shape() != [idx.len(), d] || idx.iter().any(|&r| r >= rows) {
                return Err(Error::shape(format!(
                    "scatter_rows: part {:?} with {} indices into {rows}x{d}",
                    pv.shape(),
                    idx.len()
                )));
            }
            for (src, &r) in pv.data().chunks(d).zip(idx) {
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let out = Tensor::from_parts(vec![rows, d], out);
        self.push("scatter_rows", out, Op::ScatterRows { parts }, &inputs)
    }

    /// `(std(v) / mean(v))^2` of a vector, population std; 0 when the mean is 0.
    pub fn cv_squared(&mut self, v: Var) -> Result<Var> {
        let vv = self.val(v);
        if vv.rank() != 1 {
            return Err(Error::shape(format!("cv_squared expects a vector, got {:?}", vv.shape())));
        }
        let out = tensor::cv_squared(vv.data());
        self.push("cv_squared", Tensor::scalar(out), Op::CvSquared(v), &[v])
    }

    /// Smooth probability that each expert stays in the top `k` when its own
    /// gate noise is redrawn: `Phi((clean[m,i] - T) / sigma)` with `T` the
    /// `k`-th largest noisy logit among the other experts. Experts with fewer
    /// than `k` competitors are always selected (probability 1).
    pub fn load_probs(&mut self, clean: Var, noisy: Var, k: usize, sigma: f64) -> Result<Var> {
        let (cv, nv) = (self.val(clean), self.val(noisy));
        same_shape("load_probs", cv, nv)?;
        let (m, n) = rows_of(cv, "load_probs")?;
        let mut thresholds = Vec::with_capacity(m * n);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let noisy_row = &nv.data()[r * n..(r + 1) * n];
            for i in 0..n {
                let t = kth_largest_excluding(noisy_row, i, k);
                out[r * n + i] = match t {
                    Some(j) => normal_cdf((cv.data()[r * n + i] - noisy_row[j]) / sigma),
                    None => 1.0,
                };
                thresholds.push(t);
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        self.push(
            "load_probs",
            out,
            Op::LoadProbs { clean, noisy, sigma, thresholds },
            &[clean, noisy],
        )
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.val(logits);
        let (b, k) = rows_of(lv, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Input(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut total = 0.0;
        for (row, &l) in lv.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let out = Tensor::scalar(total / b as f64);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                if let Some(t) = store.get_mut(name) {
                    if t.requires_grad() {
                        t.accumulate_grad(g);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                if self.needs(*x) {
                    accumulate(grads, *x, tensor::matmul_bt(g, wv.data(), rows, din, dout));
                }
                if self.needs(*w) {
                    accumulate(grads, *w, tensor::matmul_at(xv.data(), g, rows, din, dout));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let r = out.rank();
                    let (a, b) = (out.shape()[r - 2], out.shape()[r - 1]);
                    accumulate(grads, *x, tensor::transpose_batched(g, a, b));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(p, q)| p * q).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(p, q)| p * q).collect());
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, vec![g[0]; self.val(*x).len()]);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xv = self.val(*x).data();
                    accumulate(grads, *x, g.iter().zip(xv).map(|(gv, &v)| gv * gelu_grad(v)).collect());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.val(*gamma).data();
                let c = gv.len();
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; c];
                    for grow in g.chunks(c) {
                        for (a, v) in db.iter_mut().zip(grow) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let n = out.last_dim();
                    let mut dx = vec![0.0; g.len()];
                    for ((yrow, grow), drow) in out.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MeanTokens(x) => {
                if self.needs(*x) {
                    let xs = self.val(*x).shape();
                    let (b, s, c) = (xs[0], xs[1], xs[2]);
                    let mut dx = vec![0.0; b * s * c];
                    for bi in 0..b {
                        for si in 0..s {
                            for ci in 0..c {
                                dx[(bi * s + si) * c + ci] = g[bi * c + ci] / s as f64;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumRows(x) => {
                if self.needs(*x) {
                    let m = self.val(*x).shape()[0];
                    accumulate(grads, *x, g.repeat(m));
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let xv = self.val(*x);
                    let d = xv.last_dim();
                    let mut dx = vec![0.0; xv.len()];
                    for (src, &r) in g.chunks(d).zip(rows) {
                        for (a, v) in dx[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GatherEntries { x, entries } => {
                if self.needs(*x) {
                    let xv = self.val(*x);
                    let n = xv.last_dim();
                    let mut dx = vec![0.0; xv.len()];
                    for (gv, &(r, c)) in g.iter().zip(entries) {
                        dx[r * n + c] += gv;
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (self.val(*x), self.val(*s));
                let d = xv.last_dim();
                if self.needs(*x) {
                    let mut dx = g.to_vec();
                    for (row, &f) in dx.chunks_mut(d).zip(sv.data()) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*s) {
                    let ds = g
                        .chunks(d)
                        .zip(xv.data().chunks(d))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    accumulate(grads, *s, ds);
                }
            }
            Op::ScatterRows { parts } => {
                let d = out.last_dim();
                for (v, idx) in parts {
                    if self.needs(*v) {
                        let mut dp = Vec::with_capacity(idx.len() * d);
                        for &r in idx {
                            dp.extend_from_slice(&g[r * d..(r + 1) * d]);
                        }
                        accumulate(grads, *v, dp);
                    }
                }
            }
            Op::CvSquared(v) => {
                if self.needs(*v) {
                    let vv = self.val(*v).data();
                    let n = vv.len() as f64;
                    let (mean, std) = tensor::moments_population(vv);
                    let dv = if mean == 0.0 {
                        vec![0.0; vv.len()]
                    } else {
                        let var = std * std;
                        vv.iter()
                            .map(|&x| {
                                g[0] * (2.0 * (x - mean) / (n * mean * mean)
                                    - 2.0 * var / (n * mean * mean * mean))
                            })
                            .collect()
                    };
                    accumulate(grads, *v, dv);
                }
            }
            Op::LoadProbs { clean, noisy, sigma, thresholds } => {
                let (cv, nv) = (self.val(*clean), self.val(*noisy));
                let n = cv.last_dim();
                let mut dc = vec![0.0; cv.len()];
                let mut dn = vec![0.0; nv.len()];
                for (pos, t) in thresholds.iter().enumerate() {
                    if let Some(j) = *t {
                        let r = pos / n;
                        let z = (cv.data()[pos] - nv.data()[r * n + j]) / sigma;
                        let d = g[pos] * normal_pdf(z) / sigma;
                        dc[pos] += d;
                        dn[r * n + j] -= d;
                    }
                }
                if self.needs(*clean) {
                    accumulate(grads, *clean, dc);
                }
                if self.needs(*noisy) {
                    accumulate(grads, *noisy, dn);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let lv = self.val(*logits);
                    let k = lv.last_dim();
                    let b = labels.len() as f64;
                    let mut dl = lv.data().to_vec();
                    for (row, &l) in dl.chunks_mut(k).zip(labels) {
                        tensor::softmax_in_place(row);
                        row[l] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= g[0] / b);
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}
