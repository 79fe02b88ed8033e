//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so a reverse sweep over node
//! indices is a valid (and deterministic) topological order for
//! backpropagation. Parameters enter through [`Graph::param`], which copies
//! the current value out of a [`ParamStore`]; [`backward`] writes the
//! resulting gradients back into the same store by name.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a `[m]` row over every row of an `[n×m]` matrix.
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Pick(Var, usize),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..r {
        let row = &mut data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..r {
        let row = &mut data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_row(op: &'static str, x: &Tensor, row: &Tensor) -> Result<()> {
    let (_, c) = x.dims2()?;
    let (rr, rc) = row.dims2()?;
    if rr != 1 || rc != c {
        return Err(Error::Dimension {
            op,
            lhs: x.shape().to_vec(),
            rhs: row.shape().to_vec(),
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// A constant input; receives no gradient outside the graph.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter from `store`. Repeated loads of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        check_row("add_row", self.value(x), self.value(row))?;
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone().reshape(vec![r, c])?;
        let b = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &bi) in chunk.iter_mut().zip(b) {
                *o += bi;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        check_row("mul_row", self.value(x), self.value(row))?;
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone().reshape(vec![r, c])?;
        let g = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &gi) in chunk.iter_mut().zip(g) {
                *o *= gi;
            }
        }
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    /// Sum of equally shaped operands.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_n of no operands".into()))?;
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            check_same("add_n", &out, self.value(x))?;
            out.add_assign(self.value(x));
        }
        Ok(self.push(out, Op::AddN(xs.to_vec())))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Ln(x))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("minimum", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f64::min);
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = log_softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::LogSoftmaxRows(x)))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map: `gain ⊙ (x - μ)/√(σ² + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        check_row("layer_norm", self.value(x), self.value(gain))?;
        check_row("layer_norm", self.value(x), self.value(bias))?;
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let xhat = Tensor::new(vec![r, c], xhat)?;
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                chunk[j] = chunk[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows `start..start+len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::Contract(format!(
                "row slice {start}..{} out of {r}",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of {c}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of no operands".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, cx) = self.value(x).dims2()?;
            if cx != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of no operands".into()))?;
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.value(x).dims2()?;
            if rx != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    /// Flat element `index` as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::Contract(format!("pick index {index} out of {n}")));
        }
        let out = Tensor::scalar(self.value(x).data()[index]);
        Ok(self.push(out, Op::Pick(x, index)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(x))
    }

    /// `x·W + b` for `x: [n×in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Row-wise `γ ⊙ e + β` applied identically to every row of `e`.
    pub fn film(&mut self, e: Var, gamma: Var, beta: Var) -> Result<Var> {
        let scaled = self.mul_row(e, gamma)?;
        self.add_row(scaled, beta)
    }

    /// Reverse sweep from `loss`, returning the gradient of every node.
    fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &gout)?;
            for (var, g) in contributions {
                accumulate(&mut grads[var.0], g, self.value(var).shape())?;
            }
            // Keep leaf gradients for the caller.
            if matches!(node.op, Op::Param | Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        Ok(grads)
    }

    fn local_grads(&self, node: &Node, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let v = |x: Var| self.value(x);
        Ok(match &node.op {
            Op::Leaf | Op::Param => Vec::new(),
            Op::MatMul(a, b) => vec![(*a, gout.matmul_nt(v(*b))?), (*b, v(*a).matmul_tn(gout)?)],
            Op::MatMulNT(a, b) => vec![
                // out = a·bᵀ: da = gout·b, db = goutᵀ·a
                (*a, gout.matmul(v(*b))?),
                (*b, gout.matmul_tn(v(*a))?),
            ],
            Op::Transpose(a) => vec![(*a, gout.transpose()?)],
            Op::Add(a, b) => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::Sub(a, b) => vec![(*a, gout.clone()), (*b, gout.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, gout.zip_map(v(*b), |g, y| g * y)),
                (*b, gout.zip_map(v(*a), |g, x| g * x)),
            ],
            Op::AddRow(x, row) => {
                let c = gout.cols();
                let mut rg = vec![0.0; c];
                for chunk in gout.data().chunks(c) {
                    for (r, &g) in rg.iter_mut().zip(chunk) {
                        *r += g;
                    }
                }
                vec![(*x, gout.clone()), (*row, Tensor::vector(rg))]
            }
            Op::MulRow(x, row) => {
                let c = gout.cols();
                let xv = v(*x).data();
                let rv = v(*row).data();
                let mut gx = gout.clone();
                let mut rg = vec![0.0; c];
                for (i, chunk) in gx.data_mut().chunks_mut(c).enumerate() {
                    for j in 0..c {
                        rg[j] += chunk[j] * xv[i * c + j];
                        chunk[j] *= rv[j];
                    }
                }
                vec![(*x, gx), (*row, Tensor::vector(rg))]
            }
            Op::AddN(xs) => xs.iter().map(|&x| (x, gout.clone())).collect(),
            Op::Scale(x, k) => vec![(*x, gout.map(|g| g * k))],
            Op::AddScalar(x) => vec![(*x, gout.clone())],
            Op::Gelu(x) => vec![(*x, gout.zip_map(v(*x), |g, xi| g * gelu_grad(xi)))],
            Op::Exp(x) => vec![(*x, gout.zip_map(&node.value, |g, y| g * y))],
            Op::Ln(x) => vec![(*x, gout.zip_map(v(*x), |g, xi| g / xi))],
            Op::Clamp(x, lo, hi) => vec![(
                *x,
                gout.zip_map(v(*x), |g, xi| if xi < *lo || xi > *hi { 0.0 } else { g }),
            )],
            Op::Minimum(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let mask: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| x <= y)
                    .collect();
                let mut ga = gout.clone();
                let mut gb = gout.clone();
                for ((ga, gb), &m) in ga.data_mut().iter_mut().zip(gb.data_mut()).zip(&mask) {
                    if m {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SoftmaxRows(x) => {
                // dx = y ⊙ (g - Σ g⊙y)
                let y = &node.value;
                let c = y.cols();
                let mut gx = gout.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(c).enumerate() {
                    let yr = y.row(i);
                    let dot: f64 = chunk.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (g, &yi) in chunk.iter_mut().zip(yr) {
                        *g = yi * (*g - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmaxRows(x) => {
                // dx = g - softmax ⊙ Σ g
                let y = &node.value;
                let c = y.cols();
                let mut gx = gout.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(c).enumerate() {
                    let total: f64 = chunk.iter().sum();
                    for (g, &lp) in chunk.iter_mut().zip(y.row(i)) {
                        *g -= lp.exp() * total;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = xhat.cols();
                let gv = v(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = gout.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(c).enumerate() {
                    let xh = xhat.row(i);
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..c {
                        dgain[j] += chunk[j] * xh[j];
                        dbias[j] += chunk[j];
                        let gh = chunk[j] * gv[j];
                        mean_g += gh;
                        mean_gx += gh * xh[j];
                    }
                    mean_g /= c as f64;
                    mean_gx /= c as f64;
                    for j in 0..c {
                        let gh = chunk[j] * gv[j];
                        chunk[j] = inv_std[i] * (gh - mean_g - xh[j] * mean_gx);
                    }
                }
                vec![
                    (*x, dx),
                    (*gain, Tensor::vector(dgain)),
                    (*bias, Tensor::vector(dbias)),
                ]
            }
            Op::SliceRows(x, start) => {
                let (r, c) = v(*x).dims2()?;
                let mut g = vec![0.0; r * c];
                g[start * c..start * c + gout.len()].copy_from_slice(gout.data());
                vec![(*x, Tensor::new(vec![r, c], g)?)]
            }
            Op::SliceCols(x, start) => {
                let (r, c) = v(*x).dims2()?;
                let w = gout.cols();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + w].copy_from_slice(gout.row(i));
                }
                vec![(*x, Tensor::new(vec![r, c], g)?)]
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let n = v(x).len();
                    let g = Tensor::new(
                        v(x).shape().to_vec(),
                        gout.data()[offset..offset + n].to_vec(),
                    )?;
                    offset += n;
                    out.push((x, g));
                }
                out
            }
            Op::ConcatCols(xs) => {
                let total = gout.cols();
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let (r, w) = v(x).dims2()?;
                    let mut g = Vec::with_capacity(r * w);
                    for i in 0..r {
                        g.extend_from_slice(&gout.data()[i * total + start..i * total + start + w]);
                    }
                    start += w;
                    out.push((x, Tensor::new(v(x).shape().to_vec(), g)?));
                }
                out
            }
            Op::Pick(x, index) => {
                let mut g = Tensor::zeros(v(*x).shape());
                g.data_mut()[*index] = gout.item()?;
                vec![(*x, g)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(v(*x).shape(), gout.item()?))],
            Op::Mean(x) => {
                let n = v(*x).len() as f64;
                vec![(*x, Tensor::full(v(*x).shape(), gout.item()? / n))]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor, shape: &[usize]) -> Result<()> {
    // Row-broadcast gradients arrive as vectors; restore the operand's shape.
    let g = if g.shape() == shape {
        g
    } else {
        g.reshape(shape.to_vec())?
    };
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
    Ok(())
}

/// Accumulates `∂loss/∂p` into `store` for every parameter loaded into `graph`.
///
/// Gradients add to whatever the store already holds until
/// [`ParamStore::zero_grads`] is called.
pub fn backward(graph: &Graph, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = graph.gradients(loss)?;
    let mut names: Vec<(&String, &Var)> = graph.params.iter().collect();
    names.sort();
    for (name, var) in names {
        if let Some(Some(g)) = grads.get(var.0) {
            store.accumulate_grad(name, g)?;
        }
    }
    store.mark_grads_ready();
    Ok(())
}

/// Gradient with respect to an arbitrary node, mostly for tests.
pub fn gradient_of(graph: &Graph, loss: Var, wrt: Var) -> Result<Option<Tensor>> {
    let mut grads = graph.gradients(loss)?;
    Ok(grads.get_mut(wrt.0).and_then(Option::take))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = g.matmul(id, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let row = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let col = g.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
        let s = g.matmul(row, col).unwrap();
        assert_eq!(g.value(s).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = store_with(
            "w",
            Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap(),
        );
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w);
        backward(&g, loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn squared_sum_gradient_is_twice_weights() {
        let w0 = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut store = store_with("w", w0.clone());
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        backward(&g, loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), &w0.map(|x| 2.0 * x));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut store = store_with("w", Tensor::scalar(1.0));
        for expected in [1.0, 2.0] {
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let loss = g.sum(w);
            backward(&g, loss, &mut store).unwrap();
            assert_eq!(store.grad("w").unwrap().item().unwrap(), expected);
        }
        store.zero_grads();
        assert_eq!(store.grad("w").unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = store_with("w", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert!(matches!(
            backward(&g, w, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn film_examples() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let gamma = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let beta = g.constant(Tensor::vector(vec![-1.0, 0.0]));
        let out = g.film(e, gamma, beta).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 6.0]);

        let e = g.constant(Tensor::from_rows(&[vec![0.3, -0.7], vec![4.0, 5.0]]).unwrap());
        let ones = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let zeros = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let out = g.film(e, ones, zeros).unwrap();
        assert_eq!(g.value(out), g.value(e));
        let out = g.film(e, zeros, beta).unwrap();
        assert_eq!(g.value(out).data(), &[-1.0, 0.0, -1.0, 0.0]);

        let wide = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        assert!(matches!(
            g.film(e, wide, zeros),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(s.all_finite());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![5.0; 4]]).unwrap());
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn layer_norm_normalized_row_is_fixed_up_to_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap());
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[1] - expected).abs() < 1e-15);
        assert!((g.value(y).data()[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn minimum_routes_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 5.0]));
        let b = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let m = g.minimum(a, b).unwrap();
        let loss = g.sum(m);
        assert_eq!(
            gradient_of(&g, loss, a).unwrap().unwrap().data(),
            &[1.0, 0.0]
        );
        assert_eq!(
            gradient_of(&g, loss, b).unwrap().unwrap().data(),
            &[0.0, 1.0]
        );
    }
}
