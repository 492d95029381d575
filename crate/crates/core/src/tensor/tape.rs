//! Reverse-mode automatic differentiation on a growable tape.
//!
//! A [`Tape`] records every operation as a node holding the forward values
//! and a backward rule. [`DiffTensor`] is a cheap handle (tape pointer plus
//! node id). Calling [`DiffTensor::backward`] on a scalar seeds it with 1 and
//! sweeps the tape in reverse creation order, accumulating gradients into
//! every node with `requires_grad`.
//!
//! Replaying the same operations over the same values produces bit-identical
//! values and gradients: iteration orders are fixed, there is no parallelism,
//! and no hashing is involved anywhere.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Bilinear interpolation plan mapping a `ih x iw x ch` row-major image row
/// to `oh x ow x ch`. Built once per scale, reused across tapes.
#[derive(Debug)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub channels: usize,
    /// Per output pixel: four source pixel indices and their weights.
    taps: Vec<([usize; 4], [f64; 4])>,
}

impl ResizePlan {
    /// Half-pixel-centre bilinear resampling; an identity-sized plan maps
    /// every pixel onto itself with weight one.
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize, channels: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 || channels == 0 {
            return Err(Error::InvalidShape("resize dims must be nonzero".into()));
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        let axis = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
            let s = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
            if s <= 0.0 {
                return (0, 0, 0.0);
            }
            let max = in_n - 1;
            if s >= max as f64 {
                return (max, max, 0.0);
            }
            let lo = s.floor() as usize;
            (lo, lo + 1, s - lo as f64)
        };
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, out_h, in_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, out_w, in_w);
                let idx = [
                    y0 * in_w + x0,
                    y0 * in_w + x1,
                    y1 * in_w + x0,
                    y1 * in_w + x1,
                ];
                let w = [
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                ];
                taps.push((idx, w));
            }
        }
        Ok(ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            channels,
            taps,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.channels
    }

    /// Off-tape application to one flat image.
    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.in_len());
        let ch = self.channels;
        let mut dst = vec![0.0; self.out_len()];
        for (p, (idx, w)) in self.taps.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += w[t] * src[idx[t] * ch + c];
                }
                dst[p * ch + c] = acc;
            }
        }
        dst
    }
}

#[derive(Debug)]
enum Rule {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { a: usize },
    Scale { a: usize, c: f64 },
    Neg { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Tanh { a: usize },
    /// Forward is sqrt(max(x, 0)); gradient is 0 wherever x <= 0.
    Sqrt { a: usize },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Softmax { a: usize },
    L2NormalizeRows { a: usize, norms: Vec<f64> },
    Sum { a: usize },
    Gather { a: usize, idx: Rc<Vec<usize>> },
    ConcatRows { parts: Vec<usize> },
    MeanSegments { a: usize, offsets: Rc<Vec<usize>> },
    /// Row blocks of fixed size reduced by per-column max; `argmax` caches the
    /// flat source index chosen for each output element (first max wins ties).
    MaxGroups { a: usize, argmax: Vec<usize> },
    Resize { a: usize, plan: Rc<ResizePlan> },
    /// Forward clamps to [0, 1]; backward passes gradients straight through.
    Clamp01Ste { a: usize },
    Reshape { a: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    rule: Rule,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone)]
pub struct DiffTensor {
    tape: Rc<Tape>,
    id: usize,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape::default())
    }

    pub fn len(self: &Rc<Self>) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(self: &Rc<Self>) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(self: &Rc<Self>, rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool, rule: Rule) -> DiffTensor {
        debug_assert_eq!(rows * cols, values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            values,
            grad: None,
            requires_grad,
            rule,
        });
        DiffTensor {
            tape: Rc::clone(self),
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf; gradients accumulate here during backward.
    pub fn leaf(self: &Rc<Self>, t: &Tensor) -> DiffTensor {
        self.push(t.rows(), t.cols(), t.values().to_vec(), true, Rule::Leaf)
    }

    /// Non-trainable input; backward never visits it.
    pub fn constant(self: &Rc<Self>, t: &Tensor) -> DiffTensor {
        self.push(t.rows(), t.cols(), t.values().to_vec(), false, Rule::Leaf)
    }

    pub fn constant_scalar(self: &Rc<Self>, v: f64) -> DiffTensor {
        self.push(1, 1, vec![v], false, Rule::Leaf)
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(self: &Rc<Self>, parts: &[DiffTensor]) -> Result<DiffTensor> {
        if parts.is_empty() {
            return Err(Error::InvalidShape("concat of zero tensors".into()));
        }
        for p in parts {
            if !Rc::ptr_eq(&p.tape, self) {
                return Err(Error::Contract("concat across tapes".into()));
            }
        }
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].id].cols;
        let mut rows = 0;
        let mut values = Vec::new();
        let mut requires_grad = false;
        for p in parts {
            let n = &nodes[p.id];
            if n.cols != cols {
                return Err(Error::InvalidShape(format!(
                    "concat column mismatch: {} vs {cols}",
                    n.cols
                )));
            }
            rows += n.rows;
            values.extend_from_slice(&n.values);
            requires_grad |= n.requires_grad;
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(rows, cols, values, requires_grad, Rule::ConcatRows { parts: ids }))
    }
}

/// Sums `src` (shaped `rows x cols`) down to `out_r x out_c`, where each
/// target dim either matches or is 1. Inverse of broadcasting.
fn reduce_to(src: &[f64], rows: usize, cols: usize, out_r: usize, out_c: usize) -> Vec<f64> {
    if out_r == rows && out_c == cols {
        return src.to_vec();
    }
    let mut out = vec![0.0; out_r * out_c];
    for i in 0..rows {
        let oi = if out_r == 1 { 0 } else { i };
        for j in 0..cols {
            let oj = if out_c == 1 { 0 } else { j };
            out[oi * out_c + oj] += src[i * cols + j];
        }
    }
    out
}

fn broadcast_dims(ar: usize, ac: usize, br: usize, bc: usize) -> Option<(usize, usize)> {
    let r = match (ar, br) {
        (a, b) if a == b => a,
        (1, b) => b,
        (a, 1) => a,
        _ => return None,
    };
    let c = match (ac, bc) {
        (a, b) if a == b => a,
        (1, b) => b,
        (a, 1) => a,
        _ => return None,
    };
    Some((r, c))
}

impl DiffTensor {
    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn dims(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        (nodes[self.id].rows, nodes[self.id].cols)
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.rows, n.cols, n.values.clone()).expect("node shape is consistent")
    }

    /// Gradient accumulated by the latest backward sweep, if any reached here.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn scalar(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.values.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "expected scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.values[0])
    }

    fn same_tape(&self, other: &DiffTensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn binary(&self, other: &DiffTensor, op: fn(f64, f64) -> f64, rule: fn(usize, usize) -> Rule) -> Result<DiffTensor> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let Some((r, c)) = broadcast_dims(a.rows, a.cols, b.rows, b.cols) else {
            return Err(Error::InvalidShape(format!(
                "cannot broadcast {}x{} with {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        };
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if a.rows == 1 { 0 } else { i };
            let ib = if b.rows == 1 { 0 } else { i };
            for j in 0..c {
                let ja = if a.cols == 1 { 0 } else { j };
                let jb = if b.cols == 1 { 0 } else { j };
                values.push(op(a.values[ia * a.cols + ja], b.values[ib * b.cols + jb]));
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(r, c, values, rg, rule(self.id, other.id)))
    }

    pub fn add(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, |x, y| x + y, |a, b| Rule::Add { a, b })
    }

    pub fn sub(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, |x, y| x - y, |a, b| Rule::Sub { a, b })
    }

    pub fn mul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, |x, y| x * y, |a, b| Rule::Mul { a, b })
    }

    /// Elementwise division. Denominators must stay away from zero; values
    /// below 1e-12 in magnitude are rejected rather than silently exploding.
    pub fn div(&self, other: &DiffTensor) -> Result<DiffTensor> {
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[other.id].values.iter().any(|v| v.abs() < 1e-12) {
                return Err(Error::Domain("division by (near-)zero".into()));
            }
        }
        self.binary(other, |x, y| x / y, |a, b| Rule::Div { a, b })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, rule: impl FnOnce(usize) -> Rule) -> DiffTensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let values = n.values.iter().map(|&v| f(v)).collect();
        let (r, c, rg) = (n.rows, n.cols, n.requires_grad);
        drop(nodes);
        self.tape.push(r, c, values, rg, rule(self.id))
    }

    pub fn add_scalar(&self, c: f64) -> DiffTensor {
        self.unary(|v| v + c, |a| Rule::AddScalar { a })
    }

    pub fn scale(&self, c: f64) -> DiffTensor {
        self.unary(|v| v * c, move |a| Rule::Scale { a, c })
    }

    pub fn neg(&self) -> DiffTensor {
        self.unary(|v| -v, |a| Rule::Neg { a })
    }

    pub fn exp(&self) -> DiffTensor {
        self.unary(f64::exp, |a| Rule::Exp { a })
    }

    pub fn tanh(&self) -> DiffTensor {
        self.unary(f64::tanh, |a| Rule::Tanh { a })
    }

    /// sqrt(max(x, 0)) with subgradient 0 at and below zero, so tiny negative
    /// round-off in squared distances cannot produce NaN.
    pub fn sqrt_clamped(&self) -> DiffTensor {
        self.unary(|v| v.max(0.0).sqrt(), |a| Rule::Sqrt { a })
    }

    pub fn log(&self) -> Result<DiffTensor> {
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[self.id].values.iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain("log of non-positive value".into()));
            }
        }
        Ok(self.unary(f64::ln, |a| Rule::Log { a }))
    }

    pub fn clamp01_ste(&self) -> DiffTensor {
        self.unary(|v| v.clamp(0.0, 1.0), |a| Rule::Clamp01Ste { a })
    }

    pub fn matmul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.cols != b.rows {
            return Err(Error::InvalidShape(format!(
                "matmul {}x{} by {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.values[i * k..(i + 1) * k];
            let orow = &mut values[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.values[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(m, n, values, rg, Rule::Matmul { a: self.id, b: other.id }))
    }

    pub fn transpose(&self) -> DiffTensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let (r, c) = (n.rows, n.cols);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = n.values[i * c + j];
            }
        }
        let rg = n.requires_grad;
        drop(nodes);
        self.tape.push(c, r, values, rg, Rule::Transpose { a: self.id })
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> DiffTensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let (r, c) = (n.rows, n.cols);
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &n.values[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|e| e / s));
        }
        let rg = n.requires_grad;
        drop(nodes);
        self.tape.push(r, c, values, rg, Rule::Softmax { a: self.id })
    }

    /// Scales every row to unit L2 norm. Rows with norm below 1e-8 are
    /// rejected: a zero embedding has no direction.
    pub fn l2_normalize_rows(&self) -> Result<DiffTensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let (r, c) = (n.rows, n.cols);
        let mut norms = Vec::with_capacity(r);
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &n.values[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                return Err(Error::DegenerateNorm(format!("row {i} has norm {norm:.3e}")));
            }
            norms.push(norm);
            values.extend(row.iter().map(|v| v / norm));
        }
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(r, c, values, rg, Rule::L2NormalizeRows { a: self.id, norms }))
    }

    /// Sums every element down to a 1x1 scalar.
    pub fn sum_all(&self) -> DiffTensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let total: f64 = n.values.iter().sum();
        let rg = n.requires_grad;
        drop(nodes);
        self.tape.push(1, 1, vec![total], rg, Rule::Sum { a: self.id })
    }

    pub fn mean_all(&self) -> DiffTensor {
        let len = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].values.len()
        };
        self.sum_all().scale(1.0 / len as f64)
    }

    /// Reads flat elements at `idx` into a new `rows x cols` tensor; backward
    /// scatter-adds. Serves as row lookup, patch extraction, and diagonal
    /// extraction depending on the index pattern.
    pub fn gather(&self, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Result<DiffTensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if rows * cols != idx.len() {
            return Err(Error::InvalidShape(format!(
                "gather target {rows}x{cols} vs {} indices",
                idx.len()
            )));
        }
        let len = n.values.len();
        let mut values = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i >= len {
                return Err(Error::InvalidShape(format!("gather index {i} out of {len}")));
            }
            values.push(n.values[i]);
        }
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(rows, cols, values, rg, Rule::Gather { a: self.id, idx }))
    }

    /// Per-segment row mean: rows `offsets[s]..offsets[s+1]` collapse to
    /// output row `s`. Offsets must start at 0, end at the row count, and be
    /// strictly increasing.
    pub fn mean_segments(&self, offsets: Rc<Vec<usize>>) -> Result<DiffTensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let ok = offsets.len() >= 2
            && offsets[0] == 0
            && *offsets.last().unwrap() == n.rows
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidShape(format!(
                "bad segment offsets {:?} for {} rows",
                &offsets[..offsets.len().min(12)],
                n.rows
            )));
        }
        let segs = offsets.len() - 1;
        let c = n.cols;
        let mut values = vec![0.0; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            for i in lo..hi {
                for j in 0..c {
                    values[s * c + j] += n.values[i * c + j];
                }
            }
            let count = (hi - lo) as f64;
            for v in &mut values[s * c..(s + 1) * c] {
                *v /= count;
            }
        }
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(segs, c, values, rg, Rule::MeanSegments { a: self.id, offsets }))
    }

    /// Uniform-length segment mean, e.g. per-image pooling over a fixed
    /// patch count.
    pub fn mean_groups(&self, group: usize) -> Result<DiffTensor> {
        let rows = self.dims().0;
        if group == 0 || rows % group != 0 {
            return Err(Error::InvalidShape(format!("{rows} rows not divisible into groups of {group}")));
        }
        let offsets: Vec<usize> = (0..=rows / group).map(|s| s * group).collect();
        self.mean_segments(Rc::new(offsets))
    }

    /// Per-column max over consecutive row blocks of `group` rows. Ties pick
    /// the first row so replays stay deterministic.
    pub fn max_groups(&self, group: usize) -> Result<DiffTensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if group == 0 || n.rows % group != 0 {
            return Err(Error::InvalidShape(format!(
                "{} rows not divisible into groups of {group}",
                n.rows
            )));
        }
        let segs = n.rows / group;
        let c = n.cols;
        let mut values = Vec::with_capacity(segs * c);
        let mut argmax = Vec::with_capacity(segs * c);
        for s in 0..segs {
            for j in 0..c {
                let mut best = n.values[(s * group) * c + j];
                let mut best_i = (s * group) * c + j;
                for i in s * group + 1..(s + 1) * group {
                    let v = n.values[i * c + j];
                    if v > best {
                        best = v;
                        best_i = i * c + j;
                    }
                }
                values.push(best);
                argmax.push(best_i);
            }
        }
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(segs, c, values, rg, Rule::MaxGroups { a: self.id, argmax }))
    }

    /// Bilinear resize of each row (a flat image) under `plan`.
    pub fn resize(&self, plan: Rc<ResizePlan>) -> Result<DiffTensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.cols != plan.in_len() {
            return Err(Error::InvalidShape(format!(
                "resize plan expects rows of {}, got {}",
                plan.in_len(),
                n.cols
            )));
        }
        let (rows, out_len, ch) = (n.rows, plan.out_len(), plan.channels);
        let mut values = vec![0.0; rows * out_len];
        for r in 0..rows {
            let src = &n.values[r * n.cols..(r + 1) * n.cols];
            let dst = &mut values[r * out_len..(r + 1) * out_len];
            for (p, (idx, w)) in plan.taps.iter().enumerate() {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for t in 0..4 {
                        acc += w[t] * src[idx[t] * ch + c];
                    }
                    dst[p * ch + c] = acc;
                }
            }
        }
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(rows, out_len, values, rg, Rule::Resize { a: self.id, plan }))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<DiffTensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if rows * cols != n.values.len() {
            return Err(Error::InvalidShape(format!(
                "reshape {}x{} to {rows}x{cols}",
                n.rows, n.cols
            )));
        }
        let values = n.values.clone();
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(rows, cols, values, rg, Rule::Reshape { a: self.id }))
    }

    /// Seeds this scalar with gradient 1 and accumulates gradients through
    /// every node created up to it. Earlier gradients on the tape are
    /// cleared first, so each backward reflects exactly one sweep.
    pub fn backward(&self) -> Result<()> {
        {
            let mut nodes = self.tape.nodes.borrow_mut();
            let n = &nodes[self.id];
            if n.values.len() != 1 {
                return Err(Error::InvalidShape(format!(
                    "backward needs a scalar, got {}x{}",
                    n.rows, n.cols
                )));
            }
            for node in nodes.iter_mut().take(self.id + 1) {
                node.grad = None;
            }
            nodes[self.id].grad = Some(vec![1.0]);
        }

        for k in (0..=self.id).rev() {
            // Read phase: compute each parent's contribution from immutable
            // state, then write phase: accumulate. Keeps borrows disjoint.
            let contribs: Vec<(usize, Vec<f64>)> = {
                let nodes = self.tape.nodes.borrow();
                let node = &nodes[k];
                if !node.requires_grad {
                    continue;
                }
                let Some(g) = node.grad.as_ref() else { continue };
                backward_one(&nodes, node, g)
            };
            if contribs.is_empty() {
                continue;
            }
            let mut nodes = self.tape.nodes.borrow_mut();
            for (pid, c) in contribs {
                let p = &mut nodes[pid];
                match p.grad.as_mut() {
                    Some(g) => {
                        for (gv, cv) in g.iter_mut().zip(&c) {
                            *gv += cv;
                        }
                    }
                    None => p.grad = Some(c),
                }
            }
        }
        Ok(())
    }
}

/// Parent contributions of one node given its output gradient `g`.
fn backward_one(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let wants = |id: usize| nodes[id].requires_grad;
    let mut out = Vec::with_capacity(2);
    match &node.rule {
        Rule::Leaf => {}
        Rule::Add { a, b } => {
            for &pid in [a, b] {
                if wants(pid) {
                    let p = &nodes[pid];
                    out.push((pid, reduce_to(g, node.rows, node.cols, p.rows, p.cols)));
                }
            }
        }
        Rule::Sub { a, b } => {
            if wants(*a) {
                let p = &nodes[*a];
                out.push((*a, reduce_to(g, node.rows, node.cols, p.rows, p.cols)));
            }
            if wants(*b) {
                let p = &nodes[*b];
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                out.push((*b, reduce_to(&neg, node.rows, node.cols, p.rows, p.cols)));
            }
        }
        Rule::Mul { a, b } | Rule::Div { a, b } => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let is_div = matches!(node.rule, Rule::Div { .. });
            let (r, c) = (node.rows, node.cols);
            let at = |n: &Node, i: usize, j: usize| {
                let ii = if n.rows == 1 { 0 } else { i };
                let jj = if n.cols == 1 { 0 } else { j };
                n.values[ii * n.cols + jj]
            };
            if wants(*a) {
                let mut ca = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let bv = at(bn, i, j);
                        ca[i * c + j] = if is_div { g[i * c + j] / bv } else { g[i * c + j] * bv };
                    }
                }
                out.push((*a, reduce_to(&ca, r, c, an.rows, an.cols)));
            }
            if wants(*b) {
                let mut cb = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let av = at(an, i, j);
                        cb[i * c + j] = if is_div {
                            let bv = at(bn, i, j);
                            -g[i * c + j] * av / (bv * bv)
                        } else {
                            g[i * c + j] * av
                        };
                    }
                }
                out.push((*b, reduce_to(&cb, r, c, bn.rows, bn.cols)));
            }
        }
        Rule::AddScalar { a } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
        }
        Rule::Scale { a, c } => {
            if wants(*a) {
                out.push((*a, g.iter().map(|v| v * c).collect()));
            }
        }
        Rule::Neg { a } => {
            if wants(*a) {
                out.push((*a, g.iter().map(|v| -v).collect()));
            }
        }
        Rule::Exp { a } => {
            if wants(*a) {
                out.push((*a, g.iter().zip(&node.values).map(|(gv, y)| gv * y).collect()));
            }
        }
        Rule::Log { a } => {
            if wants(*a) {
                let p = &nodes[*a];
                out.push((*a, g.iter().zip(&p.values).map(|(gv, x)| gv / x).collect()));
            }
        }
        Rule::Tanh { a } => {
            if wants(*a) {
                out.push((
                    *a,
                    g.iter().zip(&node.values).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                ));
            }
        }
        Rule::Sqrt { a } => {
            if wants(*a) {
                let p = &nodes[*a];
                let c: Vec<f64> = g
                    .iter()
                    .zip(p.values.iter().zip(&node.values))
                    .map(|(gv, (&x, &y))| if x > 0.0 { gv / (2.0 * y) } else { 0.0 })
                    .collect();
                out.push((*a, c));
            }
        }
        Rule::Matmul { a, b } => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let (m, k, n) = (an.rows, an.cols, bn.cols);
            if wants(*a) {
                // dA[i,p] = sum_j G[i,j] * B[p,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let drow = &mut da[i * k..(i + 1) * k];
                    for (p, d) in drow.iter_mut().enumerate() {
                        let brow = &bn.values[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        *d = acc;
                    }
                }
                out.push((*a, da));
            }
            if wants(*b) {
                // dB[p,j] = sum_i A[i,p] * G[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let arow = &an.values[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                out.push((*b, db));
            }
        }
        Rule::Transpose { a } => {
            if wants(*a) {
                let (r, c) = (node.rows, node.cols);
                let mut t = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        t[j * r + i] = g[i * c + j];
                    }
                }
                out.push((*a, t));
            }
        }
        Rule::Softmax { a } => {
            if wants(*a) {
                let (r, c) = (node.rows, node.cols);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &node.values[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, dx));
            }
        }
        Rule::L2NormalizeRows { a, norms } => {
            if wants(*a) {
                let (r, c) = (node.rows, node.cols);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &node.values[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - y[j] * dot) / norms[i];
                    }
                }
                out.push((*a, dx));
            }
        }
        Rule::Sum { a } => {
            if wants(*a) {
                let p = &nodes[*a];
                out.push((*a, vec![g[0]; p.values.len()]));
            }
        }
        Rule::Gather { a, idx } => {
            if wants(*a) {
                let p = &nodes[*a];
                let mut scat = vec![0.0; p.values.len()];
                for (gv, &i) in g.iter().zip(idx.iter()) {
                    scat[i] += gv;
                }
                out.push((*a, scat));
            }
        }
        Rule::ConcatRows { parts } => {
            let mut offset = 0;
            for &pid in parts {
                let len = nodes[pid].values.len();
                if wants(pid) {
                    out.push((pid, g[offset..offset + len].to_vec()));
                }
                offset += len;
            }
        }
        Rule::MeanSegments { a, offsets } => {
            if wants(*a) {
                let p = &nodes[*a];
                let c = p.cols;
                let mut dx = vec![0.0; p.values.len()];
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let count = (hi - lo) as f64;
                    for i in lo..hi {
                        for j in 0..c {
                            dx[i * c + j] = g[s * c + j] / count;
                        }
                    }
                }
                out.push((*a, dx));
            }
        }
        Rule::MaxGroups { a, argmax } => {
            if wants(*a) {
                let p = &nodes[*a];
                let mut dx = vec![0.0; p.values.len()];
                for (gv, &i) in g.iter().zip(argmax.iter()) {
                    dx[i] += gv;
                }
                out.push((*a, dx));
            }
        }
        Rule::Resize { a, plan } => {
            if wants(*a) {
                let p = &nodes[*a];
                let (in_len, out_len, ch) = (plan.in_len(), plan.out_len(), plan.channels);
                let mut dx = vec![0.0; p.values.len()];
                for r in 0..node.rows {
                    let gr = &g[r * out_len..(r + 1) * out_len];
                    let dr = &mut dx[r * in_len..(r + 1) * in_len];
                    for (px, (idx, w)) in plan.taps.iter().enumerate() {
                        for c in 0..ch {
                            let gv = gr[px * ch + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..4 {
                                dr[idx[t] * ch + c] += w[t] * gv;
                            }
                        }
                    }
                }
                out.push((*a, dx));
            }
        }
        Rule::Clamp01Ste { a } | Rule::Reshape { a } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
        }
    }
    out
}
