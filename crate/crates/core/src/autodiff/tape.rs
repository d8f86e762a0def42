//! Reverse-mode tape over 2-D matrices.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes in reverse and accumulates exact gradients into every node that
//! (transitively) depends on a parameter leaf.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
/// Floor on row norms before L2 normalisation.
pub const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GatherRows(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    RepeatRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    NllRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Chamfer {
        a: Var,
        b: Var,
        /// Number of independent set pairs, one per row.
        patches: usize,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c = a * b` (row-major, `a: m x k`, `b: k x n`), with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is stored as m x k, or as k x m when transposed.
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slices are sized by the callers to exactly cover the strided
    // views described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn nearest(p: &[f64], set: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.chunks_exact(3).enumerate() {
        let d = squared_dist(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(name, "non-finite forward value"));
        }
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs))
    }

    fn require_2d(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(Error::invalid(format!(
                "{op}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Named trainable leaf; repeated calls with the same name return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Stop-gradient copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul: inner dimensions differ ({m}x{k} * {k2}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push_checked(
            "matmul",
            Tensor::matrix(m, n, out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::invalid(format!(
                "{op}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push_checked("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push_checked("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push_checked("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.require_2d("add_row", a)?;
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::invalid(format!(
                "add_row: row has {} values, matrix has {n} columns",
                r.len()
            )));
        }
        let r = r.data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push_checked(
            "add_row",
            Tensor::matrix(m, n, out)?,
            Op::AddRow(a, row),
            &[a, row],
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let v = Tensor::new(va.shape(), data)?;
        self.push_checked("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push_checked(
            "transpose",
            Tensor::matrix(n, m, out)?,
            Op::Transpose(a),
            &[a],
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push_checked(
            "softmax_rows",
            Tensor::matrix(m, n, out)?,
            Op::SoftmaxRows(a),
            &[a],
        )
    }

    /// Row-wise layer normalisation with learnable gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.require_2d("layer_norm", x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::invalid("layer_norm: gain/bias width mismatch"));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push_checked(
            "layer_norm",
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu(x)).collect();
        let v = Tensor::new(va.shape(), data)?;
        self.push_checked("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let v = Tensor::new(va.shape(), data)?;
        self.push_checked("relu", v, Op::Relu(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let m = self.require_2d("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_2d("concat_cols", p)?;
            if r != m {
                return Err(Error::invalid(format!(
                    "concat_cols: row count mismatch ({r} vs {m})"
                )));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push_checked(
            "concat_cols",
            Tensor::matrix(m, n, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let n = self.require_2d("concat_rows", parts[0])?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.require_2d("concat_rows", p)?;
            if c != n {
                return Err(Error::invalid(format!(
                    "concat_rows: column count mismatch ({c} vs {n})"
                )));
            }
            m += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push_checked(
            "concat_rows",
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Column-wise max over all rows, giving a `1 x n` row.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.require_2d("max_over_rows", a)?.0;
        self.group_max(a, m)
    }

    /// Column-wise max over consecutive blocks of `group` rows. Ties route
    /// the gradient to the first row attaining the max.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = self.require_2d("group_max", a)?;
        if group == 0 || m % group != 0 {
            return Err(Error::invalid(format!(
                "group_max: {m} rows not divisible into groups of {group}"
            )));
        }
        let groups = m / group;
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; groups * n];
        let mut argmax = vec![0usize; groups * n];
        for gi in 0..groups {
            for r in gi * group..(gi + 1) * group {
                let row = &src[r * n..(r + 1) * n];
                for j in 0..n {
                    if row[j] > out[gi * n + j] {
                        out[gi * n + j] = row[j];
                        argmax[gi * n + j] = r;
                    }
                }
            }
        }
        self.push_checked(
            "group_max",
            Tensor::matrix(groups, n, out)?,
            Op::GroupMax { x: a, argmax },
            &[a],
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.require_2d("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let v = self.value(a).gather_rows(idx);
        self.push_checked("gather_rows", v, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Mean of all entries as a 1-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.require_2d("repeat_rows", a)?;
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * n * times);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(src.row(i));
            }
        }
        self.push_checked(
            "repeat_rows",
            Tensor::matrix(m * times, n, out)?,
            Op::RepeatRows(a, times),
            &[a],
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.require_2d("slice_cols", a)?;
        if start + len > n || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols: [{start}, {}) out of {n} columns",
                start + len
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        self.push_checked(
            "slice_cols",
            Tensor::matrix(m, len, out)?,
            Op::SliceCols(a, start),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push_checked("reshape", v, Op::Reshape(a), &[a])
    }

    /// Divides each row by its L2 norm (floored at [`NORM_FLOOR`]).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("l2_normalize_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        let mut norms = vec![0.0; m];
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let nrm = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms[i] = nrm;
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        self.push_checked(
            "l2_normalize_rows",
            Tensor::matrix(m, n, out)?,
            Op::L2NormalizeRows { x: a, norms },
            &[a],
        )
    }

    /// `sum_i -log softmax(logits_i)[targets[i]]`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.require_2d("nll_rows", logits)?;
        if targets.len() != m {
            return Err(Error::invalid(format!(
                "nll_rows: {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!(
                "nll_rows: target {t} >= {n} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_exact_mut(n).enumerate() {
            let raw = &src[i * n..(i + 1) * n];
            let mx = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + raw.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - raw[targets[i]];
            softmax_in_place(row);
        }
        self.push_checked(
            "nll_rows",
            Tensor::scalar(loss),
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Symmetric squared-L2 Chamfer distance between two `n x 3` point sets.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ca) = self.require_2d("chamfer", a)?;
        let (_, cb) = self.require_2d("chamfer", b)?;
        if ca != 3 || cb != 3 {
            return Err(Error::invalid("chamfer: point sets must have 3 columns"));
        }
        self.chamfer_sets(a, b, 1)
    }

    /// Mean over rows of the Chamfer distance between row `i` of `pred` and
    /// row `i` of `target`, each row holding a flattened set of 3-D points.
    pub fn patch_chamfer(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pa, _) = self.require_2d("patch_chamfer", pred)?;
        let (pb, _) = self.require_2d("patch_chamfer", target)?;
        if pa != pb {
            return Err(Error::invalid(format!(
                "patch_chamfer: {pa} predicted patches vs {pb} targets"
            )));
        }
        self.chamfer_sets(pred, target, pa)
    }

    fn chamfer_sets(&mut self, pred: Var, target: Var, patches: usize) -> Result<Var> {
        let la = self.value(pred).len();
        let lb = self.value(target).len();
        if patches == 0 || la == 0 || lb == 0 {
            return Err(Error::invalid("chamfer: empty point set"));
        }
        let (wa, wb) = (la / patches, lb / patches);
        if wa % 3 != 0 || wb % 3 != 0 {
            return Err(Error::invalid(format!(
                "chamfer: rows of width {wa} and {wb} are not flattened 3-D points"
            )));
        }
        let (ma, mb) = (wa / 3, wb / 3);
        let da = self.value(pred).data();
        let db = self.value(target).data();
        let mut nn_ab = Vec::with_capacity(patches * ma);
        let mut nn_ba = Vec::with_capacity(patches * mb);
        let mut total = 0.0;
        for p in 0..patches {
            let sa = &da[p * wa..(p + 1) * wa];
            let sb = &db[p * wb..(p + 1) * wb];
            let mut fwd = 0.0;
            for x in sa.chunks_exact(3) {
                let (j, d) = nearest(x, sb);
                nn_ab.push(j);
                fwd += d;
            }
            let mut bwd = 0.0;
            for y in sb.chunks_exact(3) {
                let (j, d) = nearest(y, sa);
                nn_ba.push(j);
                bwd += d;
            }
            total += fwd / ma as f64 + bwd / mb as f64;
        }
        self.push_checked(
            "chamfer",
            Tensor::scalar(total / patches as f64),
            Op::Chamfer {
                a: pred,
                b: target,
                patches,
                nn_ab,
                nn_ba,
            },
            &[pred, target],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` for every named parameter on this tape; parameters
    /// the loss does not reach get an all-zero gradient.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, &v)| {
                let shape = self.value(v).shape();
                let t = match grads.get(v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.value(*a));
                let n = self.value(*b).cols();
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).len();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    for (s, v) in gr.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(*a, g.to_vec());
                acc(*row, gr);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Transpose(a) => {
                let (m, n) = rows_cols(self.value(*a));
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(ga.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gamma = self.value(*gain).data();
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let mut gx = vec![0.0; g.len()];
                for (i, gr) in g.chunks_exact(n).enumerate() {
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                        let d = gr[j] * gamma[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gr[j] * gamma[j];
                        gx[i * n + j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                acc(
                    *a,
                    g.iter().zip(va).map(|(g, &x)| g * gelu_grad(x)).collect(),
                );
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                    }
                    offset += w;
                    acc(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::GroupMax { x, argmax } => {
                let n = out.cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &r) in argmax.iter().enumerate() {
                    gx[r * n + o % n] += g[o];
                }
                acc(*x, gx);
            }
            Op::GatherRows(a, idx) => {
                let n = out.cols();
                let mut ga = vec![0.0; self.value(*a).len()];
                for (o, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[r * n + j] += g[o * n + j];
                    }
                }
                acc(*a, ga);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                acc(*a, vec![g[0] / len as f64; len]);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                acc(*a, vec![g[0]; len]);
            }
            Op::RepeatRows(a, times) => {
                let (m, n) = rows_cols(self.value(*a));
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for t in 0..*times {
                        let r = i * times + t;
                        for j in 0..n {
                            ga[i * n + j] += g[r * n + j];
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = rows_cols(self.value(*a));
                let w = out.cols();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols();
                let mut gx = vec![0.0; g.len()];
                for (i, gr) in g.chunks_exact(n).enumerate() {
                    let y = out.row(i);
                    let nrm = norms[i];
                    if nrm > NORM_FLOOR {
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = (gr[j] - y[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..n {
                            gx[i * n + j] = gr[j] / nrm;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::NllRows {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * n + t] -= g[0];
                }
                acc(*logits, gl);
            }
            Op::Chamfer {
                a,
                b,
                patches,
                nn_ab,
                nn_ba,
            } => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let wa = da.len() / patches;
                let wb = db.len() / patches;
                let (ma, mb) = (wa / 3, wb / 3);
                let scale = g[0] / *patches as f64;
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for p in 0..*patches {
                    for i in 0..ma {
                        let j = nn_ab[p * ma + i];
                        let ia = p * wa + i * 3;
                        let jb = p * wb + j * 3;
                        for c in 0..3 {
                            let d = 2.0 * (da[ia + c] - db[jb + c]) * scale / ma as f64;
                            ga[ia + c] += d;
                            gb[jb + c] -= d;
                        }
                    }
                    for j in 0..mb {
                        let i = nn_ba[p * mb + j];
                        let ia = p * wa + i * 3;
                        let jb = p * wb + j * 3;
                        for c in 0..3 {
                            let d = 2.0 * (db[jb + c] - da[ia + c]) * scale / mb as f64;
                            gb[jb + c] += d;
                            ga[ia + c] -= d;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
