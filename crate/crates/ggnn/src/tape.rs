//! Reverse-mode autodiff on a flat tape of dense f64 tensors.
//!
//! Every forward op appends a node holding its output value and the indices
//! of its inputs; `backward` walks the tape once in reverse, accumulating
//! vector-Jacobian products with `+=`. Ops fail hard on shape mismatches and
//! on any non-finite output, naming the offending op.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

// Some variants carry arguments the backward pass recomputes from shapes
// (slice ends, scatter heights); they stay so a Debug dump of a tape reads
// as the full op.
#[allow(dead_code)]
#[derive(Debug)]
enum Op {
    /// Constant or parameter input; parameters remember their store slot.
    Leaf { param: Option<ParamId> },
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows { src: usize, indices: Vec<usize>, out_rows: usize },
    /// Add a 1xC row vector to every row of an NxC matrix.
    AddRowBroadcast(usize, usize),
    /// Column-wise sum, producing 1xC.
    SumRows(usize),
    SumAll(usize),
    SoftmaxCrossEntropy { logits: usize, target: usize },
    BinaryCrossEntropy { probs: usize, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Clamp applied inside the binary cross-entropy log terms.
pub const BCE_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.constant(Tensor::zeros(rows, cols))
    }

    /// Load a parameter value onto the tape. Its gradient is routed back to
    /// the store slot by `accumulate_param_grads`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a.0))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        self.push("add", v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let vb = self.value(b);
        let va = self.value(a);
        let v = Tensor::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) - vb.get(i, j));
        self.push("sub", v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let vb = self.value(b);
        let va = self.value(a);
        let v = Tensor::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) * vb.get(i, j));
        self.push("mul", v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a.0, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut v = Tensor::zeros(n, ca + cb);
        for i in 0..n {
            v.row_mut(i)[..ca].copy_from_slice(va.row(i));
            v.row_mut(i)[ca..].copy_from_slice(vb.row(i));
        }
        self.push("concat_cols", v, Op::ConcatCols(a.0, b.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::dim(
                "concat_rows",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let v = Tensor::from_vec(va.rows() + vb.rows(), va.cols(), data)?;
        self.push("concat_rows", v, Op::ConcatRows(a.0, b.0))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("{start}..{end} of {} rows", va.rows()),
            ));
        }
        let v = Tensor::from_fn(end - start, va.cols(), |i, j| va.get(start + i, j));
        self.push("slice_rows", v, Op::SliceRows(a.0, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{end} of {} cols", va.cols()),
            ));
        }
        let v = Tensor::from_fn(va.rows(), end - start, |i, j| va.get(i, start + j));
        self.push("slice_cols", v, Op::SliceCols(a.0, start, end))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of {}", va.rows()),
            ));
        }
        let mut v = Tensor::zeros(indices.len(), va.cols());
        for (i, &src) in indices.iter().enumerate() {
            v.row_mut(i).copy_from_slice(va.row(src));
        }
        self.push("gather_rows", v, Op::GatherRows(a.0, indices.to_vec()))
    }

    /// out[indices[i]] += src[i]; duplicate indices sum, which is what makes
    /// parallel edges work.
    pub fn scatter_add_rows(&mut self, src: Var, indices: &[usize], out_rows: usize) -> Result<Var> {
        let vs = self.value(src);
        if indices.len() != vs.rows() {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("{} indices for {} rows", indices.len(), vs.rows()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("target row {bad} out of {out_rows}"),
            ));
        }
        let mut v = Tensor::zeros(out_rows, vs.cols());
        for (i, &dst) in indices.iter().enumerate() {
            for (o, s) in v.row_mut(dst).iter_mut().zip(vs.row(i)) {
                *o += s;
            }
        }
        self.push(
            "scatter_add_rows",
            v,
            Op::ScatterAddRows { src: src.0, indices: indices.to_vec(), out_rows },
        )
    }

    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return Err(Error::dim(
                "add_row_broadcast",
                format!("{:?} + {:?}", vm.shape(), vr.shape()),
            ));
        }
        let v = Tensor::from_fn(vm.rows(), vm.cols(), |i, j| vm.get(i, j) + vr.get(0, j));
        self.push("add_row_broadcast", v, Op::AddRowBroadcast(m.0, row.0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut v = Tensor::zeros(1, va.cols());
        for i in 0..va.rows() {
            for (o, s) in v.row_mut(0).iter_mut().zip(va.row(i)) {
                *o += s;
            }
        }
        self.push("sum_rows", v, Op::SumRows(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum_all", v, Op::SumAll(a.0))
    }

    /// Numerically stable softmax cross-entropy over the flattened logits.
    /// Returns a 1x1 loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let vl = self.value(logits);
        if vl.is_empty() {
            return Err(Error::dim("softmax_cross_entropy", "empty logits"));
        }
        if target >= vl.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("target {target} out of {}", vl.len()),
            ));
        }
        let data = vl.data();
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + data.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - data[target];
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits: logits.0, target },
        )
    }

    /// Mean binary cross-entropy of probabilities against fixed 0/1 targets,
    /// with the log arguments clamped away from 0. Returns a 1x1 loss.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let vp = self.value(probs);
        if vp.shape() != targets.shape() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{:?} vs targets {:?}", vp.shape(), targets.shape()),
            ));
        }
        if vp.is_empty() {
            return Err(Error::dim("binary_cross_entropy", "empty input"));
        }
        let n = vp.len() as f64;
        let mut loss = 0.0;
        for (&p, &t) in vp.data().iter().zip(targets.data()) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss / n),
            Op::BinaryCrossEntropy { probs: probs.0, targets: targets.clone() },
        )
    }

    fn add_grad(&mut self, node: usize, delta: Tensor) {
        match &mut self.grads[node] {
            Some(g) => g.add_assign(&delta).expect("gradient shape fixed by forward"),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a 1x1 loss node. Visits each node exactly once in
    /// reverse topological (= tape) order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul(&self.nodes[b].value.transpose())?;
                    let gb = self.nodes[a].value.transpose().matmul(&g)?;
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.add_grad(a, g.transpose());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g.clone());
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let vb = &self.nodes[b].value;
                    let va = &self.nodes[a].value;
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * vb.get(r, c));
                    let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * va.get(r, c));
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.add_grad(a, g.map(|x| x * c));
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let s = &self.nodes[i].value;
                    let ga =
                        Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                            let sv = s.get(r, c);
                            g.get(r, c) * sv * (1.0 - sv)
                        });
                    self.add_grad(a, ga);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let t = &self.nodes[i].value;
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                        let tv = t.get(r, c);
                        g.get(r, c) * (1.0 - tv * tv)
                    });
                    self.add_grad(a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a].value.cols();
                    let ga = Tensor::from_fn(g.rows(), ca, |r, c| g.get(r, c));
                    let gb = Tensor::from_fn(g.rows(), g.cols() - ca, |r, c| g.get(r, ca + c));
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let ra = self.nodes[a].value.rows();
                    let ga = Tensor::from_fn(ra, g.cols(), |r, c| g.get(r, c));
                    let gb = Tensor::from_fn(g.rows() - ra, g.cols(), |r, c| g.get(ra + r, c));
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::SliceRows(a, start, _) => {
                    let (a, start) = (*a, *start);
                    let va = &self.nodes[a].value;
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.add_grad(a, ga);
                }
                Op::SliceCols(a, start, _) => {
                    let (a, start) = (*a, *start);
                    let va = &self.nodes[a].value;
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, start + c, g.get(r, c));
                        }
                    }
                    self.add_grad(a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let a = *a;
                    let indices = indices.clone();
                    let va = &self.nodes[a].value;
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, s) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += s;
                        }
                    }
                    self.add_grad(a, ga);
                }
                Op::ScatterAddRows { src, indices, .. } => {
                    let src = *src;
                    let indices = indices.clone();
                    let mut gs = Tensor::zeros(indices.len(), g.cols());
                    for (r, &dst) in indices.iter().enumerate() {
                        gs.row_mut(r).copy_from_slice(g.row(dst));
                    }
                    self.add_grad(src, gs);
                }
                Op::AddRowBroadcast(m, row) => {
                    let (m, row) = (*m, *row);
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, s) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += s;
                        }
                    }
                    self.add_grad(m, g.clone());
                    self.add_grad(row, gr);
                }
                Op::SumRows(a) => {
                    let a = *a;
                    let va = &self.nodes[a].value;
                    let ga = Tensor::from_fn(va.rows(), va.cols(), |_, c| g.get(0, c));
                    self.add_grad(a, ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let va = &self.nodes[a].value;
                    let s = g.get(0, 0);
                    self.add_grad(a, Tensor::from_fn(va.rows(), va.cols(), |_, _| s));
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let vl = &self.nodes[logits].value;
                    let data = vl.data();
                    let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = data.iter().map(|v| (v - m).exp()).sum();
                    let s = g.get(0, 0);
                    let mut gl = Tensor::zeros(vl.rows(), vl.cols());
                    for (k, out) in gl.data_mut().iter_mut().enumerate() {
                        let p = (data[k] - m).exp() / z;
                        *out = s * (p - if k == target { 1.0 } else { 0.0 });
                    }
                    self.add_grad(logits, gl);
                }
                Op::BinaryCrossEntropy { probs, targets } => {
                    let probs = *probs;
                    let targets = targets.clone();
                    let vp = &self.nodes[probs].value;
                    let n = vp.len() as f64;
                    let s = g.get(0, 0);
                    let mut gp = Tensor::zeros(vp.rows(), vp.cols());
                    for ((o, &p), &t) in
                        gp.data_mut().iter_mut().zip(vp.data()).zip(targets.data())
                    {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *o = s * (-t / p + (1.0 - t) / (1.0 - p)) / n;
                    }
                    self.add_grad(probs, gp);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; zero if the loss does
    /// not depend on it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let t = self.value(v);
                Tensor::zeros(t.rows(), t.cols())
            }
        }
    }

    /// Route gradients of all parameter leaves back into the store (summing,
    /// so repeated leaves of the same parameter combine correctly).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    store.accumulate_grad(id, g)?;
                }
            }
        }
        Ok(())
    }
}

/// One failing or worst-case entry from a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckWorst {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<GradCheckWorst>,
}

/// Relative error used throughout: |a - n| / max(1e-8, |a| + |n|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Default perturbation for finite-difference checks.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Central-difference gradient check of `f` (a scalar loss builder) against
/// the tape gradients, perturbing every scalar of every parameter by +-eps.
pub fn gradcheck<F>(store: &mut ParamStore, mut f: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(store)?;
    let analytic: Vec<Tensor> = store.ids().map(|id| store.grad(id).clone()).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let ids: Vec<ParamId> = store.ids().collect();
    for (slot, id) in ids.iter().enumerate() {
        let (rows, cols) = store.value(*id).shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(*id).get(i, j);
                store.value_mut(*id).set(i, j, orig + eps);
                let mut t = Tape::new();
                let lp = f(store, &mut t)?;
                let plus = t.value(lp).get(0, 0);
                store.value_mut(*id).set(i, j, orig - eps);
                let mut t = Tape::new();
                let lm = f(store, &mut t)?;
                let minus = t.value(lm).get(0, 0);
                store.value_mut(*id).set(i, j, orig);

                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[slot].get(i, j);
                let re = rel_err(a, numeric);
                report.checked += 1;
                if re > report.max_rel_err {
                    report.max_rel_err = re;
                    report.worst = Some(GradCheckWorst {
                        param: store.name(*id).to_string(),
                        row: i,
                        col: j,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
