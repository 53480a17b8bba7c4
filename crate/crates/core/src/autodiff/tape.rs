use super::tensor::{dot, Tensor};
use super::{Mode, RunningStats, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SelectRows(Var, Vec<usize>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ArcMargin {
        cos: Var,
        labels: Vec<usize>,
        scale: f64,
        margin: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SupCon {
        logits: Var,
        labels: Vec<usize>,
        anchors: usize,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `Some` exactly for leaves with `requires_grad` that the loss depends on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Broadcast-compatible output shape for elementwise binary ops.
fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::shape(op, &a, &b)),
    }
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    shape: [usize; 2],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let [rows, cols] = shape;
    let mut out = Vec::with_capacity(rows * cols);
    let (ar, ac) = (a.rows() > 1, a.cols() > 1);
    let (br, bc) = (b.rows() > 1, b.cols() > 1);
    for r in 0..rows {
        for c in 0..cols {
            let x = a.get(if ar { r } else { 0 }, if ac { c } else { 0 });
            let y = b.get(if br { r } else { 0 }, if bc { c } else { 0 });
            out.push(f(x, y));
        }
    }
    Tensor::new(rows, cols, out).expect("broadcast shape")
}

/// Sums a full-size gradient down to the (possibly broadcast) input shape.
fn reduce_to(grad: &Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let rr = if shape[0] == 1 { 0 } else { r };
            let cc = if shape[1] == 1 { 0 } else { c };
            let v = out.get(rr, cc) + grad.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` over every relu input recorded so far, i.e. how close
    /// the computation sits to a kink. `None` without relu nodes.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let value = broadcast_binary(ta, tb, shape, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum. Either side may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::ScalarMul(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x <= 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x <= 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive input {x}"),
            });
        }
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// `B×D → B×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Tensor::new(t.rows(), 1, data).expect("row sum");
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("select_rows", &t.shape(), &[bad]));
        }
        let value = t.select_rows(indices);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    /// Row-wise unit normalization; rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = out.row_slice_mut(r);
            let n = dot(row, row).sqrt();
            if n <= NORM_EPS {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    row: r,
                    norm: n,
                });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2Normalize { x: a, norms }, rg))
    }

    /// Batch normalization over rows with learnable per-feature scale and shift.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `stats`; eval mode uses `stats` as constants.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let t = self.value(x);
        let (b, d) = (t.rows(), t.cols());
        let dim = stats.mean.len();
        if d != dim || self.value(gamma).shape() != [1, d] || self.value(beta).shape() != [1, d] {
            return Err(Error::shape("batchnorm", &t.shape(), &[1, dim]));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Contract(
                        "batchnorm in train mode needs a batch of at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0; d];
                for row in t.iter_rows() {
                    mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; d];
                for row in t.iter_rows() {
                    for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                stats.update(&mean, &var, b);
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let mut xhat = t.clone();
        for r in 0..b {
            let row = xhat.row_slice_mut(r);
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for r in 0..b {
            let row = out.row_slice_mut(r);
            for j in 0..d {
                row[j] = row[j] * g[j] + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Additive angular margin logits: the labelled column becomes
    /// `s·cos(arccos(c) + m)`, every other column `s·c`. Cosines are clamped
    /// to `[-1+1e-7, 1-1e-7]` before the arccos.
    pub fn arc_margin(
        &mut self,
        cos: Var,
        labels: &[usize],
        scale: f64,
        margin: f64,
    ) -> Result<Var> {
        let t = self.value(cos);
        check_labels("arc_margin", t, labels)?;
        let mut out = t.map(|c| scale * c);
        for (r, &y) in labels.iter().enumerate() {
            let c = t.get(r, y).clamp(-1.0 + ARC_CLAMP, 1.0 - ARC_CLAMP);
            out.set(r, y, scale * (c.acos() + margin).cos());
        }
        let rg = self.rg(&[cos]);
        Ok(self.push(
            out,
            Op::ArcMargin {
                cos,
                labels: labels.to_vec(),
                scale,
                margin,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (B×C) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_labels("cross_entropy", t, labels)?;
        let mut probs = t.clone();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = probs.row_slice_mut(r);
            let lse = log_sum_exp(row.iter().copied());
            total += lse - row[y];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Supervised contrastive objective over a square logit matrix whose
    /// rows are anchors and columns are candidates from the other view.
    ///
    /// Candidate `i` is excluded from anchor `i`'s positives and from its
    /// normalizer. Anchors without positives are skipped. Returns the loss
    /// and the number of contributing anchors; with none, the loss is 0.
    pub fn supcon(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, usize)> {
        let t = self.value(logits);
        let b = labels.len();
        if t.shape() != [b, b] {
            return Err(Error::shape("supcon", &t.shape(), &[b, b]));
        }
        let mut probs = Tensor::zeros(b, b);
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..b {
            let positives: Vec<usize> = (0..b)
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            anchors += 1;
            let row = t.row_slice(i);
            let lse = log_sum_exp((0..b).filter(|&j| j != i).map(|j| row[j]));
            let term: f64 = positives.iter().map(|&p| lse - row[p]).sum();
            total += term / positives.len() as f64;
            for j in (0..b).filter(|&j| j != i) {
                probs.set(i, j, (row[j] - lse).exp());
            }
        }
        let value = Tensor::scalar(if anchors > 0 {
            total / anchors as f64
        } else {
            0.0
        });
        let rg = self.rg(&[logits]) && anchors > 0;
        let var = self.push(
            value,
            Op::SupCon {
                logits,
                labels: labels.to_vec(),
                anchors,
                probs,
            },
            rg,
        );
        Ok((var, anchors))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // Keep only leaf gradients; intermediates were consumed above.
        for (idx, slot) in grads.iter_mut().enumerate() {
            let node = &self.nodes[idx];
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a))?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let shape = g.shape();
                if self.requires_grad(*a) {
                    let full = broadcast_binary(g, val(*b), shape, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&full, val(*a).shape()));
                }
                if self.requires_grad(*b) {
                    let full = broadcast_binary(g, val(*a), shape, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&full, val(*b).shape()));
                }
            }
            Op::ScalarMul(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let dx = zip_map(g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, dx);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, &node.value, |gi, y| gi * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip_map(g, val(*a), |gi, x| gi / x)),
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, zip_map(g, &node.value, |gi, y| gi * 0.5 / y))
            }
            Op::Clamp(a, lo, hi) => {
                let dx = zip_map(
                    g,
                    val(*a),
                    |gi, x| if x < *lo || x > *hi { 0.0 } else { gi },
                );
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let [r, c] = t.shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item() / t.len() as f64));
            }
            Op::RowSum(a) => {
                let [r, c] = val(*a).shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    dx.row_slice_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SelectRows(a, indices) => {
                let [r, c] = val(*a).shape();
                let mut dx = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    dx.row_slice_mut(i)
                        .iter_mut()
                        .zip(g.row_slice(k))
                        .for_each(|(d, gi)| *d += gi);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let yr = y.row_slice(r);
                    let proj = dot(yr, g.row_slice(r));
                    dx.row_slice_mut(r)
                        .iter_mut()
                        .zip(yr)
                        .for_each(|(d, yi)| *d = (*d - yi * proj) / n);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, d) = (xhat.rows(), xhat.cols());
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..b {
                    let (gr, xr) = (g.row_slice(r), xhat.row_slice(r));
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(b, d);
                    if *batch_stats {
                        // dx = inv_std/B · (B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let bf = b as f64;
                        for j in 0..d {
                            let sum_dxhat = dbeta[j] * gam[j];
                            let sum_dxhat_xhat = dgamma[j] * gam[j];
                            for r in 0..b {
                                let dxhat = g.get(r, j) * gam[j];
                                let v = inv_std[j] / bf
                                    * (bf * dxhat - sum_dxhat - xhat.get(r, j) * sum_dxhat_xhat);
                                dx.set(r, j, v);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..d {
                                dx.set(r, j, g.get(r, j) * gam[j] * inv_std[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::row(&dgamma));
                self.accumulate(grads, *beta, Tensor::row(&dbeta));
            }
            Op::ArcMargin {
                cos,
                labels,
                scale,
                margin,
            } => {
                let c = val(*cos);
                let mut dx = g.map(|gi| gi * scale);
                for (r, &y) in labels.iter().enumerate() {
                    let raw = c.get(r, y);
                    let lo = -1.0 + ARC_CLAMP;
                    let hi = 1.0 - ARC_CLAMP;
                    let d = if raw < lo || raw > hi {
                        0.0
                    } else {
                        // d/dc cos(arccos c + m) = sin(arccos c + m) / sqrt(1 − c²)
                        let theta = raw.acos();
                        (theta + margin).sin() / theta.sin()
                    };
                    dx.set(r, y, g.get(r, y) * scale * d);
                }
                self.accumulate(grads, *cos, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.item() / labels.len() as f64;
                let mut dx = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let v = dx.get(r, y) - 1.0;
                    dx.set(r, y, v);
                }
                dx.data_mut().iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, dx);
            }
            Op::SupCon {
                logits,
                labels,
                anchors,
                probs,
            } => {
                if *anchors == 0 {
                    return Ok(());
                }
                let b = labels.len();
                let scale = g.item() / *anchors as f64;
                let mut dx = Tensor::zeros(b, b);
                for i in 0..b {
                    let npos = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
                    if npos == 0 {
                        continue;
                    }
                    for j in (0..b).filter(|&j| j != i) {
                        let target = if labels[j] == labels[i] {
                            1.0 / npos as f64
                        } else {
                            0.0
                        };
                        dx.set(i, j, scale * (probs.get(i, j) - target));
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

const ARC_CLAMP: f64 = 1e-7;

fn check_labels(op: &'static str, t: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != t.rows() || labels.is_empty() {
        return Err(Error::shape(op, &t.shape(), &[labels.len()]));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= t.cols()) {
        return Err(Error::Contract(format!(
            "{op}: label {y} outside {} classes",
            t.cols()
        )));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
