use rand::Rng;

use super::kernels::{conv2d_backward, conv2d_forward, gemm};
use super::params::{BnStats, ParamId, ParamStore};
use super::{accumulation, check_prefix, Accumulation, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running averages with momentum.
    Train,
    /// Normalize with the running statistics.
    Eval,
    /// Normalize with batch statistics and fold them into an equal-weight running average.
    Recalibrate,
}

enum Op {
    Leaf,
    Param {
        id: ParamId,
        region: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    KlDistill {
        student: Var,
        teacher_probs: Vec<f32>,
        student_probs: Vec<f32>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation in execution order.
///
/// Nodes are appended as ops run, so the recorded order is already topological and
/// [`Tape::backward`] simply walks it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that keeps values but records no adjoint information.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.grad_enabled {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.param(id).value.clone();
        let region = value.shape().to_vec();
        self.push(value, Op::Param { id, region }, true)
    }

    /// The leading `region` slice of a parameter; gradients scatter back into that slice.
    pub fn param_prefix(&mut self, store: &ParamStore, id: ParamId, region: &[usize]) -> Result<Var> {
        let p = store.param(id);
        check_prefix(p.value.shape(), region)?;
        let value = p.value.prefix(region)?;
        Ok(self.push(
            value,
            Op::Param {
                id,
                region: region.to_vec(),
            },
            true,
        ))
    }

    /// Every parameter slice read by this tape, in first-use order, deduplicated.
    pub fn param_regions(&self) -> Vec<(ParamId, Vec<usize>)> {
        let mut out: Vec<(ParamId, Vec<usize>)> = Vec::new();
        for n in &self.nodes {
            if let Op::Param { id, region } = &n.op {
                if let Some(existing) = out.iter_mut().find(|(i, _)| i == id) {
                    for (e, r) in existing.1.iter_mut().zip(region) {
                        *e = (*e).max(*r);
                    }
                } else {
                    out.push((*id, region.clone()));
                }
            }
        }
        out
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Dimension(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, o]);
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            gemm(n, f, o, xv, f, 1, wv, 1, f, out.data_mut(), o, 1, false);
            for row in out.data_mut().chunks_mut(o) {
                for (v, bias) in row.iter_mut().zip(bv) {
                    *v += bias;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("batch_norm2d expects NCHW, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if c > stats.capacity() {
            return Err(Error::Capacity(format!(
                "{} channels exceed statistics capacity {} of {}",
                c,
                stats.capacity(),
                stats.name
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm2d affine params must be [{c}]"
            )));
        }
        let m = n * hw;
        let xv = self.value(x).data();
        let (mut mean, mut var) = (vec![0.0f64; c], vec![0.0f64; c]);
        let batch_stats = mode != BnMode::Eval;
        if batch_stats {
            if m == 0 {
                return Err(Error::Input("batch_norm2d on an empty batch".into()));
            }
            for b in 0..n {
                for ch in 0..c {
                    mean[ch] += reduce(&xv[(b * c + ch) * hw..(b * c + ch + 1) * hw], |v| v);
                }
            }
            for v in &mut mean {
                *v /= m as f64;
            }
            for b in 0..n {
                for ch in 0..c {
                    let mu = mean[ch];
                    let plane = &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    var[ch] += if accumulation() == Accumulation::F64 {
                        plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum()
                    } else {
                        let mu = mu as f32;
                        reduce(plane, |v| (v - mu) * (v - mu))
                    };
                }
            }
            for v in &mut var {
                *v /= m as f64;
            }
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            match mode {
                BnMode::Train => {
                    let mo = BN_MOMENTUM as f64;
                    for ch in 0..c {
                        stats.mean[ch] = ((1.0 - mo) * stats.mean[ch] as f64 + mo * mean[ch]) as f32;
                        stats.var[ch] =
                            ((1.0 - mo) * stats.var[ch] as f64 + mo * var[ch] * unbias) as f32;
                    }
                }
                BnMode::Recalibrate => {
                    let k = (stats.count + 1) as f64;
                    for ch in 0..c {
                        let rm = stats.mean[ch] as f64;
                        let rv = stats.var[ch] as f64;
                        stats.mean[ch] = (rm + (mean[ch] - rm) / k) as f32;
                        stats.var[ch] = (rv + (var[ch] * unbias - rv) / k) as f32;
                    }
                    stats.count += 1;
                }
                BnMode::Eval => unreachable!(),
            }
        } else {
            for ch in 0..c {
                mean[ch] = stats.mean[ch] as f64;
                var[ch] = stats.var[ch] as f64;
            }
        }
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32)
            .collect();
        let mean32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = Tensor::zeros(&xs);
        {
            let od = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let (mu, is, g, be) = (mean32[ch], inv_std[ch], gv[ch], bv[ch]);
                    for i in base..base + hw {
                        let h = (xv[i] - mu) * is;
                        xhat[i] = h;
                        od[i] = g * h + be;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        for (o, v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool expects NCHW, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c]);
        for (o, chunk) in out.data_mut().iter_mut().zip(xv.chunks(hw)) {
            *o = (chunk.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`; identity when inactive.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, active: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !active || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!("softmax expects [N,K], got {xs:?}")));
        }
        let probs = softmax_rows(self.value(x).data(), xs[1]);
        let out = Tensor::new(xs, probs.iter().map(|&v| v as f32).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.value(logits).shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {xs:?} with {} labels",
                labels.len()
            )));
        }
        let (n, k) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} outside [0, {k})")));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &label) in lv.chunks(k).zip(labels) {
            total += log_sum_exp_minus(row, label);
        }
        let probs: Vec<f32> = softmax_rows(lv, k).iter().map(|&v| v as f32).collect();
        let loss = Tensor::scalar((total / n as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over the batch of `KL(softmax(teacher) ‖ softmax(student))`; the teacher is a constant.
    pub fn kl_distill(&mut self, student: Var, teacher: &Tensor) -> Result<Var> {
        let ss = self.value(student).shape().to_vec();
        if ss.len() != 2 || ss != teacher.shape() {
            return Err(Error::Dimension(format!(
                "kl_distill: student {ss:?} vs teacher {:?}",
                teacher.shape()
            )));
        }
        let (n, k) = (ss[0], ss[1]);
        let sv = self.value(student).data();
        let tv = teacher.data();
        let mut total = 0.0f64;
        for (srow, trow) in sv.chunks(k).zip(tv.chunks(k)) {
            let lq = log_softmax_row(srow);
            let lp = log_softmax_row(trow);
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            total += kl.max(0.0);
        }
        let teacher_probs: Vec<f32> = softmax_rows(tv, k).iter().map(|&v| v as f32).collect();
        let student_probs: Vec<f32> = softmax_rows(sv, k).iter().map(|&v| v as f32).collect();
        let loss = Tensor::scalar((total / n as f64) as f32);
        let rg = self.rg(student);
        Ok(self.push(
            loss,
            Op::KlDistill {
                student,
                teacher_probs,
                student_probs,
            },
            rg,
        ))
    }

    /// `Σ x_i · w_i` for constant weights; reduces any tensor to a scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        if self.value(x).numel() != weights.len() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} values vs {} weights",
                self.value(x).numel(),
                weights.len()
            )));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Accumulates d`loss`/dθ into every reachable parameter of `store`.
    ///
    /// Gradients are added, never overwritten: calling this twice doubles them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on a no-grad tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param { id, region } => store.accumulate_grad(*id, region, &g),
                Op::Conv2d { x, w, stride, pad } => {
                    let need_dx = self.rg(*x);
                    let (dx, dw) =
                        conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, need_dx)?;
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *x, dx);
                    }
                    self.acc(&mut grads, *w, dw);
                }
                Op::Linear { x, w, b } => {
                    let (n, f) = (self.value(*x).dim(0), self.value(*x).dim(1));
                    let o = self.value(*w).dim(0);
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * f];
                        gemm(n, o, f, &g, o, 1, self.value(*w).data(), f, 1, &mut dx, f, 1, false);
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; o * f];
                        gemm(o, n, f, &g, 1, o, self.value(*x).data(), f, 1, &mut dw, f, 1, false);
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0f32; o];
                        for row in g.chunks(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = self.value(*x).shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let (gp, hp) = (&g[base..base + hw], &xhat[base..base + hw]);
                            dbeta[ch] += reduce(gp, |v| v);
                            dgamma[ch] += reduce_pair(gp, hp, |a, b| a * b);
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0f32; g.len()];
                        let m = (n * hw) as f64;
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let scale = gv[ch] * inv_std[ch];
                                if *batch_stats {
                                    let mean_dy = (dbeta[ch] / m) as f32;
                                    let mean_dy_xhat = (dgamma[ch] / m) as f32;
                                    for i in base..base + hw {
                                        dx[i] = scale * (g[i] - mean_dy - xhat[i] * mean_dy_xhat);
                                    }
                                } else {
                                    for i in base..base + hw {
                                        dx[i] = scale * g[i];
                                    }
                                }
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                    self.acc(&mut grads, *gamma, dgamma.iter().map(|&v| v as f32).collect());
                    self.acc(&mut grads, *beta, dbeta.iter().map(|&v| v as f32).collect());
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f32;
                    let mut dx = vec![0.0f32; xs.iter().product()];
                    for (chunk, &d) in dx.chunks_mut(hw).zip(&g) {
                        chunk.fill(d * inv);
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(d, m)| d * m).collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let k = node.value.dim(1);
                    let mut dx = vec![0.0f32; y.len()];
                    for ((drow, yrow), grow) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let dot: f32 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n.max(1);
                    let scale = g[0] / n as f32;
                    let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * k + l] -= scale;
                    }
                    self.acc(&mut grads, *logits, dx);
                }
                Op::KlDistill {
                    student,
                    teacher_probs,
                    student_probs,
                } => {
                    let n = self.value(*student).dim(0);
                    let scale = g[0] / n as f32;
                    let dx = student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(q, p)| (q - p) * scale)
                        .collect();
                    self.acc(&mut grads, *student, dx);
                }
                Op::WeightedSum { x, weights } => {
                    let dx = weights.iter().map(|w| w * g[0]).collect();
                    self.acc(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Sums `f(v)` over a slice: exactly in f64 under [`Accumulation::F64`], otherwise in
/// eight f32 lanes per 256-element block with f64 across blocks.
fn reduce(xs: &[f32], f: impl Fn(f32) -> f32) -> f64 {
    if accumulation() == Accumulation::F64 {
        return xs.iter().map(|&v| f(v) as f64).sum();
    }
    let mut total = 0.0f64;
    for block in xs.chunks(256) {
        let mut lanes = [0.0f32; 8];
        let mut it = block.chunks_exact(8);
        for c in &mut it {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += f(v);
            }
        }
        total += it.remainder().iter().map(|&v| f(v) as f64).sum::<f64>();
        total += lanes.iter().map(|&l| l as f64).sum::<f64>();
    }
    total
}

fn reduce_pair(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> f64 {
    if accumulation() == Accumulation::F64 {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y) as f64).sum();
    }
    let mut total = 0.0f64;
    for (ba, bb) in a.chunks(256).zip(b.chunks(256)) {
        let mut lanes = [0.0f32; 8];
        let (mut ia, mut ib) = (ba.chunks_exact(8), bb.chunks_exact(8));
        for (ca, cb) in (&mut ia).zip(&mut ib) {
            for ((l, &x), &y) in lanes.iter_mut().zip(ca).zip(cb) {
                *l += f(x, y);
            }
        }
        total += ia
            .remainder()
            .iter()
            .zip(ib.remainder())
            .map(|(&x, &y)| f(x, y) as f64)
            .sum::<f64>();
        total += lanes.iter().map(|&l| l as f64).sum::<f64>();
    }
    total
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// `logsumexp(row) - row[label]`, kept accurate when the label dominates.
fn log_sum_exp_minus(row: &[f32], label: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
    let max = max as f64;
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v as f64 - max).exp())
        .sum();
    rest.ln_1p() + (max - row[label] as f64)
}

fn softmax_rows(x: &[f32], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    #[test]
    fn linear_hand_arithmetic() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", ParamKind::Weight, Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let b = store
            .add("b", ParamKind::Bias, Tensor::new(vec![1], vec![5.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = tape.linear(x, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[16.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l).data()[0] - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_logit_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap());
        let l = tape.cross_entropy(x, &[0]).unwrap();
        let v = tape.value(l).data()[0] as f64;
        // ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((v - expected).abs() / expected < 1e-6, "{v} vs {expected}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        assert!(matches!(tape.backward(v, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn batch_norm_capacity_error() {
        let mut store = ParamStore::new();
        let g = store.add("g", ParamKind::Norm, Tensor::full(&[3], 1.0)).unwrap();
        let b = store.add("b", ParamKind::Norm, Tensor::zeros(&[3])).unwrap();
        let mut stats = BnStats::new("s", 2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 2, 2]));
        let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
        assert!(matches!(
            tape.batch_norm2d(x, gv, bv, &mut stats, BnMode::Train),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn dropout_inactive_is_identity() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[2, 3], 1.5));
        let mut rng = rand::rng();
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }
}
