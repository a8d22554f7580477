use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::{ParamId, ParamStore, Real, Shape, StatsId, Tensor};
use crate::error::{Error, Result};

/// Target label that contributes nothing to a cross-entropy term.
pub const IGNORE_LABEL: u8 = u8::MAX;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const PROB_FLOOR: f64 = 1e-12;

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// A user-supplied element-wise operator with its own backward rule.
pub trait UnaryOp<T: Real> {
    fn name(&self) -> &str;
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;
    /// Gradient w.r.t. the input given the upstream gradient.
    fn backward(&self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T>;
}

/// Argmax positions recorded by a 2×2 max-pool, consumed by the matching unpool.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input: Shape,
    output: Shape,
    /// Flat index into the input plane for every pooled element.
    argmax: Rc<Vec<u32>>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    /// Whether the pooled input was padded by replication (odd H or W).
    pub fn padded(&self) -> bool {
        self.input.h % 2 == 1 || self.input.w % 2 == 1
    }

    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

enum Op<T: Real> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        idx: PoolIndices,
    },
    Unpool {
        x: Var,
        idx: PoolIndices,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softmax {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Stack {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        probs: Var,
        target: Rc<Vec<u8>>,
        weights: Vec<T>,
        norm: T,
    },
    Sum {
        xs: Vec<Var>,
    },
    Custom {
        x: Var,
        op: Rc<dyn UnaryOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn label(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Unpool { .. } => "max_unpool2x2",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softmax { .. } => "softmax_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Stack { .. } => "stack_outer",
            Op::Slice { .. } => "slice_channels",
            Op::CrossEntropy { .. } => "weighted_cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct StatsUpdate<T> {
    id: StatsId,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Recorded forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    stats_updates: Vec<StatsUpdate<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            stats_updates: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.label().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// Reads a parameter onto the tape. Repeated reads of one id return the
    /// same node, so every use feeds a single gradient accumulation.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    /// Same-padded convolution; `w` is (cout, cin, kh, kw) with odd kh, kw.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs} has {} channels, weight {ws} expects {}", xs.c, ws.c),
            ));
        }
        if ws.h % 2 == 0 || ws.w % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {ws} must have odd extents")));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape("conv2d", format!("bias {bs} for weight {ws}")));
        }
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv { x, w, b }, ng)
    }

    /// 2×2 max-pool with stride 2. Odd extents are padded by replicating the
    /// last row/column. Ties go to the first position in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<(Var, PoolIndices)> {
        let xs = self.shape(x);
        let (oh, ow) = (xs.h.div_ceil(2), xs.w.div_ceil(2));
        let os = Shape::new(xs.n, xs.c, oh, ow);
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0u32; os.len()];
        let xv = self.value(x);
        let mut k = 0;
        for n in 0..xs.n {
            for c in 0..xs.c {
                let plane = xv.plane(n, c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let y = (2 * oy + dy).min(xs.h - 1);
                                let xx = (2 * ox + dx).min(xs.w - 1);
                                let i = y * xs.w + xx;
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[k] = best;
                        argmax[k] = best_i as u32;
                        k += 1;
                    }
                }
            }
        }
        let idx = PoolIndices {
            input: xs,
            output: os,
            argmax: Rc::new(argmax),
        };
        let ng = self.needs(x);
        let v = self.push(out, Op::MaxPool { x, idx: idx.clone() }, ng)?;
        Ok((v, idx))
    }

    /// Scatter pooled values back to their recorded argmax positions.
    pub fn max_unpool2x2(&mut self, x: Var, idx: &PoolIndices, out_size: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x);
        if (xs.h, xs.w) != (idx.output.h, idx.output.w) || xs.n != idx.output.n {
            return Err(Error::shape(
                "max_unpool2x2",
                format!("pooled {xs} does not match recorded indices {}", idx.output),
            ));
        }
        if out_size != (idx.input.h, idx.input.w) {
            return Err(Error::shape(
                "max_unpool2x2",
                format!("requested {out_size:?}, indices came from {}", idx.input),
            ));
        }
        if xs.c != idx.output.c {
            return Err(Error::shape(
                "max_unpool2x2",
                format!("{} channels, indices have {}", xs.c, idx.output.c),
            ));
        }
        let os = Shape::new(xs.n, xs.c, out_size.0, out_size.1);
        let mut out = Tensor::zeros(os);
        let xv = self.value(x);
        let pin = os.plane();
        let pout = xs.plane();
        for nc in 0..xs.n * xs.c {
            let src = &xv.data()[nc * pout..(nc + 1) * pout];
            let am = &idx.argmax[nc * pout..(nc + 1) * pout];
            let dst = &mut out.data_mut()[nc * pin..(nc + 1) * pin];
            for (&v, &i) in src.iter().zip(am) {
                dst[i as usize] = v;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Unpool { x, idx: idx.clone() }, ng)
    }

    /// Per-channel batch normalization; `gamma`/`beta` are (1, C, 1, 1).
    pub fn batchnorm2d(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: StatsId,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let cs = Shape::new(1, xs.c, 1, 1);
        if self.shape(gamma) != cs || self.shape(beta) != cs {
            return Err(Error::shape(
                "batchnorm2d",
                format!("gamma {} / beta {} for input {xs}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let count = xs.n * xs.plane();
        if mode == BnMode::Train && count == 1 {
            return Err(Error::invalid(
                "batchnorm2d in train mode needs more than one value per channel",
            ));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let xv = self.value(x);
        let (mean, var) = match mode {
            BnMode::Train => channel_moments(xv),
            BnMode::Eval => {
                let rs = store.stats(stats);
                if rs.mean.len() != xs.c {
                    return Err(Error::shape("batchnorm2d", "running stats channel count"));
                }
                (rs.mean.clone(), rs.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(xs);
        let mut out = Tensor::zeros(xs);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let src = xv.plane(n, c);
                let off = (n * xs.c + c) * xs.plane();
                for (i, &v) in src.iter().enumerate() {
                    let h = (v - mean[c]) * inv_std[c];
                    xhat.data_mut()[off + i] = h;
                    out.data_mut()[off + i] = g[c] * h + bt[c];
                }
            }
        }
        if mode == BnMode::Train {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let rs = store.stats(stats);
            let unbias = T::from_f64_lossy(count as f64 / (count as f64 - 1.0));
            self.stats_updates.push(StatsUpdate {
                id: stats,
                mean: rs
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b)
                    .collect(),
                var: rs
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                    .collect(),
            });
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            ng,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64_lossy(slope);
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v *= s;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope: s }, ng)
    }

    /// Softmax across the channel axis at every (n, y, x).
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let p = s.plane();
        let mut out = Tensor::zeros(s);
        let mut mx = vec![T::zero(); p];
        let mut sum = vec![T::zero(); p];
        for n in 0..s.n {
            mx.fill(T::neg_infinity());
            sum.fill(T::zero());
            for c in 0..s.c {
                for (m, &v) in mx.iter_mut().zip(xv.plane(n, c)) {
                    *m = m.max(v);
                }
            }
            for c in 0..s.c {
                let src = xv.plane(n, c);
                let off = (n * s.c + c) * p;
                let dst = &mut out.data_mut()[off..off + p];
                for i in 0..p {
                    let e = (src[i] - mx[i]).exp();
                    dst[i] = e;
                    sum[i] += e;
                }
            }
            for c in 0..s.c {
                let off = (n * s.c + c) * p;
                for (v, &z) in out.data_mut()[off..off + p].iter_mut().zip(&sum) {
                    *v = *v / z;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Softmax { x }, ng)
    }

    /// Concatenate along channels in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape("concat_channels", format!("{s} vs {s0}")));
            }
            c += s.c;
        }
        let os = Shape::new(s0.n, c, s0.h, s0.w);
        let mut out = Vec::with_capacity(os.len());
        for n in 0..s0.n {
            for &v in xs {
                out.extend_from_slice(self.value(v).sample(n));
            }
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::from_vec(os, out)?, Op::Concat { xs: xs.to_vec() }, ng)
    }

    /// Concatenate along the outer (N) axis, e.g. to stack conv weights.
    pub fn stack_outer(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("stack_outer needs at least one input"))?;
        let s0 = self.shape(first);
        let mut n = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if (s.c, s.h, s.w) != (s0.c, s0.h, s0.w) {
                return Err(Error::shape("stack_outer", format!("{s} vs {s0}")));
            }
            n += s.n;
            out.extend_from_slice(self.value(v).data());
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        let os = Shape::new(n, s0.c, s0.h, s0.w);
        self.push(Tensor::from_vec(os, out)?, Op::Stack { xs: xs.to_vec() }, ng)
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {s}", start + len),
            ));
        }
        let p = s.plane();
        let mut out = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            out.extend_from_slice(&self.value(x).sample(n)[start * p..(start + len) * p]);
        }
        let ng = self.needs(x);
        let os = Shape::new(s.n, len, s.h, s.w);
        self.push(Tensor::from_vec(os, out)?, Op::Slice { x, start }, ng)
    }

    /// Weighted cross-entropy on post-softmax probabilities.
    ///
    /// `target` holds one label per (n, y, x); `weights[label]` scales the
    /// pixel's term and the loss is normalized by the sum of applied weights.
    /// Pixels labelled [`IGNORE_LABEL`] or with weight 0 contribute nothing.
    pub fn weighted_cross_entropy(&mut self, probs: Var, target: Rc<Vec<u8>>, weights: &[f64]) -> Result<Var> {
        let ps = self.shape(probs);
        if weights.len() != ps.c {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{} label weights for {} channels", weights.len(), ps.c),
            ));
        }
        if target.len() != ps.n * ps.plane() {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{} targets for probabilities {ps}", target.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        let w: Vec<T> = weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let pv = self.value(probs);
        let p = ps.plane();
        let mut total = T::zero();
        let mut norm = T::zero();
        for n in 0..ps.n {
            for i in 0..p {
                let t = target[n * p + i];
                if t == IGNORE_LABEL {
                    continue;
                }
                let t = t as usize;
                if t >= ps.c {
                    return Err(Error::invalid(format!(
                        "target label {t} outside {} channels",
                        ps.c
                    )));
                }
                if w[t] == T::zero() {
                    continue;
                }
                let pr = pv.data()[(n * ps.c + t) * p + i].max(floor);
                total += w[t] * -pr.ln();
                norm += w[t];
            }
        }
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let ng = self.needs(probs);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                target,
                weights: w,
                norm,
            },
            ng,
        )
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("sum needs at least one term"));
        }
        let mut acc = T::zero();
        for &v in xs {
            let s = self.shape(v);
            if s != Shape::scalar() {
                return Err(Error::shape("sum", format!("term {s} is not a scalar")));
            }
            acc += self.value(v).data()[0];
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::scalar(acc), Op::Sum { xs: xs.to_vec() }, ng)
    }

    pub fn custom(&mut self, x: Var, op: Rc<dyn UnaryOp<T>>) -> Result<Var> {
        let out = op.forward(self.value(x));
        if out.shape() != self.shape(x) {
            return Err(Error::shape("custom", "custom operators must preserve shape"));
        }
        let ng = self.needs(x);
        self.push(out, Op::Custom { x, op }, ng)
    }

    /// Write pending batch-norm running statistics into the store.
    pub fn commit_running_stats(&mut self, store: &mut ParamStore<T>) {
        for u in self.stats_updates.drain(..) {
            let rs = store.stats_mut(u.id);
            rs.mean = u.mean;
            rs.var = u.var;
        }
    }

    /// Back-propagate from a scalar node, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if !gy.is_finite() {
                        return Err(Error::NonFinite {
                            op: format!("gradient of {}", store.get(*id).name),
                        });
                    }
                    store.get_mut(*id).grad.add_assign(&gy);
                }
                Op::Conv { x, w, b } => {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    let mut db = Tensor::zeros(self.shape(*b));
                    let dx = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        &mut dw,
                        &mut db,
                        self.needs(*x),
                    );
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxPool { x, idx } => {
                    let mut dx = Tensor::zeros(idx.input);
                    let pin = idx.input.plane();
                    let pout = idx.output.plane();
                    for nc in 0..idx.output.n * idx.output.c {
                        let g = &gy.data()[nc * pout..(nc + 1) * pout];
                        let am = &idx.argmax[nc * pout..(nc + 1) * pout];
                        let d = &mut dx.data_mut()[nc * pin..(nc + 1) * pin];
                        for (&gv, &a) in g.iter().zip(am) {
                            d[a as usize] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Unpool { x, idx } => {
                    let mut dx = Tensor::zeros(idx.output);
                    let pin = idx.input.plane();
                    let pout = idx.output.plane();
                    for nc in 0..idx.output.n * idx.output.c {
                        let g = &gy.data()[nc * pin..(nc + 1) * pin];
                        let am = &idx.argmax[nc * pout..(nc + 1) * pout];
                        let d = &mut dx.data_mut()[nc * pout..(nc + 1) * pout];
                        for (dv, &a) in d.iter_mut().zip(am) {
                            *dv = g[a as usize];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let s = gy.shape();
                    let p = s.plane();
                    let m = T::from_usize(s.n * p).unwrap();
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); s.c];
                    let mut dbeta = vec![T::zero(); s.c];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * p;
                            for i in 0..p {
                                dbeta[c] += gy.data()[off + i];
                                dgamma[c] += gy.data()[off + i] * xhat.data()[off + i];
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(s);
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let off = (n * s.c + c) * p;
                                let k = g[c] * inv_std[c];
                                for i in 0..p {
                                    let gv = gy.data()[off + i];
                                    dx.data_mut()[off + i] = match mode {
                                        BnMode::Train => {
                                            k * (gv - dbeta[c] / m - xhat.data()[off + i] * dgamma[c] / m)
                                        }
                                        BnMode::Eval => k * gv,
                                    };
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    let cs = Shape::new(1, s.c, 1, 1);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(cs, dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::from_vec(cs, dbeta)?);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut dx = gy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v < T::zero() {
                            *d *= *slope;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let s = y.shape();
                    let p = s.plane();
                    let mut dx = Tensor::zeros(s);
                    let mut dot = vec![T::zero(); p];
                    for n in 0..s.n {
                        dot.fill(T::zero());
                        for c in 0..s.c {
                            let off = (n * s.c + c) * p;
                            for i in 0..p {
                                dot[i] += gy.data()[off + i] * y.data()[off + i];
                            }
                        }
                        for c in 0..s.c {
                            let off = (n * s.c + c) * p;
                            for i in 0..p {
                                dx.data_mut()[off + i] = y.data()[off + i] * (gy.data()[off + i] - dot[i]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { xs } => {
                    let s = gy.shape();
                    let p = s.plane();
                    let mut c0 = 0;
                    for &v in xs {
                        let vs = self.shape(v);
                        if self.needs(v) {
                            let mut dx = Tensor::zeros(vs);
                            for n in 0..s.n {
                                let src = &gy.data()[(n * s.c + c0) * p..(n * s.c + c0 + vs.c) * p];
                                dx.data_mut()[n * vs.c * p..(n + 1) * vs.c * p].copy_from_slice(src);
                            }
                            accumulate(&mut grads, v, dx);
                        }
                        c0 += vs.c;
                    }
                }
                Op::Stack { xs } => {
                    let mut off = 0;
                    for &v in xs {
                        let vs = self.shape(v);
                        if self.needs(v) {
                            let dx = Tensor::from_vec(vs, gy.data()[off..off + vs.len()].to_vec())?;
                            accumulate(&mut grads, v, dx);
                        }
                        off += vs.len();
                    }
                }
                Op::Slice { x, start } => {
                    let xs = self.shape(*x);
                    let gs = gy.shape();
                    let p = xs.plane();
                    let mut dx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        let dst = (n * xs.c + start) * p;
                        dx.data_mut()[dst..dst + gs.c * p].copy_from_slice(gy.sample(n));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    probs,
                    target,
                    weights,
                    norm,
                } => {
                    let ps = self.shape(*probs);
                    let mut dp = Tensor::zeros(ps);
                    if *norm > T::zero() {
                        let floor = T::from_f64_lossy(PROB_FLOOR);
                        let pv = self.value(*probs);
                        let scale = gy.data()[0] / *norm;
                        let p = ps.plane();
                        for n in 0..ps.n {
                            for i in 0..p {
                                let t = target[n * p + i];
                                if t == IGNORE_LABEL || weights[t as usize] == T::zero() {
                                    continue;
                                }
                                let k = (n * ps.c + t as usize) * p + i;
                                let pr = pv.data()[k];
                                if pr > floor {
                                    dp.data_mut()[k] = -scale * weights[t as usize] / pr;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *probs, dp);
                }
                Op::Sum { xs } => {
                    for &v in xs {
                        if self.needs(v) {
                            accumulate(&mut grads, v, gy.clone());
                        }
                    }
                }
                Op::Custom { x, op } => {
                    let dx = op.backward(self.value(*x), &node.value, &gy);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Biased per-channel mean and variance over (N, H, W).
fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        mean[c] = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / count;
    }
    (mean, var)
}
