//! Define-by-run computation graph with reverse-mode gradients.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients into every leaf that requires one. Each operation
//! also appends an [`OpRecord`] (scope path, kind, per-sample MACs and
//! overhead) so an executed forward pass can be audited against the static
//! cost ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BnBatchStats, BnSaved, Broadcast};
use crate::network::ModelParams;
use crate::tensor::{numel, ConvSpec, Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    AveragePool,
}

/// Operation category used by the executed-trace and the static ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum OpKind {
    Conv {
        kh: usize,
        kw: usize,
        groups: usize,
    },
    Fc,
    BatchNorm,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale,
    ChannelMean,
    SpatialGap,
    Upsample,
    AvgPool,
    Split,
    Concat,
    Shuffle,
    Reduce,
    Loss,
}

impl OpKind {
    pub fn is_pointwise_conv(self) -> bool {
        matches!(self, OpKind::Conv { kh: 1, kw: 1, .. })
    }

    pub fn name(self) -> String {
        match self {
            OpKind::Conv { kh, kw, groups } if groups > 1 => format!("conv{kh}x{kw}/g{groups}"),
            OpKind::Conv { kh, kw, .. } => format!("conv{kh}x{kw}"),
            other => format!("{other:?}").to_lowercase(),
        }
    }
}

/// One executed operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub path: String,
    pub kind: OpKind,
    /// Multiply-accumulates per sample.
    pub macs: u64,
    /// Elementwise / pooling / bias operations per sample.
    pub overhead: u64,
    pub output: Shape,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    ChannelMean(Var),
    SpatialGap(Var),
    Upsample(Var, usize, ResizeMode),
    AvgPool(Var, usize),
    Split {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        denom: T,
    },
    Bce {
        logits: Var,
        target: Vec<T>,
        mask: Vec<T>,
        denom: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: String,
}

/// Recorded computation over tensors of element type `T`, optionally bound
/// to a parameter store whose entries are fetched by scoped name.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ModelParams<T>>,
    bound: BTreeMap<String, Var>,
    scope: Vec<String>,
    trace: Vec<OpRecord>,
    mode: Mode,
    track_params: bool,
    stat_updates: Vec<(String, BnBatchStats<T>)>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: BTreeMap::new(),
            scope: Vec::new(),
            trace: Vec::new(),
            mode: Mode::Infer,
            track_params: true,
            stat_updates: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_params(params: &'p ModelParams<T>) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn set_mode(&mut self, mode: Mode) -> &mut Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Whether parameter leaves request gradients (off for pure inference).
    pub fn set_track_params(&mut self, on: bool) -> &mut Self {
        self.track_params = on;
        self
    }

    /// Turns the per-op NaN/Inf check on or off (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) -> &mut Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- scopes and parameters ------------------------------------------

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    /// Runs `f` inside a nested scope.
    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    /// Current scope joined with `local` by dots.
    pub fn path(&self, local: &str) -> String {
        let mut p = self.scope.join(".");
        if !local.is_empty() {
            if !p.is_empty() {
                p.push('.');
            }
            p.push_str(local);
        }
        p
    }

    /// Leaf for the parameter `<scope>.<local>`; repeated lookups return the same node.
    pub fn param(&mut self, local: &str) -> Result<Var> {
        let name = self.path(local);
        if let Some(&v) = self.bound.get(&name) {
            return Ok(v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::Usage(format!("graph has no parameter store (wanted `{name}`)")))?;
        let t = params
            .get(&name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.push(t, Op::Leaf, self.track_params, name.clone());
        self.bound.insert(name, v);
        Ok(v)
    }

    /// Non-trainable buffer `<scope>.<local>` (running statistics).
    pub fn buffer(&self, local: &str) -> Result<&'p Tensor<T>> {
        let name = self.path(local);
        let params = self
            .params
            .ok_or_else(|| Error::Usage(format!("graph has no parameter store (wanted `{name}`)")))?;
        params
            .buffer(&name)
            .ok_or_else(|| Error::config(format!("missing buffer `{name}`")))
    }

    /// Parameter names bound so far, with their nodes.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(k, v)| self.grad(*v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }

    /// Batch statistics gathered by batch-norm layers in training mode.
    pub fn take_stat_updates(&mut self) -> Vec<(String, BnBatchStats<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn record_stat_update(&mut self, prefix: String, stats: BnBatchStats<T>) {
        self.stat_updates.push((prefix, stats));
    }

    // ---- node access ----------------------------------------------------

    /// Constant input, no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let label = self.path("input");
        self.push(t, Op::Leaf, false, label)
    }

    /// Leaf that may receive a gradient.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let label = self.path("leaf");
        self.push(t, Op::Leaf, requires_grad, label)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.clear_grad());
    }

    pub fn trace(&self) -> &[OpRecord] {
        &self.trace
    }

    /// Label of the first node holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.label.clone())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, label: String) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        data: Vec<T>,
        shape: Shape,
        op: Op<T>,
        inputs: &[Var],
        kind: OpKind,
        macs: u64,
        overhead: u64,
    ) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        let label = self.path(&kind.name());
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numeric { op: label });
        }
        let n = shape[0].max(1) as u64;
        self.trace.push(OpRecord {
            path: self.path(""),
            kind,
            macs: macs / n,
            overhead: overhead / n,
            output: shape,
        });
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg, label))
    }

    // ---- operations -----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.conv_like(x, w, b, spec, None)
    }

    fn conv_like(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        kind: Option<OpKind>,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::config(format!(
                "{}: weight shape {:?} does not match spec {:?}",
                self.path(""),
                self.shape(w),
                spec.weight_shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != spec.out_channels {
                return Err(Error::config(format!(
                    "{}: bias length {} != out channels {}",
                    self.path(""),
                    self.value(b).numel(),
                    spec.out_channels
                )));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let (out, os) =
            kernels::conv2d_forward(self.value(x).data(), xs, self.value(w).data(), bias, &spec)?;
        let macs = spec.macs(os[2], os[3]) * os[0] as u64;
        let overhead = if b.is_some() { numel(os) as u64 } else { 0 };
        let kind = kind.unwrap_or(OpKind::Conv {
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            groups: spec.groups,
        });
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.emit(out, os, Op::Conv { x, w, b, spec }, &inputs, kind, macs, overhead)
    }

    /// Affine map on (N, C, 1, 1) with weights (K, C, 1, 1) and optional bias (K).
    pub fn fc(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs[2] != 1 || xs[3] != 1 {
            return Err(Error::config(format!(
                "fully connected input must be (N, C, 1, 1), got {xs:?}"
            )));
        }
        if ws[1] != xs[1] || ws[2] != 1 || ws[3] != 1 {
            return Err(Error::config(format!(
                "fully connected weight {ws:?} does not match input {xs:?}"
            )));
        }
        let spec = ConvSpec::pointwise(ws[1], ws[0]).bias(b.is_some());
        self.conv_like(x, w, b, spec, Some(OpKind::Fc))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let out = t.data().iter().map(|&v| v.max(T::zero())).collect();
        self.emit(out, s, Op::Relu(x), &[x], OpKind::Relu, 0, numel(s) as u64)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let out = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        self.emit(out, s, Op::Sigmoid(x), &[x], OpKind::Sigmoid, 0, numel(s) as u64)
    }

    /// `a + b`, broadcasting any axis of extent 1 (e.g. (N, C, 1, 1) or (N, 1, H, W)).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::resolve(sa, sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = (0..numel(bc.out))
            .map(|i| da[bc.index_a(i)] + db[bc.index_b(i)])
            .collect();
        let os = bc.out;
        self.emit(out, os, Op::Add(a, b, bc), &[a, b], OpKind::Add, 0, numel(os) as u64)
    }

    /// `a ⊙ b`, with the same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::resolve(sa, sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = (0..numel(bc.out))
            .map(|i| da[bc.index_a(i)] * db[bc.index_b(i)])
            .collect();
        let os = bc.out;
        self.emit(out, os, Op::Mul(a, b, bc), &[a, b], OpKind::Mul, 0, numel(os) as u64)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let out = t.data().iter().map(|&v| v * k).collect();
        self.emit(out, s, Op::Scale(x, k), &[x], OpKind::Scale, 0, numel(s) as u64)
    }

    /// Mean over channels: (N, C, H, W) → (N, 1, H, W).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s[1] == 0 {
            return Err(Error::config("channel_mean of a zero-channel tensor"));
        }
        let out = kernels::channel_mean(self.value(x).data(), s);
        let os = [s[0], 1, s[2], s[3]];
        self.emit(out, os, Op::ChannelMean(x), &[x], OpKind::ChannelMean, 0, numel(os) as u64)
    }

    /// Mean over space: (N, C, H, W) → (N, C, 1, 1).
    pub fn spatial_gap(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s[2] * s[3] == 0 {
            return Err(Error::config("spatial_gap of an empty spatial map"));
        }
        let out = kernels::spatial_gap(self.value(x).data(), s);
        let os = [s[0], s[1], 1, 1];
        self.emit(out, os, Op::SpatialGap(x), &[x], OpKind::SpatialGap, 0, numel(os) as u64)
    }

    /// Upsamples by `factor` (nearest, bilinear) or average-pools by it.
    pub fn resize(&mut self, x: Var, factor: usize, mode: ResizeMode) -> Result<Var> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::config(format!(
                "resize factor must be a power of two, got {factor}"
            )));
        }
        if factor == 1 {
            return Ok(x);
        }
        let s = self.shape(x);
        let d = self.value(x).data();
        let (out, os, op, kind) = match mode {
            ResizeMode::Nearest => (
                kernels::upsample_nearest(d, s, factor),
                [s[0], s[1], s[2] * factor, s[3] * factor],
                Op::Upsample(x, factor, mode),
                OpKind::Upsample,
            ),
            ResizeMode::Bilinear => (
                kernels::upsample_bilinear(d, s, factor),
                [s[0], s[1], s[2] * factor, s[3] * factor],
                Op::Upsample(x, factor, mode),
                OpKind::Upsample,
            ),
            ResizeMode::AveragePool => {
                if s[2] % factor != 0 || s[3] % factor != 0 {
                    return Err(Error::config(format!(
                        "cannot average-pool {}x{} by {factor}",
                        s[2], s[3]
                    )));
                }
                (
                    kernels::avg_pool(d, s, factor),
                    [s[0], s[1], s[2] / factor, s[3] / factor],
                    Op::AvgPool(x, factor),
                    OpKind::AvgPool,
                )
            }
        };
        self.emit(out, os, op, &[x], kind, 0, numel(os) as u64)
    }

    /// Channels `start..start + len`.
    pub fn split(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s[1] || len == 0 {
            return Err(Error::config(format!(
                "channel split {start}..{} out of range for {} channels",
                start + len,
                s[1]
            )));
        }
        let hw = s[2] * s[3];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len * hw);
        for b in 0..s[0] {
            out.extend_from_slice(&d[(b * s[1] + start) * hw..][..len * hw]);
        }
        let os = [s[0], len, s[2], s[3]];
        self.emit(out, os, Op::Split { x, start }, &[x], OpKind::Split, 0, 0)
    }

    /// Concatenates along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::config(format!("cannot concat {s0:?} with {s:?}")));
            }
            c += s[1];
        }
        let hw = s0[2] * s0[3];
        let mut out = Vec::with_capacity(s0[0] * c * hw);
        for b in 0..s0[0] {
            for &v in xs {
                let t = self.value(v);
                let ci = t.channels();
                out.extend_from_slice(&t.data()[b * ci * hw..][..ci * hw]);
            }
        }
        let os = [s0[0], c, s0[2], s0[3]];
        self.emit(out, os, Op::Concat(xs.to_vec()), xs, OpKind::Concat, 0, 0)
    }

    /// Channel shuffle: view channels as (groups, C/groups), transpose, flatten.
    pub fn shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || s[1] % groups != 0 {
            return Err(Error::config(format!(
                "channel shuffle: {} channels not divisible by {groups} groups",
                s[1]
            )));
        }
        let perm = kernels::shuffle_permutation(s[1], groups);
        let out = kernels::permute_channels(self.value(x).data(), s, &perm);
        self.emit(out, s, Op::Permute { x, perm }, &[x], OpKind::Shuffle, 0, 0)
    }

    /// Batch norm with per-channel `gamma`/`beta`. With `running = Some`,
    /// normalizes by the given statistics; otherwise by batch statistics,
    /// which are returned for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let s = self.shape(x);
        let c = s[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::config(format!(
                "{}: batch norm affine params do not match {c} channels",
                self.path("")
            )));
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::config(format!(
                    "{}: running statistics do not match {c} channels",
                    self.path("")
                )));
            }
        }
        let (y, saved, stats) = kernels::batch_norm_forward(
            self.value(x).data(),
            s,
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
        );
        let v = self.emit(
            y,
            s,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
            OpKind::BatchNorm,
            0,
            numel(s) as u64,
        )?;
        Ok((v, stats))
    }

    /// Sum of all elements, as a (1, 1, 1, 1) scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.emit(vec![total], [1, 1, 1, 1], Op::Sum(x), &[x], OpKind::Reduce, 0, 0)
    }

    /// Masked mean squared error against a constant target. `mask` holds one
    /// weight per (n, channel) map; `None` weights every map by 1.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[T]>) -> Result<Var> {
        let (mask, denom) = self.loss_setup(pred, target, mask)?;
        let p = self.value(pred);
        let hw = p.height() * p.width();
        let mut acc = T::zero();
        for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
            let d = a - b;
            acc += mask[i / hw] * d * d;
        }
        let loss = if denom > T::zero() { acc / denom } else { T::zero() };
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
            mask,
            denom,
        };
        self.emit(vec![loss], [1, 1, 1, 1], op, &[pred], OpKind::Loss, 0, 0)
    }

    /// Masked binary cross-entropy on `sigmoid(logits)`, probabilities clamped
    /// to [1e-7, 1 − 1e-7].
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Result<Var> {
        let (mask, denom) = self.loss_setup(logits, target, mask)?;
        let z = self.value(logits);
        let hw = z.height() * z.width();
        let mut acc = T::zero();
        for (i, (&zi, &t)) in z.data().iter().zip(target.data()).enumerate() {
            let p = clamp_prob(kernels::sigmoid(zi));
            acc += mask[i / hw] * -(t * p.ln() + (T::one() - t) * (T::one() - p).ln());
        }
        let loss = if denom > T::zero() { acc / denom } else { T::zero() };
        let op = Op::Bce {
            logits,
            target: target.data().to_vec(),
            mask,
            denom,
        };
        self.emit(vec![loss], [1, 1, 1, 1], op, &[logits], OpKind::Loss, 0, 0)
    }

    fn loss_setup(&self, pred: Var, target: &Tensor<T>, mask: Option<&[T]>) -> Result<(Vec<T>, T)> {
        let s = self.shape(pred);
        if s != target.shape() {
            return Err(Error::config(format!(
                "loss shape mismatch: prediction {s:?}, target {:?}",
                target.shape()
            )));
        }
        let maps = s[0] * s[1];
        let mask = match mask {
            Some(m) if m.len() != maps => {
                return Err(Error::config(format!(
                    "loss mask has {} entries, expected {maps}",
                    m.len()
                )))
            }
            Some(m) => m.to_vec(),
            None => vec![T::one(); maps],
        };
        let denom = mask.iter().copied().sum::<T>() * T::of((s[2] * s[3]) as f64);
        Ok((mask, denom))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from the scalar `loss`, accumulating into the `grad`
    /// buffer of every leaf that requires a gradient. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward from a tensor detached from every trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let xv = self.value(*x);
                let (gx, gw, gb) = kernels::conv2d_backward(
                    xv.data(),
                    xv.shape(),
                    self.value(*w).data(),
                    spec,
                    g,
                    out_shape,
                );
                send(*x, gx);
                send(*w, gw);
                if let Some(b) = b {
                    send(*b, gb);
                }
            }
            Op::Add(a, b, bc) => {
                send(*a, bc.reduce(g, bc.a));
                send(*b, bc.reduce(g, bc.b));
            }
            Op::Mul(a, b, bc) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * db[bc.index_b(i)])
                    .collect();
                let gb: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * da[bc.index_a(i)])
                    .collect();
                send(*a, bc.reduce(&ga, bc.a));
                send(*b, bc.reduce(&gb, bc.b));
            }
            Op::Scale(x, k) => send(*x, g.iter().map(|&v| v * *k).collect()),
            Op::Relu(x) => {
                let d = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(d)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                        .collect(),
                );
            }
            Op::ChannelMean(x) => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let inv = T::one() / T::of(c as f64);
                let mut gx = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    let gp = &g[b * hw..][..hw];
                    for _ in 0..c {
                        gx.extend(gp.iter().map(|&v| v * inv));
                    }
                }
                send(*x, gx);
            }
            Op::SpatialGap(x) => {
                let [_, _, h, w] = self.shape(*x);
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                let gx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                    .collect();
                send(*x, gx);
            }
            Op::Upsample(x, f, mode) => {
                let s = self.shape(*x);
                let gx = match mode {
                    ResizeMode::Bilinear => kernels::upsample_bilinear_backward(g, s, *f),
                    _ => kernels::upsample_nearest_backward(g, s, *f),
                };
                send(*x, gx);
            }
            Op::AvgPool(x, f) => send(*x, kernels::avg_pool_backward(g, self.shape(*x), *f)),
            Op::Split { x, start } => {
                let s = self.shape(*x);
                let len = out_shape[1];
                let hw = s[2] * s[3];
                let mut gx = vec![T::zero(); numel(s)];
                for b in 0..s[0] {
                    gx[(b * s[1] + start) * hw..][..len * hw]
                        .copy_from_slice(&g[b * len * hw..][..len * hw]);
                }
                send(*x, gx);
            }
            Op::Concat(xs) => {
                let [n, c, h, w] = out_shape;
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let ci = self.shape(v)[1];
                    let mut gv = Vec::with_capacity(n * ci * hw);
                    for b in 0..n {
                        gv.extend_from_slice(&g[(b * c + off) * hw..][..ci * hw]);
                    }
                    off += ci;
                    send(v, gv);
                }
            }
            Op::Permute { x, perm } => {
                send(*x, kernels::unpermute_channels(g, out_shape, perm));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (gx, gg, gb) =
                    kernels::batch_norm_backward(g, out_shape, self.value(*gamma).data(), saved);
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mse {
                pred,
                target,
                mask,
                denom,
            } => {
                let p = self.value(*pred);
                let hw = p.height() * p.width();
                let k = if *denom > T::zero() {
                    g[0] * T::of(2.0) / *denom
                } else {
                    T::zero()
                };
                let gp = p
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&a, &t))| k * mask[i / hw] * (a - t))
                    .collect();
                send(*pred, gp);
            }
            Op::Bce {
                logits,
                target,
                mask,
                denom,
            } => {
                let z = self.value(*logits);
                let hw = z.height() * z.width();
                let k = if *denom > T::zero() {
                    g[0] / *denom
                } else {
                    T::zero()
                };
                let lo = T::of(PROB_CLAMP);
                let hi = T::one() - lo;
                let gz = z
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&zi, &t))| {
                        let s = kernels::sigmoid(zi);
                        if s < lo || s > hi {
                            T::zero()
                        } else {
                            k * mask[i / hw] * (s - t)
                        }
                    })
                    .collect();
                send(*logits, gz);
            }
        }
    }
}

const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t([1, 2, 1, 2], &[1.0, -2.0, 3.0, 4.0]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t([1, 1, 2, 2], &[1.0, -2.0, 0.5, 4.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0, 8.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t([1, 1, 1, 2], &[1.0, 2.0]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_from_detached_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t([1, 1, 1, 2], &[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
        let y = g.leaf(t([1, 1, 1, 2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_is_reported_when_checking() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.input(t([1, 1, 1, 1], &[f64::INFINITY]));
        let err = g.scoped("blk", |g| g.relu(x)).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op } if op == "blk.relu"));
    }

    #[test]
    fn first_non_finite_names_the_node() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(false);
        let x = g.input(t([1, 1, 1, 1], &[1.0]));
        let y = g.scoped("a", |g| g.scale(x, f64::NAN)).unwrap();
        g.scoped("b", |g| g.relu(y)).unwrap();
        assert_eq!(g.first_non_finite().as_deref(), Some("a.scale"));
    }

    #[test]
    fn trace_records_scope_and_macs() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([2, 4, 3, 3], 1.0));
        let w = g.leaf(Tensor::full([6, 4, 1, 1], 1.0), true);
        g.scoped("blk", |g| g.conv2d(x, w, None, ConvSpec::pointwise(4, 6)))
            .unwrap();
        let r = &g.trace()[0];
        assert_eq!(r.path, "blk");
        assert_eq!(r.macs, 4 * 6 * 9);
        assert!(r.kind.is_pointwise_conv());
    }
}
