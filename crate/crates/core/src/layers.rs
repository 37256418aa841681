//! Layers built from relaxed filter banks: lifting, pointwise, depthwise and
//! separable group convolutions, the GConv-BN-Act block, the residual
//! bottleneck, the split/fuse block, group spatial pyramid pooling, the
//! transposed upsampler and the group-to-plane transfer block.
//!
//! Every layer has three modes. `Relaxed` trains Δ, `Strict` keeps Δ as a
//! frozen zero tensor, and `Plain` drops the group axis and runs ordinary
//! convolutions of the same topology.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::filters::{build_relaxed_filters, FilterFlavor};
use crate::group::{PerturbationDelta, Representation, ORDER};
use crate::ops::norm::NormMode;
use crate::params::{Forward, ParamId, ParamKind, ParamStore, StatsIds};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    #[default]
    Relaxed,
    Strict,
    Plain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Relaxed => "relaxed",
            Mode::Strict => "strict",
            Mode::Plain => "plain",
        }
    }

    pub fn is_group(self) -> bool {
        self != Mode::Plain
    }

    /// Action on the feature maps produced by group layers in this mode.
    pub fn feature_rep(self) -> Representation {
        if self.is_group() {
            Representation::Regular
        } else {
            Representation::Spatial
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relaxed" => Ok(Mode::Relaxed),
            "strict" => Ok(Mode::Strict),
            "plain" => Ok(Mode::Plain),
            other => Err(format!("unknown mode `{other}` (expected relaxed, strict or plain)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Lifting,
    PgConv,
    DgConv,
    R2GConv,
    Gcba,
    Bottleneck,
    R2NetBlock,
    Gsppf,
    GConcat,
    R2GUp,
    Transfer,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Lifting => "lifting",
            LayerKind::PgConv => "pgconv",
            LayerKind::DgConv => "dgconv",
            LayerKind::R2GConv => "r2gconv",
            LayerKind::Gcba => "gcba",
            LayerKind::Bottleneck => "bottleneck",
            LayerKind::R2NetBlock => "r2net_block",
            LayerKind::Gsppf => "gsppf",
            LayerKind::GConcat => "gconcat",
            LayerKind::R2GUp => "r2gup",
            LayerKind::Transfer => "transfer",
            LayerKind::Linear => "linear",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub mode: Mode,
}

/// Registers parameters for new layers under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    mode: Mode,
    sigma: f64,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore, mode: Mode, sigma: f64) -> Self {
        Self {
            store,
            rng,
            mode,
            sigma,
            prefix: String::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b, T> {
        let prefix = self.name(name);
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            mode: self.mode,
            sigma: self.sigma,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// He-normal initialized weight.
    pub fn weight(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(leaf, shape, std)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, &mut *self.rng);
        self.store.add(self.name(leaf), t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<ParamId> {
        let t = Tensor::full(shape, T::from_f64_lossy(value));
        self.store.add(self.name(leaf), t, kind)
    }

    /// Δ for the current mode: sampled and trainable (relaxed), zero and
    /// frozen (strict), absent (plain).
    pub fn delta(&mut self) -> Result<Option<ParamId>> {
        let name = self.name("delta");
        match self.mode {
            Mode::Plain => Ok(None),
            Mode::Strict => {
                let d = PerturbationDelta::<T>::zeros().into_tensor();
                self.store.add(name, d, ParamKind::Frozen).map(Some)
            }
            Mode::Relaxed => {
                let d = PerturbationDelta::<T>::sample(self.sigma, &mut *self.rng)?.into_tensor();
                self.store.add(name, d, ParamKind::Trainable).map(Some)
            }
        }
    }
}

fn check_channels(op: &'static str, shape: &[usize], c: usize, mode: Mode) -> Result<()> {
    let (rank, ok) = if mode.is_group() {
        (5, shape.len() == 5 && shape[1] == c && shape[2] == ORDER)
    } else {
        (4, shape.len() == 4 && shape[1] == c)
    };
    if ok {
        Ok(())
    } else {
        let layout = if rank == 5 { "(b, c, 4, h, w)" } else { "(b, c, h, w)" };
        Err(shape_err(op, format!("expected {layout} with c = {c}, got {shape:?}")))
    }
}

fn bind_delta<T: Scalar>(fw: &mut Forward<'_, T>, id: Option<ParamId>, op: &'static str) -> Result<Var> {
    let id = id.ok_or_else(|| invalid(op, "group layer without Δ"))?;
    Ok(fw.param(id))
}

/// Common forward interface, used by the equivariance checks.
pub trait Layer {
    fn spec(&self) -> LayerSpec;

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var>;

    fn input_rep(&self) -> Representation {
        self.spec().mode.feature_rep()
    }

    fn output_rep(&self) -> Representation {
        self.spec().mode.feature_rep()
    }
}

/// Lifting convolution `(b, ci, h, w) -> (b, co, 4, h', w')`.
#[derive(Debug, Clone)]
pub struct R2Lifting {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub mode: Mode,
    pub weight: ParamId,
    pub delta: Option<ParamId>,
}

impl R2Lifting {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, k: usize, stride: usize) -> Result<Self> {
        let mode = b.mode();
        let (weight, delta) = if mode.is_group() {
            let w = b.weight("weight", &FilterFlavor::Lifting.init_shape(ci, co, k), ci * k * k)?;
            (w, b.delta()?)
        } else {
            (b.weight("weight", &[co, ci, k, k], ci * k * k)?, None)
        };
        Ok(Self {
            ci,
            co,
            k,
            stride,
            mode,
            weight,
            delta,
        })
    }

    /// The expanded `(co, 4, ci, k, k)` bank as a graph node.
    pub fn bank<T: Scalar>(&self, fw: &mut Forward<'_, T>) -> Result<Var> {
        let w = fw.param(self.weight);
        let d = bind_delta(fw, self.delta, "r2_lifting")?;
        build_relaxed_filters(&mut fw.graph, w, d, FilterFlavor::Lifting)
    }
}

impl Layer for R2Lifting {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Lifting,
            ci: self.ci,
            co: self.co,
            k: self.k,
            stride: self.stride,
            mode: self.mode,
        }
    }

    fn input_rep(&self) -> Representation {
        Representation::Spatial
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.ci {
            return Err(shape_err(
                "r2_lifting",
                format!("expected (b, {}, h, w), got {s:?}", self.ci),
            ));
        }
        let pad = self.k / 2;
        if !self.mode.is_group() {
            let w = fw.param(self.weight);
            return fw.graph.conv2d(x, w, self.stride, pad, 1);
        }
        let bank = self.bank(fw)?;
        let (k, ci, co) = (self.k, self.ci, self.co);
        let w = fw.graph.reshape(bank, &[ORDER * co, ci, k, k])?;
        let y = fw.graph.conv2d(x, w, self.stride, pad, 1)?;
        let ys = fw.graph.shape(y).to_vec();
        fw.graph.reshape(y, &[ys[0], co, ORDER, ys[2], ys[3]])
    }
}

/// Pointwise group convolution `(b, ci, 4, h, w) -> (b, co, 4, h, w)`.
#[derive(Debug, Clone)]
pub struct R2PGConv {
    pub ci: usize,
    pub co: usize,
    pub mode: Mode,
    pub weight: ParamId,
    pub delta: Option<ParamId>,
}

impl R2PGConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize) -> Result<Self> {
        let delta = b.delta()?;
        Self::with_delta(b, ci, co, delta)
    }

    fn with_delta<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, delta: Option<ParamId>) -> Result<Self> {
        let mode = b.mode();
        let weight = if mode.is_group() {
            b.weight("weight", &FilterFlavor::Pointwise.init_shape(ci, co, 1), ORDER * ci)?
        } else {
            b.weight("weight", &[co, ci, 1, 1], ci)?
        };
        Ok(Self {
            ci,
            co,
            mode,
            weight,
            delta,
        })
    }

    pub fn bank<T: Scalar>(&self, fw: &mut Forward<'_, T>) -> Result<Var> {
        let w = fw.param(self.weight);
        let d = bind_delta(fw, self.delta, "r2_pgconv")?;
        build_relaxed_filters(&mut fw.graph, w, d, FilterFlavor::Pointwise)
    }
}

impl Layer for R2PGConv {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::PgConv,
            ci: self.ci,
            co: self.co,
            k: 1,
            stride: 1,
            mode: self.mode,
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        check_channels("r2_pgconv", &s, self.ci, self.mode)?;
        if !self.mode.is_group() {
            let w = fw.param(self.weight);
            return fw.graph.conv2d(x, w, 1, 0, 1);
        }
        let bank = self.bank(fw)?;
        let w = fw.graph.reshape(bank, &[ORDER * self.co, ORDER * self.ci, 1, 1])?;
        let flat = fw.graph.reshape(x, &[s[0], ORDER * self.ci, s[3], s[4]])?;
        let y = fw.graph.conv2d(flat, w, 1, 0, 1)?;
        fw.graph.reshape(y, &[s[0], self.co, ORDER, s[3], s[4]])
    }
}

/// Depthwise group convolution `(b, c, 4, h, w) -> (b, c, 4, h', w')`, or
/// its transpose (stride-`s` upsampling) when `transposed` is set.
#[derive(Debug, Clone)]
pub struct R2DGConv {
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub transposed: bool,
    pub mode: Mode,
    pub weight: ParamId,
    pub delta: Option<ParamId>,
}

impl R2DGConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c: usize, k: usize, stride: usize) -> Result<Self> {
        let delta = b.delta()?;
        Self::with_delta(b, c, k, stride, false, delta)
    }

    fn with_delta<T: Scalar>(
        b: &mut Builder<'_, T>,
        c: usize,
        k: usize,
        stride: usize,
        transposed: bool,
        delta: Option<ParamId>,
    ) -> Result<Self> {
        let mode = b.mode();
        let weight = if mode.is_group() {
            b.weight("weight", &FilterFlavor::Depthwise.init_shape(1, c, k), k * k)?
        } else {
            b.weight("weight", &[c, 1, k, k], k * k)?
        };
        Ok(Self {
            c,
            k,
            stride,
            transposed,
            mode,
            weight,
            delta,
        })
    }

    pub fn bank<T: Scalar>(&self, fw: &mut Forward<'_, T>) -> Result<Var> {
        let w = fw.param(self.weight);
        let d = bind_delta(fw, self.delta, "r2_dgconv")?;
        build_relaxed_filters(&mut fw.graph, w, d, FilterFlavor::Depthwise)
    }

    fn apply<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, w: Var, channels: usize) -> Result<Var> {
        if self.transposed {
            fw.graph.conv2d_transposed(x, w, self.stride, 0, channels)
        } else {
            fw.graph.conv2d(x, w, self.stride, self.k / 2, channels)
        }
    }
}

impl Layer for R2DGConv {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::DgConv,
            ci: self.c,
            co: self.c,
            k: self.k,
            stride: self.stride,
            mode: self.mode,
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        check_channels("r2_dgconv", &s, self.c, self.mode)?;
        if !self.mode.is_group() {
            let w = fw.param(self.weight);
            return self.apply(fw, x, w, self.c);
        }
        let bank = self.bank(fw)?;
        let groups = ORDER * self.c;
        let w = fw.graph.reshape(bank, &[groups, 1, self.k, self.k])?;
        let flat = fw.graph.reshape(x, &[s[0], groups, s[3], s[4]])?;
        let y = self.apply(fw, flat, w, groups)?;
        let ys = fw.graph.shape(y).to_vec();
        fw.graph.reshape(y, &[s[0], self.c, ORDER, ys[2], ys[3]])
    }
}

/// Separable group convolution: pointwise then depthwise, one shared Δ.
#[derive(Debug, Clone)]
pub struct R2GConv {
    pub pg: R2PGConv,
    pub dg: R2DGConv,
    pub delta: Option<ParamId>,
}

impl R2GConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, k: usize, stride: usize) -> Result<Self> {
        Self::build(b, ci, co, k, stride, false)
    }

    fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        transposed: bool,
    ) -> Result<Self> {
        let delta = b.delta()?;
        let pg = R2PGConv::with_delta(&mut b.scope("pw"), ci, co, delta)?;
        let dg = R2DGConv::with_delta(&mut b.scope("dw"), co, k, stride, transposed, delta)?;
        Ok(Self { pg, dg, delta })
    }
}

impl Layer for R2GConv {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::R2GConv,
            ci: self.pg.ci,
            co: self.pg.co,
            k: self.dg.k,
            stride: self.dg.stride,
            mode: self.pg.mode,
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.pg.forward(fw, x)?;
        self.dg.forward(fw, y)
    }
}

/// Batch normalization with one mean/variance per channel, pooled over the
/// batch, group and spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsIds,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        let gamma = b.constant("gamma", &[c], 1.0, ParamKind::Trainable)?;
        let beta = b.constant("beta", &[c], 0.0, ParamKind::Trainable)?;
        let mean = b.constant("running_mean", &[c], 0.0, ParamKind::Buffer)?;
        let var = b.constant("running_var", &[c], 1.0, ParamKind::Buffer)?;
        Ok(Self {
            c,
            gamma,
            beta,
            stats: StatsIds { mean, var },
        })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = fw.param(self.gamma);
        let beta = fw.param(self.beta);
        let mode = fw.mode();
        let running = match mode {
            NormMode::Eval => Some(fw.running_stats(self.stats)),
            NormMode::Train => None,
        };
        let (y, batch) = fw.graph.batch_norm(x, gamma, beta, running.as_ref(), mode)?;
        if let Some((m, v)) = batch {
            fw.record_stats(self.stats, m, v);
        }
        Ok(y)
    }
}

/// GConv → BatchNorm → SiLU.
#[derive(Debug, Clone)]
pub struct Gcba {
    pub conv: R2GConv,
    pub bn: BatchNorm,
}

impl Gcba {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, k: usize, stride: usize) -> Result<Self> {
        let conv = R2GConv::new(b, ci, co, k, stride)?;
        let bn = BatchNorm::new(&mut b.scope("bn"), co)?;
        Ok(Self { conv, bn })
    }
}

impl Layer for Gcba {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Gcba,
            ..self.conv.spec()
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.graph.silu(y))
    }
}

/// Lifting → BatchNorm → SiLU, the network stem.
#[derive(Debug, Clone)]
pub struct LiftingBlock {
    pub lift: R2Lifting,
    pub bn: BatchNorm,
}

impl LiftingBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, k: usize, stride: usize) -> Result<Self> {
        let lift = R2Lifting::new(b, ci, co, k, stride)?;
        let bn = BatchNorm::new(&mut b.scope("bn"), co)?;
        Ok(Self { lift, bn })
    }
}

impl Layer for LiftingBlock {
    fn spec(&self) -> LayerSpec {
        self.lift.spec()
    }

    fn input_rep(&self) -> Representation {
        Representation::Spatial
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.lift.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.graph.silu(y))
    }
}

/// Two 3×3 GCBA blocks with an identity shortcut when shapes allow.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: Gcba,
    pub cv2: Gcba,
    pub residual: bool,
}

impl Bottleneck {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, k: usize) -> Result<Self> {
        let cv1 = Gcba::new(&mut b.scope("cv1"), ci, co, k, 1)?;
        let cv2 = Gcba::new(&mut b.scope("cv2"), co, co, k, 1)?;
        Ok(Self {
            cv1,
            cv2,
            residual: ci == co,
        })
    }
}

impl Layer for Bottleneck {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Bottleneck,
            ci: self.cv1.conv.pg.ci,
            co: self.cv2.conv.pg.co,
            k: self.cv1.conv.dg.k,
            stride: 1,
            mode: self.cv1.conv.pg.mode,
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(fw, x)?;
        let y = self.cv2.forward(fw, y)?;
        if self.residual {
            fw.graph.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// Split the channels in half, run one half through a bottleneck chain,
/// concatenate every intermediate and fuse with a pointwise GCBA.
#[derive(Debug, Clone)]
pub struct R2NetBlock {
    pub ci: usize,
    pub co: usize,
    pub blocks: Vec<Bottleneck>,
    pub fuse: Gcba,
}

impl R2NetBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, k: usize, n_bottlenecks: usize) -> Result<Self> {
        if ci % 2 != 0 {
            return Err(invalid("r2net_block", format!("channel count {ci} must be even")));
        }
        let half = ci / 2;
        let blocks = (0..n_bottlenecks)
            .map(|i| Bottleneck::new(&mut b.scope(&format!("m{i}")), half, half, k))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Gcba::new(&mut b.scope("fuse"), (2 + n_bottlenecks) * half, co, 1, 1)?;
        Ok(Self { ci, co, blocks, fuse })
    }
}

impl Layer for R2NetBlock {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::R2NetBlock,
            ci: self.ci,
            co: self.co,
            k: self.blocks.first().map_or(1, |m| m.cv1.conv.dg.k),
            stride: 1,
            mode: self.fuse.conv.pg.mode,
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mode = self.fuse.conv.pg.mode;
        check_channels("r2net_block", fw.graph.shape(x), self.ci, mode)?;
        let half = self.ci / 2;
        let a = fw.graph.narrow(x, 1, 0, half)?;
        let mut cur = fw.graph.narrow(x, 1, half, half)?;
        let mut parts = vec![a, cur];
        for m in &self.blocks {
            cur = m.forward(fw, cur)?;
            parts.push(cur);
        }
        let cat = fw.graph.concat(&parts, 1)?;
        self.fuse.forward(fw, cat)
    }
}

/// Group spatial pyramid pooling: pointwise reduce, three chained stride-1
/// max pools per group slice, concatenate, pointwise fuse.
#[derive(Debug, Clone)]
pub struct Gsppf {
    pub ci: usize,
    pub co: usize,
    pub pool_k: usize,
    pub cv1: Gcba,
    pub cv2: Gcba,
}

impl Gsppf {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize, pool_k: usize) -> Result<Self> {
        if pool_k % 2 == 0 {
            return Err(invalid("gsppf", format!("pool size {pool_k} must be odd")));
        }
        let hidden = ci / 2;
        if hidden == 0 {
            return Err(invalid("gsppf", "needs at least 2 input channels"));
        }
        let cv1 = Gcba::new(&mut b.scope("cv1"), ci, hidden, 1, 1)?;
        let cv2 = Gcba::new(&mut b.scope("cv2"), 4 * hidden, co, 1, 1)?;
        Ok(Self {
            ci,
            co,
            pool_k,
            cv1,
            cv2,
        })
    }

    fn pool<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        let (k, p) = (self.pool_k, self.pool_k / 2);
        if s.len() == 5 {
            let flat = fw.graph.reshape(x, &[s[0], s[1] * s[2], s[3], s[4]])?;
            let y = fw.graph.max_pool2d(flat, k, 1, p)?;
            fw.graph.reshape(y, &s)
        } else {
            fw.graph.max_pool2d(x, k, 1, p)
        }
    }
}

impl Layer for Gsppf {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Gsppf,
            ci: self.ci,
            co: self.co,
            k: self.pool_k,
            stride: 1,
            mode: self.cv1.conv.pg.mode,
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] < self.pool_k / 2 + 1 || s[s.len() - 2] < self.pool_k / 2 + 1 {
            return Err(shape_err(
                "gsppf",
                format!("spatial dims of {s:?} too small for pool size {}", self.pool_k),
            ));
        }
        let y0 = self.cv1.forward(fw, x)?;
        let y1 = self.pool(fw, y0)?;
        let y2 = self.pool(fw, y1)?;
        let y3 = self.pool(fw, y2)?;
        let cat = fw.graph.concat(&[y0, y1, y2, y3], 1)?;
        self.cv2.forward(fw, cat)
    }
}

/// Channel concatenation of group feature maps with matching batch, group
/// and spatial dims.
pub fn gconcat<T: Scalar>(fw: &mut Forward<'_, T>, parts: &[Var]) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("gconcat", "needs at least one input"))?;
    let s0 = fw.graph.shape(*first).to_vec();
    for &p in &parts[1..] {
        let s = fw.graph.shape(p);
        if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
            return Err(shape_err("gconcat", format!("{s0:?} vs {s:?}")));
        }
    }
    if parts.len() == 1 {
        return Ok(*first);
    }
    fw.graph.concat(parts, 1)
}

/// Pointwise group conv followed by a stride-2 transposed depthwise group
/// conv (k = 2), doubling the spatial size.
#[derive(Debug, Clone)]
pub struct R2GUp {
    pub conv: R2GConv,
}

impl R2GUp {
    pub const KERNEL: usize = 2;

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize) -> Result<Self> {
        let conv = R2GConv::build(b, ci, co, Self::KERNEL, 2, true)?;
        Ok(Self { conv })
    }
}

impl Layer for R2GUp {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::R2GUp,
            ..self.conv.spec()
        }
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.conv.forward(fw, x)
    }
}

/// Max over the group axis, then a biased 1×1 conv, BatchNorm and SiLU.
/// The output is a plain `(b, co, h, w)` map.
#[derive(Debug, Clone)]
pub struct TransferBlock {
    pub ci: usize,
    pub co: usize,
    pub mode: Mode,
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
}

impl TransferBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ci: usize, co: usize) -> Result<Self> {
        let mode = b.mode();
        let weight = b.weight("weight", &[co, ci, 1, 1], ci)?;
        let bias = b.constant("bias", &[co], 0.0, ParamKind::Trainable)?;
        let bn = BatchNorm::new(&mut b.scope("bn"), co)?;
        Ok(Self {
            ci,
            co,
            mode,
            weight,
            bias,
            bn,
        })
    }
}

impl Layer for TransferBlock {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Transfer,
            ci: self.ci,
            co: self.co,
            k: 1,
            stride: 1,
            mode: self.mode,
        }
    }

    fn output_rep(&self) -> Representation {
        Representation::Spatial
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        check_channels("transfer_block", fw.graph.shape(x), self.ci, self.mode)?;
        let plane = if self.mode.is_group() {
            fw.graph.max_axis(x, 2)?
        } else {
            x
        };
        let w = fw.param(self.weight);
        let bias = fw.param(self.bias);
        let y = fw.graph.conv2d(plane, w, 1, 0, 1)?;
        let y = fw.graph.add_channel_bias(y, bias)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.graph.silu(y))
    }
}

/// Fully connected layer `(b, inp) -> (b, out)` with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, inp: usize, out: usize, std: f64) -> Result<Self> {
        let weight = b.normal("weight", &[inp, out], std)?;
        let bias = b.constant("bias", &[out], 0.0, ParamKind::Trainable)?;
        Ok(Self {
            inp,
            out,
            weight,
            bias,
        })
    }
}

impl Layer for Linear {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Linear,
            ci: self.inp,
            co: self.out,
            k: 1,
            stride: 1,
            mode: Mode::Plain,
        }
    }

    fn input_rep(&self) -> Representation {
        Representation::Trivial
    }

    fn output_rep(&self) -> Representation {
        Representation::Trivial
    }

    fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let bias = fw.param(self.bias);
        let y = fw.graph.matmul(x, w)?;
        fw.graph.add_channel_bias(y, bias)
    }
}

/// Evaluates a layer on a concrete tensor in inference mode.
pub fn eval_layer<T: Scalar, L: Layer>(layer: &L, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut fw = Forward::eval(store);
    let xv = fw.graph.constant(x.clone());
    let y = layer.forward(&mut fw, xv)?;
    Ok(fw.graph.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::C4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(11))
    }

    fn max_equiv_err<L: Layer>(layer: &L, store: &ParamStore<f64>, x: &Tensor<f64>) -> f64 {
        let y = eval_layer(layer, store, x).unwrap();
        let mut worst = 0.0f64;
        for g in C4::all() {
            let gx = layer.input_rep().act(g, x).unwrap();
            let lhs = eval_layer(layer, store, &gx).unwrap();
            let rhs = layer.output_rep().act(g, &y).unwrap();
            worst = worst.max(lhs.max_abs_diff(&rhs).unwrap());
        }
        worst
    }

    #[test]
    fn table_rows_parameter_counts() {
        let (mut s, mut rng) = setup();
        let mut b = Builder::new(&mut s, &mut rng, Mode::Relaxed, 0.1);
        LiftingBlock::new(&mut b.scope("row0"), 3, 16, 3, 1).unwrap();
        Gcba::new(&mut b.scope("row1"), 16, 32, 3, 2).unwrap();
        R2GUp::new(&mut b.scope("row10"), 128, 64).unwrap();
        TransferBlock::new(&mut b.scope("row22"), 64, 64).unwrap();
        let count = |p: &str| -> usize {
            s.entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(p))
                .map(|e| e.value.numel())
                .sum()
        };
        assert_eq!(count("row0."), 480);
        assert_eq!(count("row1."), 2416);
        assert_eq!(count("row10."), 33040);
        assert_eq!(count("row22."), 4288);
    }

    #[test]
    fn strict_mode_freezes_delta() {
        let (mut s, mut rng) = setup();
        let mut b = Builder::new(&mut s, &mut rng, Mode::Strict, 0.1);
        R2GConv::new(&mut b, 16, 32, 3, 1).unwrap();
        assert_eq!(s.trainable_count(), 4 * 16 * 32 + 9 * 32);
        let d = s.id("delta").unwrap();
        assert_eq!(s.entry(d).kind, ParamKind::Frozen);
        assert!(s.get(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_follow_the_contracts() {
        let (mut s, mut rng) = setup();
        let mut b = Builder::new(&mut s, &mut rng, Mode::Relaxed, 0.1);
        let lift = R2Lifting::new(&mut b.scope("l"), 3, 4, 3, 1).unwrap();
        let pg = R2PGConv::new(&mut b.scope("p"), 4, 6).unwrap();
        let dg = R2DGConv::new(&mut b.scope("d"), 6, 3, 2).unwrap();
        let up = R2GUp::new(&mut b.scope("u"), 6, 2).unwrap();
        let tb = TransferBlock::new(&mut b.scope("t"), 2, 5).unwrap();
        let x = Tensor::<f64>::randn(&[2, 3, 9, 9], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let y = eval_layer(&lift, &s, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 9, 9]);
        let y = eval_layer(&pg, &s, &y).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 9, 9]);
        let y = eval_layer(&dg, &s, &y).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 5, 5]);
        let y = eval_layer(&up, &s, &y).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4, 10, 10]);
        let y = eval_layer(&tb, &s, &y).unwrap();
        assert_eq!(y.shape(), &[2, 5, 10, 10]);
        assert!(eval_layer(&pg, &s, &x).is_err());
    }

    #[test]
    fn strict_layers_are_equivariant_in_f64() {
        let (mut s, mut rng) = setup();
        let mut b = Builder::new(&mut s, &mut rng, Mode::Strict, 0.0);
        let lift = LiftingBlock::new(&mut b.scope("l"), 2, 3, 3, 2).unwrap();
        let g = Gcba::new(&mut b.scope("g"), 3, 4, 3, 2).unwrap();
        let blk = R2NetBlock::new(&mut b.scope("b"), 4, 4, 3, 1).unwrap();
        let sp = Gsppf::new(&mut b.scope("s"), 4, 4, 5).unwrap();
        let up = R2GUp::new(&mut b.scope("u"), 4, 2).unwrap();
        let tb = TransferBlock::new(&mut b.scope("t"), 4, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 2, 9, 9], 1.0, &mut r);
        let f = Tensor::<f64>::randn(&[2, 3, 4, 9, 9], 1.0, &mut r);
        let f4 = Tensor::<f64>::randn(&[2, 4, 4, 9, 9], 1.0, &mut r);
        assert!(max_equiv_err(&lift, &s, &x) < 1e-10);
        assert!(max_equiv_err(&g, &s, &f) < 1e-10);
        assert!(max_equiv_err(&blk, &s, &f4) < 1e-10);
        assert!(max_equiv_err(&sp, &s, &f4) < 1e-10);
        assert!(max_equiv_err(&up, &s, &f4) < 1e-10);
        assert!(max_equiv_err(&tb, &s, &f4) < 1e-10);
    }

    #[test]
    fn relaxed_lifting_breaks_equivariance() {
        let (mut s, mut rng) = setup();
        let mut b = Builder::new(&mut s, &mut rng, Mode::Relaxed, 0.3);
        let lift = R2Lifting::new(&mut b, 1, 2, 3, 1).unwrap();
        let x = Tensor::<f64>::randn(&[1, 1, 7, 7], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(max_equiv_err(&lift, &s, &x) > 1e-3);
    }

    #[test]
    fn odd_block_width_is_rejected() {
        let (mut s, mut rng) = setup();
        let mut b = Builder::new(&mut s, &mut rng, Mode::Strict, 0.0);
        assert!(R2NetBlock::new(&mut b, 5, 4, 3, 1).is_err());
    }

    #[test]
    fn gconcat_checks_dims() {
        let s = ParamStore::<f64>::new();
        let mut fw = Forward::eval(&s);
        let a = fw.graph.constant(Tensor::zeros(&[1, 2, 4, 3, 3]));
        let c = fw.graph.constant(Tensor::zeros(&[1, 1, 4, 3, 3]));
        let bad = fw.graph.constant(Tensor::zeros(&[1, 1, 4, 2, 2]));
        let y = gconcat(&mut fw, &[a, c]).unwrap();
        assert_eq!(fw.graph.shape(y), &[1, 3, 4, 3, 3]);
        assert_eq!(gconcat(&mut fw, &[a]).unwrap(), a);
        assert!(gconcat(&mut fw, &[a, bad]).is_err());
    }
}
