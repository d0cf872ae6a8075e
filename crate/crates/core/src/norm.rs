//! Feature-map normalization as one kernel parameterised by a statistic
//! partition.
//!
//! Every method follows the same four steps: split the `(N, C, H, W)` index
//! set into statistic groups, compute a mean and biased variance per group,
//! normalize each element with its group's statistics, then apply the
//! per-channel affine `y = gamma_c * x_hat + beta_c`. The methods differ only
//! in how the index set is split:
//!
//! | method | one group per      | groups      |
//! |--------|--------------------|-------------|
//! | BN     | channel `c`        | `C`         |
//! | IN     | `(n, c)`           | `N * C`     |
//! | LN     | sample `n`         | `N`         |
//! | GN     | `(n, channel block)` | `N * G`   |
//! | PN     | position `(n, h, w)` | `N * H * W` |
//! | BGN    | block of the merged `C*H*W` axis, shared by the whole batch | `G` |
//!
//! BN and BGN pool statistics across the batch and therefore keep running
//! averages for inference; the others recompute statistics from the input in
//! both modes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const GN_DEFAULT_GROUPS: usize = 32;

/// Normalization method without its group count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormMethod {
    Batch,
    Instance,
    Layer,
    Group,
    Positional,
    BatchGroup,
}

impl NormMethod {
    pub const ALL: [NormMethod; 6] = [
        NormMethod::Batch,
        NormMethod::Instance,
        NormMethod::Layer,
        NormMethod::Group,
        NormMethod::Positional,
        NormMethod::BatchGroup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormMethod::Batch => "bn",
            NormMethod::Instance => "in",
            NormMethod::Layer => "ln",
            NormMethod::Group => "gn",
            NormMethod::Positional => "pn",
            NormMethod::BatchGroup => "bgn",
        }
    }

    pub fn takes_groups(self) -> bool {
        matches!(self, NormMethod::Group | NormMethod::BatchGroup)
    }

    pub fn uses_running_stats(self) -> bool {
        matches!(self, NormMethod::Batch | NormMethod::BatchGroup)
    }

    /// Builds the kind; `groups` is ignored unless the method takes one.
    pub fn with_groups(self, groups: usize) -> NormKind {
        match self {
            NormMethod::Batch => NormKind::Batch,
            NormMethod::Instance => NormKind::Instance,
            NormMethod::Layer => NormKind::Layer,
            NormMethod::Group => NormKind::Group(groups),
            NormMethod::Positional => NormKind::Positional,
            NormMethod::BatchGroup => NormKind::BatchGroup(groups),
        }
    }
}

impl fmt::Display for NormMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown normalizer {s:?}")))
    }
}

/// A normalization method together with its group count where it has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    Instance,
    Layer,
    /// Group normalization with `G` channel groups.
    Group(usize),
    Positional,
    /// Batch group normalization with `G` groups of the merged dimension.
    BatchGroup(usize),
}

impl NormKind {
    pub fn method(self) -> NormMethod {
        match self {
            NormKind::Batch => NormMethod::Batch,
            NormKind::Instance => NormMethod::Instance,
            NormKind::Layer => NormMethod::Layer,
            NormKind::Group(_) => NormMethod::Group,
            NormKind::Positional => NormMethod::Positional,
            NormKind::BatchGroup(_) => NormMethod::BatchGroup,
        }
    }

    /// `G` for GN/BGN, 1 otherwise.
    pub fn group_count(self) -> usize {
        match self {
            NormKind::Group(g) | NormKind::BatchGroup(g) => g,
            _ => 1,
        }
    }

    pub fn uses_running_stats(self) -> bool {
        self.method().uses_running_stats()
    }

    /// Checks the group-count constraints against a feature-map shape.
    pub fn validate(self, shape: Shape4) -> Result<()> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch(format!("degenerate shape {shape}")));
        }
        let (g, limit) = match self {
            NormKind::Group(g) => (g, shape.c),
            NormKind::BatchGroup(g) => (g, shape.merged()),
            _ => return Ok(()),
        };
        if g == 0 {
            return Err(Error::InvalidGroupCount(g));
        }
        if g > limit {
            return Err(Error::GroupCountExceedsDimension { groups: g, limit });
        }
        Ok(())
    }

    /// Number of running-statistic slots for this kind at a given layer shape.
    pub fn running_slots(self, channels: usize) -> Option<usize> {
        match self {
            NormKind::Batch => Some(channels),
            NormKind::BatchGroup(g) => Some(g),
            _ => None,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Group(g) | NormKind::BatchGroup(g) => write!(f, "{}(G={g})", self.method()),
            _ => write!(f, "{}", self.method()),
        }
    }
}

/// Group count used for a method at a given per-worker batch size.
///
/// BGN follows the published schedule {128: 512, 64: 256, 32: 128, 16: 64,
/// 8: 16, 4: 2, 2: 1}. Other batch sizes are rounded to the nearest power of
/// two; above 128 the 4x ratio is carried on, below 2 the result is 1. The
/// result is clamped to `[1, merged]`. GN uses 32 clamped to `[1, channels]`.
pub fn select_group_count(method: NormMethod, batch_size: usize, channels: usize, merged: usize) -> usize {
    match method {
        NormMethod::BatchGroup => {
            let b = batch_size.max(1) as f64;
            let exp = b.log2().round() as u32;
            let pow = 1usize << exp.min(40);
            let g = match pow {
                0..=1 => 1,
                2 => 1,
                4 => 2,
                8 => 16,
                16 => 64,
                32 => 128,
                64 => 256,
                p => 4 * p,
            };
            g.clamp(1, merged.max(1))
        }
        NormMethod::Group => GN_DEFAULT_GROUPS.clamp(1, channels.max(1)),
        _ => 1,
    }
}

/// Identifies a statistic group by the coordinates it is pooled over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKey {
    Channel { c: usize },
    SampleChannel { n: usize, c: usize },
    Sample { n: usize },
    SampleGroup { n: usize, g: usize },
    Position { n: usize, h: usize, w: usize },
    MergedGroup { g: usize },
}

/// Assignment of every element of an `(N, C, H, W)` tensor to exactly one
/// statistic group.
#[derive(Debug, Clone, PartialEq)]
pub struct StatPartition {
    kind: NormKind,
    shape: Shape4,
    group_of: Vec<u32>,
    sizes: Vec<usize>,
}

/// Builds the statistic partition of `kind` over a tensor of `shape`.
///
/// Block sizes use floor division (`C // G` channels for GN, `D // G`
/// merged positions for BGN) and the last group absorbs any remainder.
pub fn build_partition(kind: NormKind, shape: Shape4) -> Result<StatPartition> {
    kind.validate(shape)?;
    let Shape4 { n: bn, c: cn, h: hn, w: wn } = shape;
    let plane = shape.plane();
    let merged = shape.merged();
    let num_groups = match kind {
        NormKind::Batch => cn,
        NormKind::Instance => bn * cn,
        NormKind::Layer => bn,
        NormKind::Group(g) => bn * g,
        NormKind::Positional => bn * plane,
        NormKind::BatchGroup(g) => g,
    };
    if num_groups > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many statistic groups".into()));
    }
    let mut group_of = Vec::with_capacity(shape.len());
    for n in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let id = match kind {
                        NormKind::Batch => c,
                        NormKind::Instance => n * cn + c,
                        NormKind::Layer => n,
                        NormKind::Group(g) => {
                            let block = cn / g;
                            n * g + (c / block).min(g - 1)
                        }
                        NormKind::Positional => (n * hn + h) * wn + w,
                        NormKind::BatchGroup(g) => {
                            let block = merged / g;
                            let d = (c * hn + h) * wn + w;
                            (d / block).min(g - 1)
                        }
                    };
                    group_of.push(id as u32);
                }
            }
        }
    }
    let mut sizes = vec![0usize; num_groups];
    for &g in &group_of {
        sizes[g as usize] += 1;
    }
    Ok(StatPartition {
        kind,
        shape,
        group_of,
        sizes,
    })
}

impl StatPartition {
    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Group id of a flat element index.
    #[inline]
    pub fn group_of(&self, index: usize) -> usize {
        self.group_of[index] as usize
    }

    /// Flat element indices of group `g`, ascending.
    pub fn indices(&self, g: usize) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter(|(_, &id)| id as usize == g)
            .map(|(i, _)| i)
            .collect()
    }

    /// All groups' index lists at once, each ascending.
    pub fn all_indices(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &g) in self.group_of.iter().enumerate() {
            out[g as usize].push(i);
        }
        out
    }

    pub fn key(&self, g: usize) -> GroupKey {
        let s = self.shape;
        match self.kind {
            NormKind::Batch => GroupKey::Channel { c: g },
            NormKind::Instance => GroupKey::SampleChannel { n: g / s.c, c: g % s.c },
            NormKind::Layer => GroupKey::Sample { n: g },
            NormKind::Group(groups) => GroupKey::SampleGroup {
                n: g / groups,
                g: g % groups,
            },
            NormKind::Positional => GroupKey::Position {
                n: g / s.plane(),
                h: (g % s.plane()) / s.w,
                w: g % s.w,
            },
            NormKind::BatchGroup(_) => GroupKey::MergedGroup { g },
        }
    }

    /// Per-group `(means, biased variances)`, accumulated in `f64`. Each
    /// group is summed sequentially in ascending index order.
    pub fn statistics<T: Real>(&self, x: &Tensor4<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.shape() != self.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} vs partition {}",
                x.shape(),
                self.shape
            )));
        }
        let k = self.num_groups();
        let mut sums = vec![0.0f64; k];
        for (&g, v) in self.group_of.iter().zip(x.data()) {
            sums[g as usize] += v.to_f64();
        }
        let means: Vec<f64> = sums.iter().zip(&self.sizes).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0f64; k];
        for (&g, v) in self.group_of.iter().zip(x.data()) {
            let d = v.to_f64() - means[g as usize];
            sq[g as usize] += d * d;
        }
        let vars = sq.iter().zip(&self.sizes).map(|(s, &n)| s / n as f64).collect();
        Ok((means, vars))
    }
}

/// Per-channel affine parameters and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

impl<T: Real> NormParams<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::from_f64(1.0); channels],
            beta: vec![T::zero(); channels],
            dgamma: vec![T::zero(); channels],
            dbeta: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Exponential moving averages of group statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    /// Fresh statistics: means 0, variances 1.
    pub fn new(slots: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside (0, 1]"
            )));
        }
        Ok(Self {
            means: vec![0.0; slots],
            vars: vec![1.0; slots],
            momentum,
        })
    }

    /// Running statistics sized for `kind` at a layer with `channels` channels.
    pub fn for_kind(kind: NormKind, channels: usize, momentum: f64) -> Result<Self> {
        let slots = kind
            .running_slots(channels)
            .ok_or(Error::NoRunningStats(kind.method().name()))?;
        Self::new(slots, momentum)
    }

    pub fn slots(&self) -> usize {
        self.means.len()
    }

    /// `running <- (1 - m) * running + m * batch`, returned as a new value.
    pub fn blend(&self, means: &[f64], vars: &[f64]) -> Result<RunningStats> {
        if means.len() != self.slots() || vars.len() != self.slots() {
            return Err(Error::RunningStatShape {
                expected: self.slots(),
                actual: means.len(),
            });
        }
        let m = self.momentum;
        Ok(RunningStats {
            means: self.means.iter().zip(means).map(|(r, b)| (1.0 - m) * r + m * b).collect(),
            vars: self
                .vars
                .iter()
                .zip(vars)
                .map(|(r, b)| ((1.0 - m) * r + m * b).max(0.0))
                .collect(),
            momentum: m,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Saved forward state: enough to compute the exact backward pass without the
/// forward input.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub partition: StatPartition,
    pub mode: Mode,
    /// True when the statistics came from this input (train mode, or any
    /// mode for IN/LN/GN/PN); false when they were read from running stats.
    pub batch_statistics: bool,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub x_hat: Vec<T>,
    pub eps: f64,
}

impl<T> NormCache<T> {
    pub fn shape(&self) -> Shape4 {
        self.partition.shape()
    }
}

fn inv_std(var: f64, eps: f64) -> f64 {
    let denom = var + eps;
    // A zero-variance group with eps = 0 normalizes to 0 instead of NaN.
    if denom > 0.0 {
        1.0 / denom.sqrt()
    } else {
        0.0
    }
}

/// Normalizes `x` over the groups of `part` and applies the affine map.
///
/// In [`Mode::Infer`], BN and BGN read `running` in place of batch
/// statistics; the other methods compute statistics from `x` in both modes.
pub fn norm_forward<T: Real>(
    x: &Tensor4<T>,
    part: &StatPartition,
    params: &NormParams<T>,
    running: Option<&RunningStats>,
    mode: Mode,
    eps: f64,
) -> Result<(Tensor4<T>, NormCache<T>)> {
    let shape = part.shape();
    if x.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "input {} vs partition {shape}",
            x.shape()
        )));
    }
    if params.channels() != shape.c {
        return Err(Error::ShapeMismatch(format!(
            "{} affine channels for input with {} channels",
            params.channels(),
            shape.c
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be finite and >= 0")));
    }
    if !x.all_finite() {
        return Err(Error::NonFiniteActivation);
    }

    let from_running = mode == Mode::Infer && part.kind().uses_running_stats();
    let (means, vars) = if from_running {
        let r = running.ok_or(Error::NoRunningStats("inference without running stats"))?;
        if r.slots() != part.num_groups() {
            return Err(Error::RunningStatShape {
                expected: part.num_groups(),
                actual: r.slots(),
            });
        }
        (r.means.clone(), r.vars.clone())
    } else {
        part.statistics(x)?
    };
    let inv: Vec<f64> = vars.iter().map(|&v| inv_std(v, eps)).collect();

    let plane = shape.plane();
    let mut y = Vec::with_capacity(shape.len());
    let mut x_hat = Vec::with_capacity(shape.len());
    for (i, v) in x.data().iter().enumerate() {
        let g = part.group_of(i);
        let c = (i / plane) % shape.c;
        let xh = (v.to_f64() - means[g]) * inv[g];
        x_hat.push(T::from_f64(xh));
        y.push(T::from_f64(params.gamma[c].to_f64() * xh + params.beta[c].to_f64()));
    }
    let cache = NormCache {
        partition: part.clone(),
        mode,
        batch_statistics: !from_running,
        means,
        vars,
        inv_std: inv,
        x_hat,
        eps,
    };
    Ok((Tensor4::from_vec(shape, y)?, cache))
}

/// Backward variants. Only [`BackwardVariant::Exact`] is correct; the others
/// each drop or corrupt one term and exist so the gradient checker can show
/// that it catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackwardVariant {
    Exact,
    DropMeanTerm,
    DropVarianceTerm,
    WrongGroupSize,
}

impl BackwardVariant {
    pub const MUTATIONS: [BackwardVariant; 3] = [
        BackwardVariant::DropMeanTerm,
        BackwardVariant::DropVarianceTerm,
        BackwardVariant::WrongGroupSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackwardVariant::Exact => "exact",
            BackwardVariant::DropMeanTerm => "drop-mean",
            BackwardVariant::DropVarianceTerm => "drop-var",
            BackwardVariant::WrongGroupSize => "wrong-k",
        }
    }
}

impl FromStr for BackwardVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [BackwardVariant::Exact]
            .into_iter()
            .chain(BackwardVariant::MUTATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown backward variant {s:?}")))
    }
}

/// Gradients of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads<T> {
    pub dx: Tensor4<T>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Exact backward pass of [`norm_forward`].
pub fn norm_backward<T: Real>(dy: &Tensor4<T>, cache: &NormCache<T>, params: &NormParams<T>) -> Result<NormGrads<T>> {
    norm_backward_variant(dy, cache, params, BackwardVariant::Exact)
}

/// Backward pass with a selectable (possibly deliberately wrong) variant.
///
/// For a group of size `K` with `dxh = dy * gamma`:
/// `dvar = -1/2 * inv_std^3 * sum(dxh * (x - mu))`,
/// `dmu = -inv_std * sum(dxh)`,
/// `dx = dxh * inv_std + dvar * 2 (x - mu) / K + dmu / K`.
/// When the statistics were read from running averages they are constants and
/// `dx = dxh * inv_std`.
pub fn norm_backward_variant<T: Real>(
    dy: &Tensor4<T>,
    cache: &NormCache<T>,
    params: &NormParams<T>,
    variant: BackwardVariant,
) -> Result<NormGrads<T>> {
    let shape = cache.shape();
    if dy.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {} vs cached {shape}",
            dy.shape()
        )));
    }
    if params.channels() != shape.c || cache.x_hat.len() != shape.len() {
        return Err(Error::ShapeMismatch("cache or affine parameters do not match the layer".into()));
    }
    let part = &cache.partition;
    let plane = shape.plane();
    let k = part.num_groups();

    let mut dgamma = vec![0.0f64; shape.c];
    let mut dbeta = vec![0.0f64; shape.c];
    // sum(dxh) and sum(dxh * x_hat) per group.
    let mut sum_dxh = vec![0.0f64; k];
    let mut sum_dxh_xhat = vec![0.0f64; k];
    for (i, (g_up, xh)) in dy.data().iter().zip(&cache.x_hat).enumerate() {
        let c = (i / plane) % shape.c;
        let g = part.group_of(i);
        let up = g_up.to_f64();
        let xh = xh.to_f64();
        dgamma[c] += up * xh;
        dbeta[c] += up;
        let dxh = up * params.gamma[c].to_f64();
        sum_dxh[g] += dxh;
        sum_dxh_xhat[g] += dxh * xh;
    }

    let mut dx = Vec::with_capacity(shape.len());
    if !cache.batch_statistics {
        for (i, g_up) in dy.data().iter().enumerate() {
            let c = (i / plane) % shape.c;
            let g = part.group_of(i);
            dx.push(T::from_f64(g_up.to_f64() * params.gamma[c].to_f64() * cache.inv_std[g]));
        }
    } else {
        // (x - mu) = x_hat / inv_std, so sum(dxh * (x - mu)) * inv_std^3 =
        // sum(dxh * x_hat) * inv_std^2.
        let dvar: Vec<f64> = sum_dxh_xhat
            .iter()
            .zip(&cache.inv_std)
            .map(|(s, inv)| -0.5 * s * inv * inv)
            .collect();
        let dmu: Vec<f64> = sum_dxh.iter().zip(&cache.inv_std).map(|(s, inv)| -s * inv).collect();
        let sizes = part.group_sizes();
        for (i, (g_up, xh)) in dy.data().iter().zip(&cache.x_hat).enumerate() {
            let c = (i / plane) % shape.c;
            let g = part.group_of(i);
            let inv = cache.inv_std[g];
            let mut kf = sizes[g] as f64;
            if variant == BackwardVariant::WrongGroupSize {
                kf += 1.0;
            }
            let centered = if inv > 0.0 { xh.to_f64() / inv } else { 0.0 };
            let mut v = g_up.to_f64() * params.gamma[c].to_f64() * inv;
            if variant != BackwardVariant::DropVarianceTerm {
                v += dvar[g] * 2.0 * centered / kf;
            }
            if variant != BackwardVariant::DropMeanTerm {
                v += dmu[g] / kf;
            }
            dx.push(T::from_f64(v));
        }
    }
    Ok(NormGrads {
        dx: Tensor4::from_vec(shape, dx)?,
        dgamma,
        dbeta,
    })
}

/// Blends a train-mode BN/BGN cache's batch statistics into `running`.
pub fn update_running<T>(running: &RunningStats, cache: &NormCache<T>) -> Result<RunningStats> {
    let kind = cache.partition.kind();
    if !kind.uses_running_stats() {
        return Err(Error::NoRunningStats(kind.method().name()));
    }
    if !cache.batch_statistics {
        return Err(Error::InvalidArgument(
            "running statistics can only be updated from a train-mode forward".into(),
        ));
    }
    running.blend(&cache.means, &cache.vars)
}

/// Unweighted mean of per-shard batch statistics. All caches must share the
/// same group layout.
pub fn merge_shard_statistics<T>(caches: &[&NormCache<T>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = caches
        .first()
        .ok_or_else(|| Error::InvalidArgument("no shard statistics to merge".into()))?;
    let k = first.means.len();
    let mut means = vec![0.0; k];
    let mut vars = vec![0.0; k];
    for c in caches {
        if c.means.len() != k {
            return Err(Error::RunningStatShape {
                expected: k,
                actual: c.means.len(),
            });
        }
        for g in 0..k {
            means[g] += c.means[g];
            vars[g] += c.vars[g];
        }
    }
    let w = caches.len() as f64;
    Ok((
        means.into_iter().map(|m| m / w).collect(),
        vars.into_iter().map(|v| v / w).collect(),
    ))
}

/// A normalization layer: kind, affine parameters and, for BN/BGN, running
/// statistics.
#[derive(Debug, Clone)]
pub struct NormLayer<T> {
    pub kind: NormKind,
    pub params: NormParams<T>,
    pub running: Option<RunningStats>,
    pub eps: f64,
}

impl<T: Real> NormLayer<T> {
    pub fn new(kind: NormKind, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        let running = if kind.uses_running_stats() {
            Some(RunningStats::for_kind(kind, channels, momentum)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            params: NormParams::new(channels),
            running,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, NormCache<T>)> {
        let part = build_partition(self.kind, x.shape())?;
        norm_forward(x, &part, &self.params, self.running.as_ref(), mode, self.eps)
    }

    pub fn backward(&self, dy: &Tensor4<T>, cache: &NormCache<T>) -> Result<NormGrads<T>> {
        norm_backward(dy, cache, &self.params)
    }

    /// Replaces the running statistics with their blend against the given
    /// batch statistics; a no-op for kinds without running statistics.
    pub fn absorb_statistics(&mut self, means: &[f64], vars: &[f64]) -> Result<()> {
        if let Some(r) = &self.running {
            self.running = Some(r.blend(means, vars)?);
        }
        Ok(())
    }
}
