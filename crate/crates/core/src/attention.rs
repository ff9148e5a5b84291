//! Channel and spatial attention, the focal filter, and the two gates that
//! reweight a skip connection with a deeper gating signal.
//!
//! The Focus Gate works at the skip's resolution: the gating signal is
//! upsampled all the way with a learnable transposed convolution, and the
//! attention coefficients then apply to the skip without further resampling.

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn::{derive_seed, xavier_init, Conv2d, ConvSpec, ConvTranspose2d, PoolKind};
use crate::tensor::{Real, Tensor};

pub const KERNEL_B: f64 = 2.0;
pub const KERNEL_GAMMA: f64 = 1.0;

fn nearest_odd(t: f64) -> usize {
    let k = t.round().max(1.0) as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Channel-attention kernel size: `log2(C)/γ + b/γ`, rounded, bumped to odd.
pub fn adaptive_kernel_channel(channels: usize, b: f64, gamma: f64) -> usize {
    let c = channels.max(1) as f64;
    nearest_odd(c.log2() / gamma + b / gamma)
}

/// Channel counts seen by one gate, used for the spatial kernel size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionDims {
    pub channels: usize,
    pub first_channels: usize,
    pub max_channels: usize,
    pub b: f64,
    pub gamma: f64,
}

impl AttentionDims {
    pub fn new(channels: usize, first_channels: usize, max_channels: usize) -> Result<Self> {
        let dims = AttentionDims {
            channels,
            first_channels,
            max_channels,
            b: KERNEL_B,
            gamma: KERNEL_GAMMA,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.first_channels == 0
            || self.channels < self.first_channels
            || self.channels > self.max_channels
        {
            return Err(Error::config(
                "channels",
                format!(
                    "need C0 <= C <= Cmax, got C0={} C={} Cmax={}",
                    self.first_channels, self.channels, self.max_channels
                ),
            ));
        }
        if self.max_channels + self.first_channels <= self.channels {
            return Err(Error::config("channels", "Cmax + C0 - C must be >= 1"));
        }
        Ok(())
    }
}

/// Spatial-attention kernel size: `log2(Cmax + C0 - C)/γ + b/γ`, rounded,
/// bumped to odd. Shallow (wide, low-channel) layers get larger kernels.
pub fn adaptive_kernel_spatial(dims: &AttentionDims) -> Result<usize> {
    dims.validate()?;
    let span = (dims.max_channels + dims.first_channels - dims.channels) as f64;
    Ok(nearest_odd(span.log2() / dims.gamma + dims.b / dims.gamma))
}

/// Elementwise `x^λ` on coefficients in `[0, 1]`.
pub fn focal_filter<T: Real>(g: &mut Graph<T>, coefficients: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 1.0) {
        return Err(Error::config(
            "focal_lambda",
            format!("{lambda} must be >= 1"),
        ));
    }
    g.pow_scalar(coefficients, lambda)
}

/// Average- and max-pooled spatial descriptors passed through one shared
/// 1-D channel kernel, summed, then squashed: `[n,h,w,c] -> [n,1,1,c]`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub kernel: String,
    pub kernel_size: usize,
}

impl ChannelAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        let kernel_size = adaptive_kernel_channel(channels, KERNEL_B, KERNEL_GAMMA);
        let kernel = format!("{prefix}/w");
        store.insert(
            kernel.clone(),
            xavier_init(&[kernel_size], derive_seed(seed, &kernel))?,
        )?;
        Ok(ChannelAttention {
            kernel,
            kernel_size,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param_named(store, &self.kernel)?;
        let avg = g.pool_spatial(PoolKind::Avg, x)?;
        let max = g.pool_spatial(PoolKind::Max, x)?;
        let a = g.conv1d_channels(avg, w)?;
        let m = g.conv1d_channels(max, w)?;
        let s = g.add(a, m)?;
        g.sigmoid(s)
    }
}

/// Channel-wise average and max maps, stacked to two channels, convolved
/// `k × k` to one channel without bias and squashed: `[n,h,w,c] -> [n,h,w,1]`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: &AttentionDims,
        seed: u64,
    ) -> Result<Self> {
        let k = adaptive_kernel_spatial(dims)?;
        let conv = Conv2d::new(store, prefix, ConvSpec::new(2, 1, k).without_bias(), seed)?;
        Ok(SpatialAttention { conv })
    }

    pub fn kernel_size(&self) -> usize {
        self.conv.spec.kernel.0
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let avg = g.pool_channel(PoolKind::Avg, x)?;
        let max = g.pool_channel(PoolKind::Max, x)?;
        let cat = g.concat_channels(&[avg, max])?;
        let s = self.conv.forward(g, store, cat)?;
        g.sigmoid(s)
    }
}

/// Which gate sits on each long skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateType {
    Focus,
    Additive,
    None,
}

impl GateType {
    pub fn as_str(self) -> &'static str {
        match self {
            GateType::Focus => "focus",
            GateType::Additive => "additive",
            GateType::None => "none",
        }
    }
}

impl std::str::FromStr for GateType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focus" => Ok(GateType::Focus),
            "additive" => Ok(GateType::Additive),
            "none" => Ok(GateType::None),
            _ => Err(Error::config("gate", format!("unknown gate type {s:?}"))),
        }
    }
}

/// Runtime switches for a gate's forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOptions {
    /// Replaces the configured focal parameter.
    pub lambda: Option<f64>,
    /// Forces both attention maps to 1 (test hook).
    pub bypass: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    /// The reweighted skip, same shape as the skip input.
    pub output: Var,
    /// Channel × spatial product before the focal filter.
    pub attention: Var,
    /// Coefficients actually applied to the skip.
    pub coefficients: Var,
}

fn check_ratio<T: Real>(g: &Graph<T>, skip: Var, gate: Var, ratio: usize) -> Result<()> {
    let (sn, sh, sw, _) = g.value(skip).dims4()?;
    let (gn, gh, gw, _) = g.value(gate).dims4()?;
    if sn != gn || sh != gh * ratio || sw != gw * ratio {
        return Err(Error::ShapeMismatch {
            op: "gate (skip must be ratio × gate)",
            lhs: g.shape(skip).to_vec(),
            rhs: g.shape(gate).to_vec(),
        });
    }
    Ok(())
}

/// Spatial ratio between skip and gate, which must be a positive integer.
pub fn gate_ratio(skip_hw: (usize, usize), gate_hw: (usize, usize)) -> Result<usize> {
    let (sh, sw) = skip_hw;
    let (gh, gw) = gate_hw;
    if gh == 0 || gw == 0 || sh % gh != 0 || sw % gw != 0 || sh / gh != sw / gw || sh < gh {
        return Err(Error::config(
            "gate",
            format!("skip {skip_hw:?} is not an integer multiple of gate {gate_hw:?}"),
        ));
    }
    Ok(sh / gh)
}

/// Dual (channel + spatial) attention gate with a focal filter.
#[derive(Clone, Debug)]
pub struct FocusGate {
    pub skip_channels: usize,
    pub gate_channels: usize,
    pub ratio: usize,
    pub lambda: f64,
    pub upsample: ConvTranspose2d,
    pub skip_conv: Conv2d,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl FocusGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: &AttentionDims,
        gate_channels: usize,
        ratio: usize,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(lambda >= 1.0) {
            return Err(Error::config(
                "focal_lambda",
                format!("{lambda} must be >= 1"),
            ));
        }
        if ratio == 0 {
            return Err(Error::config("gate", "ratio must be >= 1"));
        }
        let cs = dims.channels;
        let upsample = ConvTranspose2d::new(
            store,
            &format!("{prefix}/up"),
            ConvSpec::upsampling(gate_channels, cs, ratio),
            seed,
        )?;
        let skip_conv = Conv2d::new(
            store,
            &format!("{prefix}/skip"),
            ConvSpec::new(cs, cs, 1),
            seed,
        )?;
        let channel = ChannelAttention::new(store, &format!("{prefix}/ca"), cs, seed)?;
        let spatial = SpatialAttention::new(store, &format!("{prefix}/sa"), dims, seed)?;
        Ok(FocusGate {
            skip_channels: cs,
            gate_channels,
            ratio,
            lambda,
            upsample,
            skip_conv,
            channel,
            spatial,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        skip: Var,
        gate: Var,
        opts: GateOptions,
    ) -> Result<GateOutput> {
        check_ratio(g, skip, gate, self.ratio)?;
        let up = self.upsample.forward(g, store, gate)?;
        let s = self.skip_conv.forward(g, store, skip)?;
        let sum = g.add(up, s)?;
        let features = g.relu(sum)?;
        let attention = if opts.bypass {
            g.constant(Tensor::ones(g.shape(skip).to_vec()))
        } else {
            let ch = self.channel.forward(g, store, features)?;
            let sp = self.spatial.forward(g, store, features)?;
            g.mul(sp, ch)?
        };
        let coefficients = focal_filter(g, attention, opts.lambda.unwrap_or(self.lambda))?;
        let output = g.mul(skip, coefficients)?;
        Ok(GateOutput {
            output,
            attention,
            coefficients,
        })
    }
}

/// Additive attention gate: the skip is brought down to the gate's
/// resolution by a strided 1×1 conv, added to the projected gate, averaged
/// over channels, squashed, and upsampled back to reweight the skip.
#[derive(Clone, Debug)]
pub struct AdditiveGate {
    pub ratio: usize,
    pub skip_conv: Conv2d,
    pub gate_conv: Conv2d,
}

impl AdditiveGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        skip_channels: usize,
        gate_channels: usize,
        ratio: usize,
        seed: u64,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::config("gate", "ratio must be >= 1"));
        }
        let skip_conv = Conv2d::new(
            store,
            &format!("{prefix}/skip"),
            ConvSpec::new(skip_channels, skip_channels, 1).stride(ratio),
            seed,
        )?;
        let gate_conv = Conv2d::new(
            store,
            &format!("{prefix}/gate"),
            ConvSpec::new(gate_channels, skip_channels, 1),
            seed,
        )?;
        Ok(AdditiveGate {
            ratio,
            skip_conv,
            gate_conv,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        skip: Var,
        gate: Var,
    ) -> Result<GateOutput> {
        check_ratio(g, skip, gate, self.ratio)?;
        let s = self.skip_conv.forward(g, store, skip)?;
        let q = self.gate_conv.forward(g, store, gate)?;
        let sum = g.add(s, q)?;
        let act = g.relu(sum)?;
        let pooled = g.pool_channel(PoolKind::Avg, act)?;
        let coarse = g.sigmoid(pooled)?;
        let coefficients = g.upsample_nearest(coarse, self.ratio)?;
        let output = g.mul(skip, coefficients)?;
        Ok(GateOutput {
            output,
            attention: coefficients,
            coefficients,
        })
    }
}
