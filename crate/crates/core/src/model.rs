//! The Focus U-Net: a residual U-Net whose long skips are reweighted by
//! gates driven from the deepest encoder output, with a supervision head on
//! every decoder level.

use crate::attention::{
    adaptive_kernel_channel, adaptive_kernel_spatial, AdditiveGate, AttentionDims, FocusGate,
    GateOptions, GateOutput, GateType, KERNEL_B, KERNEL_GAMMA,
};
use crate::config::{float_text, KeyValues};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::losses::{dice_ce_loss, hybrid_focal_loss, non_focal_loss, LossConfig, LossKind};
use crate::nn::{Conv2d, ConvSpec, ConvTranspose2d};
use crate::tensor::{Real, Tensor};

pub const IN_CHANNELS: usize = 3;
pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Number of resolution levels.
    pub depth: usize,
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    pub focal_lambda: f64,
    pub deep_supervision: bool,
    pub gate: GateType,
    /// Residual connection across each conv block.
    pub short_skips: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 5,
            base_channels: 32,
            height: 288,
            width: 384,
            focal_lambda: 1.25,
            deep_supervision: true,
            gate: GateType::Focus,
            short_skips: true,
        }
    }
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 8] = [
        "net.depth",
        "net.base_channels",
        "net.height",
        "net.width",
        "net.focal_lambda",
        "net.deep_supervision",
        "net.gate",
        "net.short_skips",
    ];

    /// `C0 · 2^level`
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn max_channels(&self) -> usize {
        self.channels(self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(
                "net.depth",
                format!("{} must be >= 2", self.depth),
            ));
        }
        if self.depth > 12 {
            return Err(Error::config(
                "net.depth",
                format!("{} is unreasonably deep", self.depth),
            ));
        }
        if self.base_channels < 2 {
            return Err(Error::config("net.base_channels", "must be >= 2"));
        }
        let f = 1usize << (self.depth - 1);
        if self.height == 0 || !self.height.is_multiple_of(f) {
            return Err(Error::config(
                "net.height",
                format!("{} is not divisible by 2^(D-1) = {f}", self.height),
            ));
        }
        if self.width == 0 || !self.width.is_multiple_of(f) {
            return Err(Error::config(
                "net.width",
                format!("{} is not divisible by 2^(D-1) = {f}", self.width),
            ));
        }
        if !(self.focal_lambda >= 1.0) || !self.focal_lambda.is_finite() {
            return Err(Error::config(
                "net.focal_lambda",
                format!("{} must be >= 1", self.focal_lambda),
            ));
        }
        Ok(())
    }

    /// Ratio between the level-`l` resolution and the deepest one.
    pub fn gate_ratio(&self, level: usize) -> usize {
        1 << (self.depth - 1 - level)
    }

    /// Decoder levels that carry a supervision head, deepest first.
    pub fn supervised_levels(&self) -> Vec<usize> {
        if self.deep_supervision {
            (0..self.depth - 1).rev().collect()
        } else {
            vec![0]
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("net.depth", self.depth);
        kv.set("net.base_channels", self.base_channels);
        kv.set("net.height", self.height);
        kv.set("net.width", self.width);
        kv.set("net.focal_lambda", float_text(self.focal_lambda));
        kv.set("net.deep_supervision", self.deep_supervision);
        kv.set("net.gate", self.gate.as_str());
        kv.set("net.short_skips", self.short_skips);
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read("net.depth", &mut self.depth)?;
        kv.read("net.base_channels", &mut self.base_channels)?;
        kv.read("net.height", &mut self.height)?;
        kv.read("net.width", &mut self.width)?;
        kv.read("net.focal_lambda", &mut self.focal_lambda)?;
        kv.read("net.deep_supervision", &mut self.deep_supervision)?;
        kv.read("net.gate", &mut self.gate)?;
        kv.read("net.short_skips", &mut self.short_skips)?;
        Ok(())
    }

    /// Closed-form parameter count; must equal the size of a built model.
    pub fn parameter_count(&self) -> usize {
        let conv = |k: usize, ci: usize, co: usize| k * k * ci * co + co;
        let block = |ci: usize, co: usize| {
            let proj = if self.short_skips && ci != co {
                conv(1, ci, co)
            } else {
                0
            };
            conv(3, ci, co) + conv(3, co, co) + proj
        };
        let c0 = self.base_channels;
        let cmax = self.max_channels();
        let mut total = block(IN_CHANNELS, c0);
        for d in 1..self.depth {
            total += block(self.channels(d - 1), self.channels(d));
        }
        for l in 0..self.depth - 1 {
            let c = self.channels(l);
            let r = self.gate_ratio(l);
            total += conv(4, self.channels(l + 1), c) + block(2 * c, c);
            total += match self.gate {
                GateType::Focus => {
                    let ks =
                        adaptive_kernel_spatial(&AttentionDims::new(c, c0, cmax).unwrap()).unwrap();
                    conv(2 * r, cmax, c)
                        + conv(1, c, c)
                        + adaptive_kernel_channel(c, KERNEL_B, KERNEL_GAMMA)
                        + ks * ks * 2
                }
                GateType::Additive => conv(1, c, c) + conv(1, cmax, c),
                GateType::None => 0,
            };
        }
        for l in self.supervised_levels() {
            let s = 1usize << l;
            total += conv(1, self.channels(l), CLASSES);
            if s > 1 {
                total += conv(2 * s, CLASSES, CLASSES);
            }
        }
        total
    }
}

/// Weight of a supervision head whose upsampling stride is `s`: `2^(-s²)`.
pub fn deep_supervision_weight(s: usize) -> f64 {
    let s = s as f64;
    (-(s * s)).exp2()
}

/// Two 3×3 conv + ReLU stages, with an optional residual from input to
/// output (projected by a 1×1 conv when channel counts differ).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
    pub residual: bool,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            store,
            &format!("{prefix}/conv1"),
            ConvSpec::new(in_channels, out_channels, 3),
            seed,
        )?;
        let conv2 = Conv2d::new(
            store,
            &format!("{prefix}/conv2"),
            ConvSpec::new(out_channels, out_channels, 3),
            seed,
        )?;
        let proj = if residual && in_channels != out_channels {
            Some(Conv2d::new(
                store,
                &format!("{prefix}/proj"),
                ConvSpec::new(in_channels, out_channels, 1),
                seed,
            )?)
        } else {
            None
        };
        Ok(ConvBlock {
            conv1,
            conv2,
            proj,
            residual,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.conv1.forward(g, store, x)?;
        let a = g.relu(a)?;
        let b = self.conv2.forward(g, store, a)?;
        let b = g.relu(b)?;
        if !self.residual {
            return Ok(b);
        }
        let r = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        g.add(b, r)
    }
}

/// 1×1 conv to class logits, transposed conv back to full resolution, softmax.
#[derive(Clone, Debug)]
pub struct SupervisionHead {
    pub level: usize,
    pub stride: usize,
    pub conv: Conv2d,
    pub up: Option<ConvTranspose2d>,
}

impl SupervisionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level: usize,
        channels: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("head", "stride must be >= 1"));
        }
        let conv = Conv2d::new(
            store,
            &format!("{prefix}/conv"),
            ConvSpec::new(channels, CLASSES, 1),
            seed,
        )?;
        let up = if stride > 1 {
            Some(ConvTranspose2d::new(
                store,
                &format!("{prefix}/up"),
                ConvSpec::upsampling(CLASSES, CLASSES, stride),
                seed,
            )?)
        } else {
            None
        };
        Ok(SupervisionHead {
            level,
            stride,
            conv,
            up,
        })
    }

    pub fn weight(&self) -> f64 {
        deep_supervision_weight(self.stride)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(g, store, x)?;
        let logits = match &self.up {
            Some(up) => up.forward(g, store, logits)?,
            None => logits,
        };
        g.softmax(logits)
    }
}

#[derive(Clone, Debug)]
pub enum SkipGate {
    Focus(FocusGate),
    Additive(AdditiveGate),
    None,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub level: usize,
    pub up: ConvTranspose2d,
    pub gate: SkipGate,
    pub block: ConvBlock,
}

/// One supervised softmax output at full resolution.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedOutput {
    pub level: usize,
    pub stride: usize,
    pub prob: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Ordered deepest to final.
    pub outputs: Vec<SupervisedOutput>,
    /// `(level, gate)` for every gated skip, deepest first.
    pub gates: Vec<(usize, GateOutput)>,
}

impl ForwardOutput {
    pub fn final_output(&self) -> Var {
        self.outputs.last().expect("at least one head").prob
    }
}

#[derive(Clone, Debug)]
pub struct FocusUNet<T: Real> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub encoder: Vec<ConvBlock>,
    /// Deepest first.
    pub decoder: Vec<DecoderStage>,
    /// Deepest first.
    pub heads: Vec<SupervisionHead>,
}

impl<T: Real> FocusUNet<T> {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let res = config.short_skips;
        let mut encoder = Vec::with_capacity(config.depth);
        for d in 0..config.depth {
            let cin = if d == 0 {
                IN_CHANNELS
            } else {
                config.channels(d - 1)
            };
            encoder.push(ConvBlock::new(
                &mut store,
                &format!("enc/l{d}"),
                cin,
                config.channels(d),
                res,
                seed,
            )?);
        }
        let c0 = config.base_channels;
        let cmax = config.max_channels();
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for l in (0..config.depth - 1).rev() {
            let c = config.channels(l);
            let p = format!("dec/l{l}");
            let up = ConvTranspose2d::new(
                &mut store,
                &format!("{p}/up"),
                ConvSpec::upsampling(config.channels(l + 1), c, 2),
                seed,
            )?;
            let r = config.gate_ratio(l);
            let gate = match config.gate {
                GateType::Focus => SkipGate::Focus(FocusGate::new(
                    &mut store,
                    &format!("{p}/gate"),
                    &AttentionDims::new(c, c0, cmax)?,
                    cmax,
                    r,
                    config.focal_lambda,
                    seed,
                )?),
                GateType::Additive => SkipGate::Additive(AdditiveGate::new(
                    &mut store,
                    &format!("{p}/gate"),
                    c,
                    cmax,
                    r,
                    seed,
                )?),
                GateType::None => SkipGate::None,
            };
            let block = ConvBlock::new(&mut store, &format!("{p}/block"), 2 * c, c, res, seed)?;
            decoder.push(DecoderStage {
                level: l,
                up,
                gate,
                block,
            });
        }
        let mut heads = Vec::new();
        for l in config.supervised_levels() {
            heads.push(SupervisionHead::new(
                &mut store,
                &format!("head/l{l}"),
                l,
                config.channels(l),
                1 << l,
                seed,
            )?);
        }
        Ok(FocusUNet {
            config,
            params: store,
            encoder,
            decoder,
            heads,
        })
    }

    /// Builds the same architecture around an existing parameter set, which
    /// must have exactly the expected names and shapes.
    pub fn with_params(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter arrays, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for p in model.params.iter() {
            let q = params
                .get(&p.name)
                .map_err(|_| Error::Incompatible(format!("missing parameter {}", p.name)))?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::ParamShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: q.value.shape().to_vec(),
                });
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Forward pass recording into `g`, using `params` (normally
    /// `self.params`, or a cast copy).
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        x: Var,
        opts: GateOptions,
    ) -> Result<ForwardOutput> {
        let want = [self.config.height, self.config.width, IN_CHANNELS];
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::InvalidShape {
                shape,
                reason: format!(
                    "model expects a [n, {}, {}, {}] batch",
                    want[0], want[1], want[2]
                ),
            });
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (d, block) in self.encoder.iter().enumerate() {
            if d > 0 {
                h = g.max_pool2d(h, 2)?;
            }
            h = block.forward(g, params, h)?;
            skips.push(h);
        }
        let deepest = h;
        let mut gates = Vec::new();
        let mut outputs = Vec::new();
        let mut heads = self.heads.iter().peekable();
        for stage in &self.decoder {
            let l = stage.level;
            let up = stage.up.forward(g, params, h)?;
            let skip = match &stage.gate {
                SkipGate::Focus(fg) => {
                    let out = fg.forward(g, params, skips[l], deepest, opts)?;
                    gates.push((l, out));
                    out.output
                }
                SkipGate::Additive(ag) => {
                    let out = ag.forward(g, params, skips[l], deepest)?;
                    gates.push((l, out));
                    out.output
                }
                SkipGate::None => skips[l],
            };
            let cat = g.concat_channels(&[up, skip])?;
            h = stage.block.forward(g, params, cat)?;
            if let Some(head) = heads.next_if(|hd| hd.level == l) {
                outputs.push(SupervisedOutput {
                    level: l,
                    stride: head.stride,
                    prob: head.forward(g, params, h)?,
                });
            }
        }
        Ok(ForwardOutput { outputs, gates })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, opts: GateOptions) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, x, opts)
    }

    /// Softmax outputs (deepest to final) for a `[n, h, w, 3]` batch, without
    /// recording gradients.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x, GateOptions::default())?;
        Ok(out
            .outputs
            .iter()
            .map(|o| g.value(o.prob).clone())
            .collect())
    }
}

/// `Σ w(s)·L` over supervised outputs (deepest to final). With the Hybrid
/// Focal loss, the final output uses the non-focal pair (Tversky + α-weighted
/// CE) and earlier outputs the full loss; Dice+CE is used at every level.
pub fn aggregate_supervised_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &[SupervisedOutput],
    target: Var,
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<Var> {
    let last = outputs
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::config("outputs", "no supervised outputs"))?;
    let mut total: Option<Var> = None;
    for (i, o) in outputs.iter().enumerate() {
        let l = match (kind, i == last) {
            (LossKind::DiceCe, _) => dice_ce_loss(g, o.prob, target, cfg)?,
            (LossKind::HybridFocal, false) => hybrid_focal_loss(g, o.prob, target, cfg)?,
            (LossKind::HybridFocal, true) => non_focal_loss(g, o.prob, target, cfg)?,
        };
        let w = g.mul_scalar(l, deep_supervision_weight(o.stride))?;
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok(total.expect("non-empty"))
}
