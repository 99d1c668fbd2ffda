//! Conditional latent diffusion with a zero-initialized control branch.
//!
//! The backbone is a small two-level UNet with cross-attention over text
//! tokens. Conditioning images enter through a trainable copy of the encoder
//! whose outputs pass through zero-initialized 1x1 projections before being
//! added to the backbone's skip and mid activations — so an untrained branch
//! changes nothing, bit for bit. Training freezes the backbone and updates
//! the branch only, with gradient accumulation; sampling supports DDPM and
//! deterministic DDIM with classifier-free guidance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use faceforge_tensor::ckpt::{self, CheckpointHeader, CkptError, FORMAT_VERSION};
use faceforge_tensor::nn::{
    sinusoidal_embedding, Conv2dLayer, GroupNorm, Linear, MultiHeadAttention,
};
use faceforge_tensor::optim::Adam;
use faceforge_tensor::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use faceforge_tensor::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;

use crate::text::{TextEmbedding, TextEncoder};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("sampling steps {steps} exceed schedule length {t}")]
    TooManySteps { steps: usize, t: usize },
    #[error("expected {expected}x{expected} input, got {got_h}x{got_w}")]
    ResolutionMismatch {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("text embedding dim {got} does not match configured {expected}")]
    TextDimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at micro-step {0}")]
    NonFiniteLoss(u64),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Ckpt(#[from] CkptError),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaScheduleKind {
    Linear,
    ScaledLinear,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    pub kind: BetaScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: BetaScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Variance schedule tables: beta_t for t in 1..=T and cumulative
/// alpha-bar products with the alpha_bar(0) = 1 convention.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        let t = cfg.timesteps;
        if t == 0 {
            return Err(DiffusionError::BadSchedule("zero timesteps".into()));
        }
        let lin = |i: usize, lo: f64, hi: f64| {
            if t == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (t - 1) as f64
            }
        };
        let betas: Vec<f64> = match cfg.kind {
            BetaScheduleKind::Linear => (0..t).map(|i| lin(i, cfg.beta_start, cfg.beta_end)).collect(),
            BetaScheduleKind::ScaledLinear => (0..t)
                .map(|i| {
                    let b = lin(i, cfg.beta_start.sqrt(), cfg.beta_end.sqrt());
                    b * b
                })
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::BadSchedule("empty beta list".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(DiffusionError::BadSchedule(format!(
                    "beta[{i}] = {b} outside (0,1)"
                )));
            }
            alpha_bars.push(alpha_bars[i] * (1.0 - b));
        }
        for w in alpha_bars.windows(2) {
            if w[1] >= w[0] {
                return Err(DiffusionError::BadSchedule(
                    "alpha-bar must strictly decrease".into(),
                ));
            }
        }
        Ok(Self {
            timesteps: betas.len(),
            betas,
            alpha_bars,
        })
    }

    pub fn linear_default() -> Self {
        Self::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }

    /// beta_t, t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// alpha_bar_t, t in 0..=T with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Closed-form forward corruption: `x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps`.
///
/// t = 0 is allowed by the alpha_bar(0) = 1 convention and returns x0.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor, DiffusionError> {
    if t > schedule.timesteps {
        return Err(DiffusionError::TimestepOutOfRange {
            t,
            max: schedule.timesteps,
        });
    }
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::ShapeMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Tensor::new(x0.shape(), data))
}

// ---------------------------------------------------------------------------
// model config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            base_channels: 8,
            mid_channels: 16,
            time_dim: 16,
            text_dim: 32,
            heads: 2,
            norm_groups: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl DiffusionConfig {
    fn validate(&self) -> Result<(), DiffusionError> {
        let u = &self.unet;
        if u.image_size % 2 != 0 || u.image_size < 4 {
            return Err(DiffusionError::BadConfig(
                "image_size must be even and >= 4".into(),
            ));
        }
        for (name, c) in [("base", u.base_channels), ("mid", u.mid_channels)] {
            if c == 0 || c % u.norm_groups != 0 {
                return Err(DiffusionError::BadConfig(format!(
                    "{name}_channels {c} must divide into {} norm groups",
                    u.norm_groups
                )));
            }
        }
        if u.mid_channels % u.heads != 0 {
            return Err(DiffusionError::BadConfig(
                "mid_channels must divide into heads".into(),
            ));
        }
        if u.time_dim < 2 || u.time_dim % 2 != 0 {
            return Err(DiffusionError::BadConfig("time_dim must be even".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2dLayer,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut faceforge_tensor::rng::SeededRng,
        prefix: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        groups: usize,
    ) -> Self {
        Self {
            gn1: GroupNorm::init(store, &format!("{prefix}.gn1"), cin, groups.min(cin)),
            conv1: Conv2dLayer::init(store, rng, &format!("{prefix}.conv1"), cin, cout, 3, 1, 1),
            temb_proj: Linear::init(store, rng, &format!("{prefix}.temb"), time_dim, cout),
            gn2: GroupNorm::init(store, &format!("{prefix}.gn2"), cout, groups.min(cout)),
            conv2: Conv2dLayer::init(store, rng, &format!("{prefix}.conv2"), cout, cout, 3, 1, 1),
            skip: if cin != cout {
                Some(Conv2dLayer::init(
                    store,
                    rng,
                    &format!("{prefix}.skip"),
                    cin,
                    cout,
                    1,
                    1,
                    0,
                ))
            } else {
                None
            },
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        temb: NodeId, // [1, time_dim]
    ) -> NodeId {
        let h = self.gn1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h);
        // time conditioning as a per-channel bias
        let ts = g.silu(temb);
        let tproj = self.temb_proj.forward(g, store, ts);
        let cout = g.value(tproj).shape()[1];
        let tvec = g.reshape(tproj, &[cout]);
        let h = g.add_channel_bias(h, tvec);
        let h = self.gn2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let sk = match &self.skip {
            Some(conv) => conv.forward(g, store, x),
            None => x,
        };
        g.add(h, sk)
    }
}

struct CrossAttnBlock {
    gn: GroupNorm,
    attn: MultiHeadAttention,
}

impl CrossAttnBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut faceforge_tensor::rng::SeededRng,
        prefix: &str,
        channels: usize,
        ctx_dim: usize,
        heads: usize,
        groups: usize,
    ) -> Self {
        Self {
            gn: GroupNorm::init(store, &format!("{prefix}.gn"), channels, groups.min(channels)),
            attn: MultiHeadAttention::init(
                store,
                rng,
                &format!("{prefix}.attn"),
                channels,
                ctx_dim,
                heads,
            ),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, ctx: NodeId) -> NodeId {
        let s = g.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let n = self.gn.forward(g, store, x);
        let flat = g.reshape(n, &[c, h * w]);
        let rows = g.transpose2(flat);
        let a = self.attn.forward(g, store, rows, Some(ctx));
        let back = g.transpose2(a);
        let spatial = g.reshape(back, &[c, h, w]);
        g.add(x, spatial)
    }
}

/// Encoder half shared by the backbone and the control branch copy.
struct EncoderLayers {
    conv_in: Conv2dLayer,
    down0: ResBlock,
    downconv: Conv2dLayer,
    down1: ResBlock,
    mid1: ResBlock,
    mid_attn: CrossAttnBlock,
    mid2: ResBlock,
}

fn build_encoder(
    prefix: &str,
    cfg: &UNetConfig,
    store: &mut ParamStore,
    rng: &mut faceforge_tensor::rng::SeededRng,
) -> EncoderLayers {
    let (c1, c2) = (cfg.base_channels, cfg.mid_channels);
    EncoderLayers {
        conv_in: Conv2dLayer::init(store, rng, &format!("{prefix}.conv_in"), 3, c1, 3, 1, 1),
        down0: ResBlock::init(store, rng, &format!("{prefix}.down.0"), c1, c1, cfg.time_dim, cfg.norm_groups),
        downconv: Conv2dLayer::init(store, rng, &format!("{prefix}.downconv"), c1, c2, 3, 2, 1),
        down1: ResBlock::init(store, rng, &format!("{prefix}.down.1"), c2, c2, cfg.time_dim, cfg.norm_groups),
        mid1: ResBlock::init(store, rng, &format!("{prefix}.mid.res1"), c2, c2, cfg.time_dim, cfg.norm_groups),
        mid_attn: CrossAttnBlock::init(
            store,
            rng,
            &format!("{prefix}.mid.attn"),
            c2,
            cfg.text_dim,
            cfg.heads,
            cfg.norm_groups,
        ),
        mid2: ResBlock::init(store, rng, &format!("{prefix}.mid.res2"), c2, c2, cfg.time_dim, cfg.norm_groups),
    }
}

struct UNetLayers {
    encoder: EncoderLayers,
    temb_fc1: Linear,
    temb_fc2: Linear,
    up0: ResBlock,
    up1: ResBlock,
    out_gn: GroupNorm,
    out_conv: Conv2dLayer,
}

struct ControlLayers {
    copy: EncoderLayers,
    hint1: Conv2dLayer,
    hint2: Conv2dLayer,
    zero0: Conv2dLayer,
    zero1: Conv2dLayer,
    zero_mid: Conv2dLayer,
}

/// Parameter-name prefix of the backbone decoder blocks that Imagic-style
/// fine-tuning may select.
pub const UP_BLOCK_PREFIX: &str = "unet.up.";

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

pub struct ControlledDiffusion {
    pub cfg: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    pub step: u64,
    unet: UNetLayers,
    ctrl: ControlLayers,
}

impl ControlledDiffusion {
    pub fn new(cfg: DiffusionConfig) -> Result<Self, DiffusionError> {
        cfg.validate()?;
        let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(cfg.seed);
        let u = &cfg.unet;
        let (c1, c2) = (u.base_channels, u.mid_channels);
        let encoder = build_encoder("unet", u, &mut params, &mut rng);
        let unet = UNetLayers {
            encoder,
            temb_fc1: Linear::init(&mut params, &mut rng, "unet.temb.fc1", u.time_dim, u.time_dim),
            temb_fc2: Linear::init(&mut params, &mut rng, "unet.temb.fc2", u.time_dim, u.time_dim),
            up0: ResBlock::init(&mut params, &mut rng, "unet.up.0", 2 * c2, c2, u.time_dim, u.norm_groups),
            up1: ResBlock::init(&mut params, &mut rng, "unet.up.1", c2 + c1, c1, u.time_dim, u.norm_groups),
            out_gn: GroupNorm::init(&mut params, "unet.out.gn", c1, u.norm_groups.min(c1)),
            out_conv: Conv2dLayer::init(&mut params, &mut rng, "unet.out.conv", c1, 3, 3, 1, 1),
        };
        let copy = build_encoder("ctrl.copy", u, &mut params, &mut rng);
        let ctrl = ControlLayers {
            copy,
            hint1: Conv2dLayer::init(&mut params, &mut rng, "ctrl.hint1", 3, c1, 3, 1, 1),
            hint2: Conv2dLayer::init(&mut params, &mut rng, "ctrl.hint2", c1, c1, 3, 1, 1),
            zero0: Conv2dLayer::init_zero(&mut params, "ctrl.zero0", c1, c1, 1),
            zero1: Conv2dLayer::init_zero(&mut params, "ctrl.zero1", c2, c2, 1),
            zero_mid: Conv2dLayer::init_zero(&mut params, "ctrl.zero_mid", c2, c2, 1),
        };
        let mut model = Self {
            cfg,
            schedule,
            params,
            step: 0,
            unet,
            ctrl,
        };
        model.copy_backbone_into_branch();
        Ok(model)
    }

    /// Clone the backbone encoder weights into the control branch copy.
    fn copy_backbone_into_branch(&mut self) {
        let names: Vec<String> = self.params.names_with_prefix("unet.");
        for name in names {
            let target = format!("ctrl.copy{}", &name["unet".len()..]);
            if self.params.contains(&target) {
                let src = self.params.get(&name).clone();
                self.params.set(&target, src);
            }
        }
    }

    pub fn image_size(&self) -> usize {
        self.cfg.unet.image_size
    }

    pub(crate) fn check_spatial(&self, t: &Tensor, what: &str) -> Result<(), DiffusionError> {
        let s = t.shape();
        let n = self.cfg.unet.image_size;
        if s.len() != 3 || s[0] != 3 || s[1] != n || s[2] != n {
            return Err(DiffusionError::ResolutionMismatch {
                expected: n,
                got_h: s.get(1).copied().unwrap_or(0),
                got_w: s.get(2).copied().unwrap_or(0),
            });
        }
        let _ = what;
        Ok(())
    }

    pub(crate) fn check_text(&self, text: &TextEmbedding) -> Result<(), DiffusionError> {
        if text.dim() != self.cfg.unet.text_dim {
            return Err(DiffusionError::TextDimMismatch {
                expected: self.cfg.unet.text_dim,
                got: text.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn temb_node(&self, g: &mut Graph, store: &ParamStore, t: usize) -> NodeId {
        let feat = g.constant(sinusoidal_embedding(t as f64, self.cfg.unet.time_dim));
        let h = self.unet.temb_fc1.forward(g, store, feat);
        let h = g.silu(h);
        self.unet.temb_fc2.forward(g, store, h)
    }

    /// Control-branch forward: returns the three injected residual nodes
    /// (skip0, skip1, mid), each shaped like the backbone activation it is
    /// added to.
    pub(crate) fn branch_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: NodeId,
        cond: NodeId,
        temb: NodeId,
        ctx: NodeId,
    ) -> [NodeId; 3] {
        let c = &self.ctrl;
        let hint = c.hint1.forward(g, store, cond);
        let hint = g.silu(hint);
        let hint = c.hint2.forward(g, store, hint);
        let h0 = c.copy.conv_in.forward(g, store, x_t);
        let h0 = g.add(h0, hint);
        let d0 = c.copy.down0.forward(g, store, h0, temb);
        let d1_in = c.copy.downconv.forward(g, store, d0);
        let d1 = c.copy.down1.forward(g, store, d1_in, temb);
        let m = c.copy.mid1.forward(g, store, d1, temb);
        let m = c.copy.mid_attn.forward(g, store, m, ctx);
        let m = c.copy.mid2.forward(g, store, m, temb);
        [
            c.zero0.forward(g, store, d0),
            c.zero1.forward(g, store, d1),
            c.zero_mid.forward(g, store, m),
        ]
    }

    /// Backbone noise prediction, optionally with control residuals added to
    /// the skip and mid activations.
    pub(crate) fn eps_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: NodeId,
        temb: NodeId,
        ctx: NodeId,
        residuals: Option<[NodeId; 3]>,
    ) -> NodeId {
        let u = &self.unet;
        let h0 = u.encoder.conv_in.forward(g, store, x_t);
        let d0 = u.encoder.down0.forward(g, store, h0, temb);
        let d1_in = u.encoder.downconv.forward(g, store, d0);
        let d1 = u.encoder.down1.forward(g, store, d1_in, temb);
        let m = u.encoder.mid1.forward(g, store, d1, temb);
        let m = u.encoder.mid_attn.forward(g, store, m, ctx);
        let m = u.encoder.mid2.forward(g, store, m, temb);
        let (s0, s1, m) = match residuals {
            Some([r0, r1, rm]) => (g.add(d0, r0), g.add(d1, r1), g.add(m, rm)),
            None => (d0, d1, m),
        };
        let cat1 = g.concat_channels(m, s1);
        let u0 = u.up0.forward(g, store, cat1, temb);
        let up = g.upsample_nearest(u0, 2);
        let cat0 = g.concat_channels(up, s0);
        let u1 = u.up1.forward(g, store, cat0, temb);
        let o = u.out_gn.forward(g, store, u1);
        let o = g.silu(o);
        u.out_conv.forward(g, store, o)
    }

    /// Predicted noise for given inputs (no guidance).
    pub fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        text: &TextEmbedding,
        condition: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError> {
        self.check_spatial(x_t, "x_t")?;
        self.check_text(text)?;
        if t > self.schedule.timesteps {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.schedule.timesteps,
            });
        }
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let ctx = g.constant(text.tokens.clone());
        let temb = self.temb_node(&mut g, &self.params, t);
        let residuals = match condition {
            Some(c) => {
                self.check_spatial(c, "condition")?;
                let cn = g.constant(c.clone());
                Some(self.branch_graph(&mut g, &self.params, x, cn, temb, ctx))
            }
            None => None,
        };
        let eps = self.eps_graph(&mut g, &self.params, x, temb, ctx, residuals);
        Ok(g.value(eps).clone())
    }

    /// The control residual tensors for given inputs.
    ///
    /// At a freshly initialized branch every returned tensor is exactly zero.
    pub fn control_residuals(
        &self,
        condition: &Tensor,
        x_t: &Tensor,
        t: usize,
        text: &TextEmbedding,
    ) -> Result<Vec<Tensor>, DiffusionError> {
        self.check_spatial(condition, "condition")?;
        self.check_spatial(x_t, "x_t")?;
        self.check_text(text)?;
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let cn = g.constant(condition.clone());
        let ctx = g.constant(text.tokens.clone());
        let temb = self.temb_node(&mut g, &self.params, t);
        let rs = self.branch_graph(&mut g, &self.params, x, cn, temb, ctx);
        Ok(rs.iter().map(|&r| g.value(r).clone()).collect())
    }

    /// Classifier-free-guided noise prediction:
    /// `eps = eps_uncond + scale * (eps_cond - eps_uncond)`.
    ///
    /// Control residuals are applied in both passes. Scale 0 evaluates the
    /// unconditional path only.
    pub fn guided_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        text: &TextEmbedding,
        uncond: &TextEmbedding,
        condition: Option<&Tensor>,
        cfg_scale: f64,
    ) -> Result<Tensor, DiffusionError> {
        let eps_u = self.predict_eps(x_t, t, uncond, condition)?;
        if cfg_scale == 0.0 {
            return Ok(eps_u);
        }
        let eps_c = self.predict_eps(x_t, t, text, condition)?;
        let data = eps_u
            .data()
            .iter()
            .zip(eps_c.data())
            .map(|(u, c)| u + cfg_scale * (c - u))
            .collect();
        Ok(Tensor::new(eps_u.shape(), data))
    }

    /// Draw an image tensor (`[3,S,S]`, range [-1,1]) from noise.
    pub fn sample(
        &self,
        text: &TextEmbedding,
        uncond: &TextEmbedding,
        condition: Option<&Tensor>,
        opts: &SampleOptions,
    ) -> Result<Tensor, DiffusionError> {
        self.check_text(text)?;
        self.check_text(uncond)?;
        if let Some(c) = condition {
            self.check_spatial(c, "condition")?;
        }
        let t_max = self.schedule.timesteps;
        if opts.steps == 0 || opts.steps > t_max {
            return Err(DiffusionError::TooManySteps {
                steps: opts.steps,
                t: t_max,
            });
        }
        let s = self.cfg.unet.image_size;
        let mut rng = rng_from_seed(opts.seed);
        let mut x = Tensor::new(&[3, s, s], standard_normal_vec(&mut rng, 3 * s * s));
        for (t, t_prev) in sampling_timesteps(opts.steps, t_max) {
            let eps = self.guided_eps(&x, t, text, uncond, condition, opts.cfg_scale)?;
            let ab_t = self.schedule.alpha_bar(t);
            let ab_prev = self.schedule.alpha_bar(t_prev);
            let x0_pred: Vec<f64> = x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(xt, e)| (xt - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt())
                .collect();
            let sigma = match opts.sampler {
                SamplerKind::Ddim => 0.0,
                SamplerKind::Ddpm => {
                    ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt()
                }
            };
            let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let noise = if sigma > 0.0 {
                standard_normal_vec(&mut rng, 3 * s * s)
            } else {
                vec![0.0; 3 * s * s]
            };
            let data: Vec<f64> = x0_pred
                .iter()
                .zip(eps.data())
                .zip(&noise)
                .map(|((x0, e), z)| ab_prev.sqrt() * x0 + dir_coeff * e + sigma * z)
                .collect();
            x = Tensor::new(&[3, s, s], data);
        }
        Ok(x.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Noise-prediction training loss and gradients for every parameter
    /// (backbone and branch), without any update. The timestep and noise per
    /// sample are drawn deterministically from `seed`, so repeated calls with
    /// the same inputs give identical values; finite-difference probes rely
    /// on that.
    pub fn loss_and_grads(
        &self,
        batch: &[ControlSample],
        encoder: &dyn TextEncoder,
        seed: u64,
    ) -> Result<(f64, BTreeMap<String, Tensor>), DiffusionError> {
        assert!(!batch.is_empty(), "empty batch");
        let mut g = Graph::new();
        let mut loss_nodes = Vec::with_capacity(batch.len());
        for (i, sample) in batch.iter().enumerate() {
            self.check_spatial(&sample.image, "image")?;
            self.check_spatial(&sample.condition, "condition")?;
            let mut rng = rng_from_seed(derive_seed(seed, &format!("lg{i}")));
            let text = encoder
                .encode(&sample.caption)
                .map_err(|e| DiffusionError::BadConfig(format!("encoder: {e}")))?;
            self.check_text(&text)?;
            let t = rng.gen_range(1..=self.schedule.timesteps);
            let s = self.cfg.unet.image_size;
            let eps = Tensor::new(&[3, s, s], standard_normal_vec(&mut rng, 3 * s * s));
            let x_t = forward_diffuse(&self.schedule, &sample.image, t, &eps)?;
            let x = g.constant(x_t);
            let cond = g.constant(sample.condition.clone());
            let ctx = g.constant(text.tokens.clone());
            let temb = self.temb_node(&mut g, &self.params, t);
            let residuals = self.branch_graph(&mut g, &self.params, x, cond, temb, ctx);
            let eps_hat = self.eps_graph(&mut g, &self.params, x, temb, ctx, Some(residuals));
            let target = g.constant(eps);
            loss_nodes.push(g.mse(eps_hat, target));
        }
        let mut acc = loss_nodes[0];
        for &n in &loss_nodes[1..] {
            acc = g.add(acc, n);
        }
        let mean = g.scale(acc, 1.0 / batch.len() as f64);
        let grads = g.backward(mean);
        Ok((g.value(mean).item(), g.param_grads(&grads)))
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            step: self.step,
        };
        ckpt::save(path, &header, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let (header, params) = ckpt::load(path)?;
        let cfg: DiffusionConfig = serde_json::from_value(header.config)
            .map_err(|e| DiffusionError::ConfigMismatch(e.to_string()))?;
        let mut fresh = Self::new(cfg)?;
        for name in fresh.params.names() {
            if !params.contains(name) {
                return Err(DiffusionError::ConfigMismatch(format!(
                    "missing tensor {name}"
                )));
            }
        }
        fresh.params = params;
        fresh.step = header.step;
        Ok(fresh)
    }
}

/// Descending (t, t_prev) pairs, evenly spaced, ending at t_prev = 0.
fn sampling_timesteps(steps: usize, t_max: usize) -> Vec<(usize, usize)> {
    let ts: Vec<usize> = (0..=steps)
        .map(|i| ((t_max as f64) * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    ts.windows(2).map(|w| (w[0], w[1])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 7.5,
            seed: 0,
            sampler: SamplerKind::Ddim,
        }
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Control-branch training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            grad_accum: 16,
            lr: 5e-5,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.lr <= 0.0 {
            return Err(DiffusionError::BadConfig(
                "recipe values must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Classifier-free guidance configuration for training and sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub cfg_scale: f64,
    pub simple_prompt: String,
    pub simple_prompt_fraction: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 7.5,
            simple_prompt: "a high-quality portrait of a face".to_string(),
            simple_prompt_fraction: 0.25,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.cfg_scale < 0.0 || !(0.0..=1.0).contains(&self.simple_prompt_fraction) {
            return Err(DiffusionError::BadConfig(
                "cfg_scale >= 0 and fraction in [0,1] required".into(),
            ));
        }
        Ok(())
    }
}

/// One (image, condition, caption) training example; tensors in [-1,1].
pub struct ControlSample {
    pub image: Tensor,
    pub condition: Tensor,
    pub caption: String,
}

/// Trainer that owns the optimizer and gradient-accumulation state.
///
/// The backbone is frozen by construction: only `ctrl.*` gradients reach the
/// optimizer, and parameters move every `grad_accum` micro-batches.
pub struct ControlTrainer {
    pub recipe: TrainRecipe,
    pub guidance: GuidanceConfig,
    opt: Adam,
    accum: BTreeMap<String, Tensor>,
    micro: usize,
}

impl ControlTrainer {
    pub fn new(recipe: TrainRecipe, guidance: GuidanceConfig) -> Result<Self, DiffusionError> {
        recipe.validate()?;
        guidance.validate()?;
        let opt = Adam::new(recipe.lr);
        Ok(Self {
            recipe,
            guidance,
            opt,
            accum: BTreeMap::new(),
            micro: 0,
        })
    }

    /// Process one micro-batch; applies the optimizer step on every
    /// `grad_accum`-th call. Returns the micro-batch loss.
    pub fn micro_step(
        &mut self,
        model: &mut ControlledDiffusion,
        batch: &[ControlSample],
        encoder: &dyn TextEncoder,
        seed: u64,
    ) -> Result<f64, DiffusionError> {
        assert!(!batch.is_empty(), "empty micro-batch");
        let mut g = Graph::new();
        let mut rng = rng_from_seed(derive_seed(seed, "cd"));
        let mut loss_nodes = Vec::with_capacity(batch.len());
        for sample in batch {
            model.check_spatial(&sample.image, "image")?;
            model.check_spatial(&sample.condition, "condition")?;
            let u: f64 = rng.gen();
            let caption = if u < self.guidance.simple_prompt_fraction {
                self.guidance.simple_prompt.clone()
            } else {
                sample.caption.clone()
            };
            let text = encoder
                .encode(&caption)
                .map_err(|e| DiffusionError::BadConfig(format!("encoder: {e}")))?;
            model.check_text(&text)?;
            let t = rng.gen_range(1..=model.schedule.timesteps);
            let s = model.cfg.unet.image_size;
            let eps = Tensor::new(&[3, s, s], standard_normal_vec(&mut rng, 3 * s * s));
            let x_t = forward_diffuse(&model.schedule, &sample.image, t, &eps)?;

            let x = g.constant(x_t);
            let cond = g.constant(sample.condition.clone());
            let ctx = g.constant(text.tokens.clone());
            let temb = model.temb_node(&mut g, &model.params, t);
            let residuals = model.branch_graph(&mut g, &model.params, x, cond, temb, ctx);
            let eps_hat = model.eps_graph(&mut g, &model.params, x, temb, ctx, Some(residuals));
            let target = g.constant(eps);
            loss_nodes.push(g.mse(eps_hat, target));
        }
        let mut acc = loss_nodes[0];
        for &n in &loss_nodes[1..] {
            acc = g.add(acc, n);
        }
        let mean = g.scale(acc, 1.0 / batch.len() as f64);
        let loss = g.value(mean).item();
        if !loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss(model.step));
        }
        let grads = g.backward(mean);
        let by_name = g.param_grads(&grads);
        // frozen backbone: only branch gradients accumulate
        for (name, grad) in by_name {
            if !name.starts_with("ctrl.") {
                continue;
            }
            match self.accum.get_mut(&name) {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.accum.insert(name, grad);
                }
            }
        }
        self.micro += 1;
        if self.micro % self.recipe.grad_accum == 0 {
            let scale = 1.0 / self.recipe.grad_accum as f64;
            let averaged: BTreeMap<String, Tensor> = self
                .accum
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x * scale)))
                .collect();
            self.opt.step(&mut model.params, &averaged);
            self.accum.clear();
            model.step += 1;
        }
        Ok(loss)
    }

    /// Micro-batches processed since construction.
    pub fn micro_batches_seen(&self) -> usize {
        self.micro
    }
}

/// Mean noise-prediction loss on a fixed probe set (deterministic t and eps
/// per item), used to compare before/after training.
pub fn probe_loss(
    model: &ControlledDiffusion,
    samples: &[ControlSample],
    encoder: &dyn TextEncoder,
    seed: u64,
) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for (i, sample) in samples.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, &format!("probe{i}")));
        let t = rng.gen_range(1..=model.schedule.timesteps);
        let s = model.cfg.unet.image_size;
        let eps = Tensor::new(&[3, s, s], standard_normal_vec(&mut rng, 3 * s * s));
        let x_t = forward_diffuse(&model.schedule, &sample.image, t, &eps)?;
        let text = encoder
            .encode(&sample.caption)
            .map_err(|e| DiffusionError::BadConfig(format!("encoder: {e}")))?;
        let eps_hat = model.predict_eps(&x_t, t, &text, Some(&sample.condition))?;
        let mse: f64 = eps_hat
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / eps.numel() as f64;
        total += mse;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{StubTextEncoder, TextError};
    use faceforge_tensor::bitwise_eq;
    use faceforge_tensor::nn::normal_init;
    use std::sync::Mutex;

    fn tiny_cfg() -> DiffusionConfig {
        DiffusionConfig {
            unet: UNetConfig {
                image_size: 8,
                base_channels: 4,
                mid_channels: 8,
                time_dim: 8,
                text_dim: 8,
                heads: 2,
                norm_groups: 2,
            },
            schedule: ScheduleConfig {
                timesteps: 50,
                ..ScheduleConfig::default()
            },
            seed: 1,
        }
    }

    fn enc() -> StubTextEncoder {
        StubTextEncoder::new(8)
    }

    fn text(s: &str) -> TextEmbedding {
        enc().encode(s).unwrap()
    }

    #[test]
    fn schedule_tables_are_valid_and_reproducible() {
        let s = NoiseSchedule::linear_default();
        assert_eq!(s.timesteps, 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        // the table is recoverable from the beta list alone
        let rebuilt = NoiseSchedule::from_betas(s.betas().to_vec()).unwrap();
        for t in 0..=1000 {
            assert_eq!(rebuilt.alpha_bar(t), s.alpha_bar(t));
        }
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = NoiseSchedule::linear_default();
        let x0 = Tensor::new(&[2, 1, 1], vec![0.3, -0.7]);
        let e = Tensor::new(&[2, 1, 1], vec![1.0, 2.0]);
        // t = 0 convention: alpha_bar = 1 so x_t == x0
        let x = forward_diffuse(&s, &x0, 0, &e).unwrap();
        assert_eq!(x, x0);
        // zero signal: x_t = sqrt(1 - ab) * eps
        let z = Tensor::zeros(&[2, 1, 1]);
        let t = 400;
        let xt = forward_diffuse(&s, &z, t, &e).unwrap();
        let c = (1.0 - s.alpha_bar(t)).sqrt();
        assert!((xt.data()[0] - c).abs() < 1e-15);
        assert!((xt.data()[1] - 2.0 * c).abs() < 1e-15);
        assert!(forward_diffuse(&s, &x0, 1001, &e).is_err());
    }

    #[test]
    fn forward_diffuse_monte_carlo_variance() {
        let s = NoiseSchedule::linear_default();
        let t = 600;
        let ab = s.alpha_bar(t);
        let var_x0: f64 = 2.0;
        let mut rng = rng_from_seed(123);
        let n = 10_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = Tensor::scalar(standard_normal_vec(&mut rng, 1)[0] * var_x0.sqrt());
            let e = Tensor::scalar(standard_normal_vec(&mut rng, 1)[0]);
            vals.push(forward_diffuse(&s, &x0, t, &e).unwrap().item());
        }
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let expected = ab * var_x0 + (1.0 - ab);
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn fresh_branch_residuals_are_exactly_zero() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(2);
        let x = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let c = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let rs = model.control_residuals(&c, &x, 10, &text("hi")).unwrap();
        assert_eq!(rs.len(), 3);
        for r in rs {
            assert!(r.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fresh_branch_sampling_equals_branchless() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let t = text("portrait");
        let u = enc().encode_uncond();
        let mut rng = rng_from_seed(3);
        let cond = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let opts = SampleOptions {
            steps: 6,
            cfg_scale: 2.0,
            seed: 9,
            sampler: SamplerKind::Ddim,
        };
        let with = model.sample(&t, &u, Some(&cond), &opts).unwrap();
        let without = model.sample(&t, &u, None, &opts).unwrap();
        assert_eq!(with.shape(), &[3, 8, 8]);
        assert!(with.max_abs_diff(&without) < 1e-12);
    }

    #[test]
    fn one_update_makes_some_residual_nonzero() {
        let mut model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let mut trainer = ControlTrainer::new(
            TrainRecipe {
                grad_accum: 1,
                lr: 1e-3,
                ..TrainRecipe::default()
            },
            GuidanceConfig::default(),
        )
        .unwrap();
        let mut rng = rng_from_seed(4);
        let batch = vec![ControlSample {
            image: normal_init(&mut rng, &[3, 8, 8], 0.5),
            condition: normal_init(&mut rng, &[3, 8, 8], 0.5),
            caption: "a face".into(),
        }];
        trainer.micro_step(&mut model, &batch, &enc(), 0).unwrap();
        let x = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let c = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let rs = model.control_residuals(&c, &x, 5, &text("hi")).unwrap();
        assert!(
            rs.iter().any(|r| r.data().iter().any(|&v| v != 0.0)),
            "residuals still all zero after an update"
        );
    }

    #[test]
    fn backbone_stays_bitwise_frozen_under_training() {
        let mut model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let before = model.params.clone();
        let mut trainer = ControlTrainer::new(
            TrainRecipe {
                grad_accum: 2,
                lr: 1e-3,
                ..TrainRecipe::default()
            },
            GuidanceConfig::default(),
        )
        .unwrap();
        let mut rng = rng_from_seed(5);
        let batch: Vec<ControlSample> = (0..2)
            .map(|_| ControlSample {
                image: normal_init(&mut rng, &[3, 8, 8], 0.5),
                condition: normal_init(&mut rng, &[3, 8, 8], 0.5),
                caption: "x".into(),
            })
            .collect();
        for s in 0..6 {
            trainer.micro_step(&mut model, &batch, &enc(), s).unwrap();
        }
        let changed = before.diff_names(&model.params);
        assert!(!changed.is_empty(), "branch never moved");
        for name in &changed {
            assert!(
                name.starts_with("ctrl."),
                "backbone tensor {name} changed during branch training"
            );
        }
        for name in before.names().filter(|n| n.starts_with("unet.")) {
            assert!(bitwise_eq(before.get(name), model.params.get(name)));
        }
    }

    #[test]
    fn gradient_accumulation_updates_every_nth_micro_batch() {
        let mut model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let accum = 4;
        let mut trainer = ControlTrainer::new(
            TrainRecipe {
                grad_accum: accum,
                lr: 1e-3,
                ..TrainRecipe::default()
            },
            GuidanceConfig::default(),
        )
        .unwrap();
        let mut rng = rng_from_seed(6);
        let batch = vec![ControlSample {
            image: normal_init(&mut rng, &[3, 8, 8], 0.5),
            condition: normal_init(&mut rng, &[3, 8, 8], 0.5),
            caption: "x".into(),
        }];
        for s in 0..accum - 1 {
            let snap = model.params.clone();
            trainer
                .micro_step(&mut model, &batch, &enc(), s as u64)
                .unwrap();
            assert!(
                snap.diff_names(&model.params).is_empty(),
                "params moved before accumulation boundary"
            );
        }
        let snap = model.params.clone();
        trainer
            .micro_step(&mut model, &batch, &enc(), accum as u64)
            .unwrap();
        assert!(
            !snap.diff_names(&model.params).is_empty(),
            "no update at accumulation boundary"
        );
        assert_eq!(model.step, 1);
    }

    struct RecordingEncoder {
        inner: StubTextEncoder,
        seen: Mutex<Vec<String>>,
    }

    impl TextEncoder for RecordingEncoder {
        fn id(&self) -> &str {
            "recording"
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn encode(&self, t: &str) -> Result<TextEmbedding, TextError> {
            self.seen.lock().unwrap().push(t.to_string());
            self.inner.encode(t)
        }
        fn encode_uncond(&self) -> TextEmbedding {
            self.inner.encode_uncond()
        }
    }

    #[test]
    fn simple_prompt_fraction_one_replaces_every_caption() {
        let mut model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let guidance = GuidanceConfig {
            simple_prompt_fraction: 1.0,
            ..GuidanceConfig::default()
        };
        let simple = guidance.simple_prompt.clone();
        let mut trainer = ControlTrainer::new(
            TrainRecipe {
                grad_accum: 1,
                ..TrainRecipe::default()
            },
            guidance,
        )
        .unwrap();
        let recorder = RecordingEncoder {
            inner: StubTextEncoder::new(8),
            seen: Mutex::new(Vec::new()),
        };
        let mut rng = rng_from_seed(7);
        let batch: Vec<ControlSample> = (0..3)
            .map(|i| ControlSample {
                image: normal_init(&mut rng, &[3, 8, 8], 0.5),
                condition: normal_init(&mut rng, &[3, 8, 8], 0.5),
                caption: format!("caption {i}"),
            })
            .collect();
        trainer.micro_step(&mut model, &batch, &recorder, 0).unwrap();
        let seen = recorder.seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().all(|c| c == &simple));
    }

    #[test]
    fn cfg_scale_zero_is_the_unconditional_path() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(8);
        let x = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let t = text("conditioned");
        let u = text("plain");
        let guided = model.guided_eps(&x, 7, &t, &u, None, 0.0).unwrap();
        let uncond = model.predict_eps(&x, 7, &u, None).unwrap();
        assert_eq!(guided, uncond);
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(9);
        let x = normal_init(&mut rng, &[3, 8, 8], 1.0);
        let t = text("a smiling face");
        let u = enc().encode_uncond();
        let s = 3.3;
        let e0 = model.guided_eps(&x, 11, &t, &u, None, 0.0).unwrap();
        let e1 = model.guided_eps(&x, 11, &t, &u, None, s).unwrap();
        let e2 = model.guided_eps(&x, 11, &t, &u, None, 2.0 * s).unwrap();
        for i in 0..e0.numel() {
            let lhs = e2.data()[i] - e0.data()[i];
            let rhs = 2.0 * (e1.data()[i] - e0.data()[i]);
            assert!((lhs - rhs).abs() < 1e-6, "affinity broken at {i}");
        }
    }

    #[test]
    fn ddim_sampling_is_bitwise_deterministic() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let t = text("same");
        let u = enc().encode_uncond();
        let opts = SampleOptions {
            steps: 5,
            cfg_scale: 1.5,
            seed: 77,
            sampler: SamplerKind::Ddim,
        };
        let a = model.sample(&t, &u, None, &opts).unwrap();
        let b = model.sample(&t, &u, None, &opts).unwrap();
        assert!(bitwise_eq(&a, &b));
        let c = model
            .sample(
                &t,
                &u,
                None,
                &SampleOptions {
                    seed: 78,
                    ..opts
                },
            )
            .unwrap();
        assert!(!bitwise_eq(&a, &c));
    }

    #[test]
    fn ddpm_sampling_shape_and_determinism() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let t = text("shape");
        let u = enc().encode_uncond();
        let opts = SampleOptions {
            steps: 4,
            cfg_scale: 1.0,
            seed: 5,
            sampler: SamplerKind::Ddpm,
        };
        let a = model.sample(&t, &u, None, &opts).unwrap();
        assert_eq!(a.shape(), &[3, 8, 8]);
        let b = model.sample(&t, &u, None, &opts).unwrap();
        assert!(bitwise_eq(&a, &b));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn steps_beyond_schedule_are_rejected() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let t = text("x");
        let u = enc().encode_uncond();
        let opts = SampleOptions {
            steps: 51,
            ..SampleOptions::default()
        };
        assert!(matches!(
            model.sample(&t, &u, None, &opts),
            Err(DiffusionError::TooManySteps { .. })
        ));
    }

    #[test]
    fn sampling_timestep_pairs_cover_the_range() {
        for (steps, t_max) in [(1, 1000), (7, 1000), (50, 50), (3, 10)] {
            let pairs = sampling_timesteps(steps, t_max);
            assert_eq!(pairs.len(), steps);
            assert_eq!(pairs[0].0, t_max);
            assert_eq!(pairs.last().unwrap().1, 0);
            for (a, b) in &pairs {
                assert!(a > b, "non-decreasing pair ({a},{b})");
            }
        }
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        let bad = Tensor::zeros(&[3, 16, 16]);
        let good = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(
            model.control_residuals(&bad, &good, 1, &text("x")),
            Err(DiffusionError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cd.ckpt");
        let model = ControlledDiffusion::new(tiny_cfg()).unwrap();
        model.save(&path).unwrap();
        let loaded = ControlledDiffusion::load(&path).unwrap();
        let t = text("ckpt");
        let u = enc().encode_uncond();
        let opts = SampleOptions {
            steps: 3,
            cfg_scale: 1.0,
            seed: 2,
            sampler: SamplerKind::Ddim,
        };
        assert!(bitwise_eq(
            &model.sample(&t, &u, None, &opts).unwrap(),
            &loaded.sample(&t, &u, None, &opts).unwrap()
        ));
    }
}
