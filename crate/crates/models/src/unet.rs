//! The inflated denoising UNet, its control branch, the appearance encoder
//! and the segmentation head. All parameters live in one [`ParamStore`]
//! under the prefixes `unet.`, `ctrl.`, `app.` and `seg.`.

use rand::Rng;
use vase_autograd::nn::{Conv2d, GroupNorm, Linear};
use vase_autograd::{Array, Ctx, ParamStore, Scalar, Var};

use crate::blocks::{add_channel_bias, per_frame, timestep_embedding, AppCrossAttention, Clip, ResBlock, SpatialAttention, TemporalBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const UNET: &str = "unet.";
pub const CTRL: &str = "ctrl.";
pub const APP: &str = "app.";
pub const SEG: &str = "seg.";

/// Channels of the denoiser input: noisy frames, masked frames, bbox mask.
pub const IN_CHANNELS: usize = 7;
/// Channels of the control hint: flow (u, v) and structure mask.
pub const HINT_CHANNELS: usize = 3;

#[derive(Clone, Debug)]
struct TimeEmbed {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbed {
    fn new(prefix: &str, base: usize, tdim: usize) -> Self {
        Self {
            dim: base,
            l1: Linear::new(format!("{prefix}time.l1"), base, tdim),
            l2: Linear::new(format!("{prefix}time.l2"), tdim, tdim),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.l1.init(store, rng, false);
        self.l2.init(store, rng, false);
    }

    /// Activated `[B·T, tdim]` embedding from one timestep per clip.
    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, steps: &[f64], clip: Clip) -> Var<'g, T> {
        let rows: Vec<f64> = steps.iter().flat_map(|&t| std::iter::repeat(t).take(clip.frames)).collect();
        let e = ctx.constant(timestep_embedding(&rows, self.dim));
        self.l2.forward(ctx, self.l1.forward(ctx, e).silu()).silu()
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Option<Conv2d>,
    res: ResBlock,
    cross: AppCrossAttention,
    attn: Option<SpatialAttention>,
    temporal: TemporalBlock,
}

/// Input convolution plus the downsampling path; shared layout between the
/// UNet (`unet.`) and its trainable copy (`ctrl.`).
#[derive(Clone, Debug)]
struct Encoder {
    time: TimeEmbed,
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
}

impl Encoder {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let w = cfg.widths();
        let tdim = cfg.time_dim();
        let last = cfg.levels - 1;
        let levels = (0..cfg.levels)
            .map(|i| {
                let cin = if i == 0 { w[0] } else { w[i - 1] };
                let name = format!("{prefix}enc{i}");
                EncoderLevel {
                    down: (i > 0).then(|| Conv2d::new(format!("{name}.down"), cin, cin, 3).strided(2)),
                    res: ResBlock::new(&format!("{name}.res"), cin, w[i], tdim, cfg.groups),
                    cross: AppCrossAttention::new(&format!("{name}.cross"), cfg.app_dim, w[i]),
                    attn: (i == last).then(|| SpatialAttention::new(&format!("{name}.attn"), w[i])),
                    temporal: TemporalBlock::new(&format!("{name}.temporal"), w[i], cfg.max_frames),
                }
            })
            .collect();
        Self {
            time: TimeEmbed::new(prefix, cfg.base_width, tdim),
            conv_in: Conv2d::new(format!("{prefix}conv_in"), IN_CHANNELS, w[0], 3),
            levels,
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.time.init(store, rng);
        self.conv_in.init(store, rng, false);
        for l in &self.levels {
            if let Some(d) = &l.down {
                d.init(store, rng, false);
            }
            l.res.init(store, rng);
            l.cross.init(store, rng);
            if let Some(a) = &l.attn {
                a.init(store, rng);
            }
            l.temporal.init(store, rng);
        }
    }

    /// Returns the activation after every level; the last one is the
    /// bottleneck. `hint` is added right after the input convolution.
    fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        hint: Option<Var<'g, T>>,
        temb: Var<'g, T>,
        app: Var<'g, T>,
        clip: Clip,
        temporal: bool,
    ) -> Vec<Var<'g, T>> {
        let mut h = self.conv_in.forward(ctx, x);
        if let Some(hint) = hint {
            h = h + hint;
        }
        let mut feats = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            if let Some(d) = &l.down {
                h = d.forward(ctx, h);
            }
            h = l.res.forward(ctx, h, temb);
            h = l.cross.forward(ctx, h, app);
            if let Some(a) = &l.attn {
                h = a.forward(ctx, h);
            }
            if temporal {
                h = l.temporal.forward(ctx, h, clip);
            }
            feats.push(h);
        }
        feats
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    res: ResBlock,
    cross: AppCrossAttention,
    temporal: TemporalBlock,
}

/// Per-forward conditioning of the denoiser.
pub struct UNetInput<'g, T: Scalar> {
    /// Noisy frames `[B·T, 3, H, W]` in the model's [−1, 1] space.
    pub z: Var<'g, T>,
    /// Masked source frames `[B·T, 3, H, W]` in [−1, 1], zero inside the bbox.
    pub masked: Var<'g, T>,
    /// Bounding-box mask `[B·T, 1, H, W]`.
    pub bbox: Var<'g, T>,
    /// One diffusion timestep per clip.
    pub steps: Vec<f64>,
    /// Appearance embedding `[B, app_dim]`.
    pub app: Var<'g, T>,
    pub clip: Clip,
}

impl<'g, T: Scalar> UNetInput<'g, T> {
    fn stacked(&self) -> Var<'g, T> {
        Var::concat(&[self.z, self.masked, self.bbox], 1)
    }
}

pub struct UNetOutput<'g, T: Scalar> {
    /// Predicted noise `[B·T, 3, H, W]`.
    pub eps: Var<'g, T>,
    /// Activation feeding the output convolution `[B·T, C0, H, W]`.
    pub seg_feature: Var<'g, T>,
    /// Activated timestep embedding `[B·T, tdim]`.
    pub temb: Var<'g, T>,
}

/// Encoder of the reference crop: four convolutions, global average pool,
/// linear compression to `app_dim`, plus the learned null embedding used
/// when the image condition is dropped.
#[derive(Clone, Debug)]
pub struct AppEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
    null: String,
    app_dim: usize,
    pub ref_size: usize,
}

impl AppEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.base_width;
        let convs = vec![
            Conv2d::new(format!("{APP}conv0"), 3, c, 3).strided(2),
            Conv2d::new(format!("{APP}conv1"), c, 2 * c, 3).strided(2),
            Conv2d::new(format!("{APP}conv2"), 2 * c, 2 * c, 3).strided(2),
            Conv2d::new(format!("{APP}conv3"), 2 * c, 2 * c, 3),
        ];
        Self {
            convs,
            proj: Linear::new(format!("{APP}proj"), 2 * c, cfg.app_dim),
            null: format!("{APP}null"),
            app_dim: cfg.app_dim,
            ref_size: cfg.ref_size,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng, false);
        }
        self.proj.init(store, rng, false);
        store.insert(self.null.clone(), Array::zeros(&[self.app_dim]));
    }

    /// `refs` is `[B, 3, R, R]` in [−1, 1]; returns `[B, app_dim]`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, refs: Var<'g, T>) -> Var<'g, T> {
        let mut h = refs;
        for c in &self.convs {
            h = c.forward(ctx, h).silu();
        }
        let s = h.shape();
        let pooled = h.mean_axes_keep(&[2, 3]).reshape(&[s[0], s[1]]);
        self.proj.forward(ctx, pooled)
    }

    /// Embeddings with dropped rows (`keep[b] = false`) replaced by the null
    /// embedding.
    pub fn embed<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, refs: Var<'g, T>, keep: &[bool]) -> Var<'g, T> {
        let b = keep.len();
        let null = ctx.param(&self.null).reshape(&[1, self.app_dim]);
        if keep.iter().all(|k| !k) {
            return null.broadcast_to(&[b, self.app_dim]);
        }
        let e = self.forward(ctx, refs);
        if keep.iter().all(|&k| k) {
            return e;
        }
        let k: Vec<T> = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        let kv = ctx.constant(Array::from_vec(&[b, 1], k.clone()));
        let inv = ctx.constant(Array::from_vec(&[b, 1], k.iter().map(|&v| T::one() - v).collect()));
        e * kv + null * inv
    }
}

/// Four convolutions from the last decoder activation to per-pixel logits,
/// with the timestep embedding added after the first.
#[derive(Clone, Debug)]
pub struct SegHead {
    convs: Vec<Conv2d>,
    temb: Linear,
}

impl SegHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.base_width;
        Self {
            convs: vec![
                Conv2d::new(format!("{SEG}conv0"), c, c, 3),
                Conv2d::new(format!("{SEG}conv1"), c, c, 3),
                Conv2d::new(format!("{SEG}conv2"), c, c, 3),
                Conv2d::new(format!("{SEG}conv3"), c, 1, 3),
            ],
            temb: Linear::new(format!("{SEG}temb"), cfg.time_dim(), c),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        for (i, c) in self.convs.iter().enumerate() {
            c.init(store, rng, i + 1 == self.convs.len());
        }
        self.temb.init(store, rng, false);
    }

    /// Logits `[B·T, 1, H, W]`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, feature: Var<'g, T>, temb: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.convs[0].forward(ctx, feature);
        h = add_channel_bias(h, self.temb.forward(ctx, temb)).silu();
        h = self.convs[1].forward(ctx, h).silu();
        h = self.convs[2].forward(ctx, h).silu();
        self.convs[3].forward(ctx, h)
    }
}

/// Trainable encoder copy that turns the flow/mask hint into residuals for
/// every skip connection and the bottleneck.
#[derive(Clone, Debug)]
pub struct ControlNet {
    encoder: Encoder,
    hint_in: Conv2d,
    hint_out: Conv2d,
    zero: Vec<Conv2d>,
}

impl ControlNet {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = cfg.widths();
        Self {
            encoder: Encoder::new(CTRL, cfg),
            hint_in: Conv2d::new(format!("{CTRL}hint.conv0"), HINT_CHANNELS, w[0], 3),
            hint_out: Conv2d::new(format!("{CTRL}hint.conv1"), w[0], w[0], 3),
            zero: w.iter().enumerate().map(|(i, &c)| Conv2d::new(format!("{CTRL}zero{i}"), c, c, 1)).collect(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.encoder.init(store, rng);
        self.hint_in.init(store, rng, false);
        self.hint_out.init(store, rng, true);
        for z in &self.zero {
            z.init(store, rng, true);
        }
    }

    /// One residual per injection point, ordered like the encoder levels.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        input: &UNetInput<'g, T>,
        hint: Var<'g, T>,
        temporal: bool,
    ) -> Vec<Var<'g, T>> {
        let temb = self.encoder.time.forward(ctx, &input.steps, input.clip);
        let app = per_frame(input.app, input.clip.frames);
        let h = self.hint_out.forward(ctx, self.hint_in.forward(ctx, hint).silu());
        let feats = self.encoder.forward(ctx, input.stacked(), Some(h), temb, app, input.clip, temporal);
        feats.into_iter().zip(&self.zero).map(|(f, z)| z.forward(ctx, f)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    encoder: Encoder,
    decoder: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = cfg.widths();
        let tdim = cfg.time_dim();
        let decoder = (0..cfg.levels.saturating_sub(1))
            .map(|i| {
                let name = format!("{UNET}dec{i}");
                DecoderLevel {
                    up: Conv2d::new(format!("{name}.up"), w[i + 1], w[i], 3),
                    res: ResBlock::new(&format!("{name}.res"), 2 * w[i], w[i], tdim, cfg.groups),
                    cross: AppCrossAttention::new(&format!("{name}.cross"), cfg.app_dim, w[i]),
                    temporal: TemporalBlock::new(&format!("{name}.temporal"), w[i], cfg.max_frames),
                }
            })
            .collect();
        Self {
            encoder: Encoder::new(UNET, cfg),
            decoder,
            norm_out: GroupNorm::new(format!("{UNET}norm_out"), cfg.groups, w[0]),
            conv_out: Conv2d::new(format!("{UNET}conv_out"), w[0], 3, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.encoder.init(store, rng);
        for d in &self.decoder {
            d.up.init(store, rng, false);
            d.res.init(store, rng);
            d.cross.init(store, rng);
            d.temporal.init(store, rng);
        }
        self.norm_out.init(store);
        self.conv_out.init(store, rng, false);
    }

    /// Number of control injection points (skips plus bottleneck).
    pub fn injection_points(&self) -> usize {
        self.encoder.levels.len()
    }

    /// `temporal = false` runs the per-frame (non-inflated) network.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        input: &UNetInput<'g, T>,
        control: Option<&[Var<'g, T>]>,
        temporal: bool,
    ) -> UNetOutput<'g, T> {
        let temb = self.encoder.time.forward(ctx, &input.steps, input.clip);
        let app = per_frame(input.app, input.clip.frames);
        let mut feats = self.encoder.forward(ctx, input.stacked(), None, temb, app, input.clip, temporal);
        if let Some(c) = control {
            assert_eq!(c.len(), feats.len(), "one control residual per injection point");
            for (f, r) in feats.iter_mut().zip(c) {
                *f = *f + *r;
            }
        }
        let mut h = *feats.last().expect("at least one level");
        for (i, d) in self.decoder.iter().enumerate().rev() {
            h = d.up.forward(ctx, h.upsample_nearest(2));
            h = Var::concat(&[h, feats[i]], 1);
            h = d.res.forward(ctx, h, temb);
            h = d.cross.forward(ctx, h, app);
            if temporal {
                h = d.temporal.forward(ctx, h, input.clip);
            }
        }
        let seg_feature = self.norm_out.forward(ctx, h).silu();
        UNetOutput { eps: self.conv_out.forward(ctx, seg_feature), seg_feature, temb }
    }
}

/// All diffusion-side networks of the editor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: ModelConfig,
    pub unet: UNet,
    pub control: ControlNet,
    pub app: AppEncoder,
    pub seg: SegHead,
}

impl Denoiser {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            unet: UNet::new(cfg),
            control: ControlNet::new(cfg),
            app: AppEncoder::new(cfg),
            seg: SegHead::new(cfg),
        }
    }

    /// Fresh parameters for every component. The control branch gets its
    /// own random encoder here; [`copy_encoder_to_control`] replaces it with
    /// the UNet encoder when control training starts.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.unet.init(store, rng);
        self.app.init(store, rng);
        self.control.init(store, rng);
        self.seg.init(store, rng);
    }

    /// Noise prediction with optional control hint `[B·T, 3, H, W]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        input: &UNetInput<'g, T>,
        hint: Option<Var<'g, T>>,
        temporal: bool,
    ) -> UNetOutput<'g, T> {
        let control = hint.map(|h| self.control.forward(ctx, input, h, temporal));
        self.unet.forward(ctx, input, control.as_deref(), temporal)
    }
}

/// Overwrite the control encoder (`ctrl.time`, `ctrl.conv_in`, `ctrl.enc*`)
/// with the UNet encoder's current values.
pub fn copy_encoder_to_control(store: &mut ParamStore<f32>) {
    let copies: Vec<(String, Array<f32>)> = store
        .iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(UNET)?;
            (rest.starts_with("time.") || rest.starts_with("conv_in.") || rest.starts_with("enc"))
                .then(|| (format!("{CTRL}{rest}"), v.clone()))
        })
        .collect();
    for (k, v) in copies {
        store.insert(k, v);
    }
}

/// Check a `[N, C, H, W]` array shape, naming the tensor on failure.
pub fn expect_shape(tensor: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape { tensor: tensor.to_string(), detail: format!("expected {want:?}, got {got:?}") })
    }
}
