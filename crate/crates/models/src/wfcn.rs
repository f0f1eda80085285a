//! Flow completion network: a small per-frame encoder-decoder with one
//! temporal mixing layer at the bottleneck that predicts a residual on the
//! (corrupted) input flow.

use rand::Rng;
use vase_autograd::nn::Conv2d;
use vase_autograd::{Array, Ctx, ParamStore, Scalar, Var};
use vase_core::{FlowSequence, MaskSequence};

use crate::blocks::{from_temporal, to_temporal, Clip, TemporalConv};
use crate::config::WfcnConfig;
use crate::error::{Error, Result};

pub const WFCN: &str = "wfcn.";

/// Input channels per flow frame: warped edit region, flow (u, v), structure mask.
pub const WFCN_IN: usize = 4;

#[derive(Clone, Debug)]
struct Down {
    down: Conv2d,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
struct Up {
    up: Conv2d,
    fuse: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Wfcn {
    pub cfg: WfcnConfig,
    /// Flow is divided by this on input and the output residual multiplied by it.
    pub flow_scale: f32,
    conv_in: Conv2d,
    downs: Vec<Down>,
    mix: TemporalConv,
    ups: Vec<Up>,
    conv_out: Conv2d,
}

impl Wfcn {
    pub fn new(cfg: &WfcnConfig, flow_scale: f32) -> Self {
        let c = cfg.width;
        let widths: Vec<usize> = (0..=cfg.levels).map(|i| if i == 0 { c } else { 2 * c }).collect();
        let downs = (0..cfg.levels)
            .map(|i| Down {
                down: Conv2d::new(format!("{WFCN}down{i}.down"), widths[i], widths[i + 1], 3).strided(2),
                conv: Conv2d::new(format!("{WFCN}down{i}.conv"), widths[i + 1], widths[i + 1], 3),
            })
            .collect();
        let ups = (0..cfg.levels)
            .map(|i| Up {
                up: Conv2d::new(format!("{WFCN}up{i}.up"), widths[i + 1], widths[i], 3),
                fuse: Conv2d::new(format!("{WFCN}up{i}.fuse"), 2 * widths[i], widths[i], 3),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            flow_scale,
            conv_in: Conv2d::new(format!("{WFCN}conv_in"), WFCN_IN, c, 3),
            downs,
            mix: TemporalConv::new(&format!("{WFCN}mix"), widths[cfg.levels], false),
            ups,
            conv_out: Conv2d::new(format!("{WFCN}conv_out"), c, 2, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.conv_in.init(store, rng, false);
        for d in &self.downs {
            d.down.init(store, rng, false);
            d.conv.init(store, rng, false);
        }
        self.mix.init(store, rng);
        for u in &self.ups {
            u.up.init(store, rng, false);
            u.fuse.init(store, rng, false);
        }
        self.conv_out.init(store, rng, true);
    }

    /// `x` is `[B·(T−1), 4, H, W]` with flow channels already divided by
    /// `flow_scale`; `flow` is the unscaled `[B·(T−1), 2, H, W]` input flow.
    /// Returns the completed flow, same shape as `flow`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, flow: Var<'g, T>, clip: Clip) -> Var<'g, T> {
        self.forward_traced(ctx, x, flow, clip, &mut |_, _| {})
    }

    /// [`Wfcn::forward`] calling `trace(layer_index, activation)` after
    /// every layer.
    pub fn forward_traced<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        flow: Var<'g, T>,
        clip: Clip,
        trace: &mut dyn FnMut(usize, Var<'g, T>),
    ) -> Var<'g, T> {
        let mut layer = 0;
        let mut step = |v: Var<'g, T>| {
            trace(layer, v);
            layer += 1;
            v
        };
        let mut h = step(self.conv_in.forward(ctx, x).silu());
        let mut skips = Vec::with_capacity(self.downs.len());
        for d in &self.downs {
            skips.push(h);
            h = step(d.down.forward(ctx, h).silu());
            h = step(d.conv.forward(ctx, h).silu());
        }
        let s = h.shape();
        h = step(from_temporal(self.mix.forward(ctx, to_temporal(h, clip)), clip, s[2], s[3]));
        for (u, skip) in self.ups.iter().zip(skips).rev() {
            h = step(u.up.forward(ctx, h.upsample_nearest(2)).silu());
            h = step(u.fuse.forward(ctx, Var::concat(&[h, skip], 1)).silu());
        }
        step(flow + self.conv_out.forward(ctx, h).scale(T::from_f64(self.flow_scale as f64)))
    }
}

/// One clip's worth of flow-completion input.
#[derive(Clone, Debug)]
pub struct WfcnInput {
    /// Warped edit region, `T` frames (only the first `T−1` are used).
    pub warped_region: MaskSequence,
    /// Flow, zero-filled inside the warped edit region.
    pub flow: FlowSequence,
    /// Structure masks, `T` frames.
    pub structure: MaskSequence,
}

impl WfcnInput {
    pub fn validate(&self) -> Result<()> {
        let (l, h, w) = (self.flow.len(), self.flow.height(), self.flow.width());
        for (name, m) in [("warped_region", &self.warped_region), ("structure", &self.structure)] {
            if m.frames() < l || m.height() != h || m.width() != w {
                return Err(Error::Shape {
                    tensor: name.to_string(),
                    detail: format!("{}x{}x{} masks for {l} flow fields of {h}x{w}", m.frames(), m.height(), m.width()),
                });
            }
        }
        Ok(())
    }
}

/// Stack a batch of inputs into the network layout: `([B·(T−1), 4, H, W]`
/// scaled input, `[B·(T−1), 2, H, W]` raw flow).
pub fn stack_inputs<T: Scalar>(inputs: &[&WfcnInput], flow_scale: f32) -> Result<(Array<T>, Array<T>, Clip)> {
    let first = inputs.first().ok_or(Error::EmptyDataset)?;
    let (l, h, w) = (first.flow.len(), first.flow.height(), first.flow.width());
    let hw = h * w;
    let mut x = Vec::with_capacity(inputs.len() * l * WFCN_IN * hw);
    let mut f = Vec::with_capacity(inputs.len() * l * 2 * hw);
    for inp in inputs {
        inp.validate()?;
        if (inp.flow.len(), inp.flow.height(), inp.flow.width()) != (l, h, w) {
            return Err(Error::Shape { tensor: "wfcn batch".into(), detail: "clips differ in size".into() });
        }
        for t in 0..l {
            let field = inp.flow.field_slice(t);
            x.extend(inp.warped_region.frame_slice(t).iter().map(|&v| T::from_f64(v as f64)));
            for c in 0..2 {
                x.extend((0..hw).map(|p| T::from_f64((field[2 * p + c] / flow_scale) as f64)));
            }
            x.extend(inp.structure.frame_slice(t).iter().map(|&v| T::from_f64(v as f64)));
            for c in 0..2 {
                f.extend((0..hw).map(|p| T::from_f64(field[2 * p + c] as f64)));
            }
        }
    }
    let n = inputs.len() * l;
    Ok((Array::from_vec(&[n, WFCN_IN, h, w], x), Array::from_vec(&[n, 2, h, w], f), Clip { batch: inputs.len(), frames: l }))
}

/// `[B·(T−1), 2, H, W]` network output back to one flow sequence per clip.
pub fn unstack_flow<T: Scalar>(out: &Array<T>, batch: usize) -> Result<Vec<FlowSequence>> {
    let s = out.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let l = n / batch;
    let hw = h * w;
    let d = out.data();
    (0..batch)
        .map(|b| {
            let mut data = vec![0f32; l * hw * 2];
            for t in 0..l {
                let base = (b * l + t) * 2 * hw;
                for p in 0..hw {
                    for c in 0..2 {
                        let v = d[base + c * hw + p].as_f64();
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!("wfcn output (clip {b}, field {t})")));
                        }
                        data[(t * hw + p) * 2 + c] = v as f32;
                    }
                }
            }
            Ok(FlowSequence::new(l, h, w, data)?)
        })
        .collect()
}

/// Complete the flow of a single clip (inference; no gradients). A
/// non-finite activation is reported with the index of the first layer
/// that produced it.
pub fn complete_flow(net: &Wfcn, store: &ParamStore<f32>, input: &WfcnInput) -> Result<FlowSequence> {
    let g = vase_autograd::Graph::<f32>::new();
    let ctx = Ctx::new(&g, store, vase_autograd::Trainable::Nothing);
    let (x, f, clip) = stack_inputs::<f32>(&[input], net.flow_scale)?;
    let mut bad = None;
    let out = net.forward_traced(&ctx, g.constant(x), g.constant(f), clip, &mut |i, v| {
        if bad.is_none() && !v.value().all_finite() {
            bad = Some(i);
        }
    });
    if let Some(i) = bad {
        return Err(Error::NonFinite(format!("wfcn layer {i}")));
    }
    Ok(unstack_flow(&out.value(), 1)?.remove(0))
}
