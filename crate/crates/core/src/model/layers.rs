use super::params::{Init, ParamGroup, ParamId, ParamSpec, ParameterStore};
use super::{ModelError, Session};
use crate::tensor::Var;

/// Where construction sends parameters: a real store, or a shape-only list
/// for sizes too large to allocate.
pub(crate) enum Sink<'a> {
    Store(&'a mut ParameterStore),
    Count(&'a mut Vec<ParamSpec>),
}

pub(crate) struct Builder<'a> {
    pub sink: Sink<'a>,
    pub seed: u64,
}

impl Builder<'_> {
    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        group: ParamGroup,
        init: Init,
    ) -> Result<ParamId, ModelError> {
        match &mut self.sink {
            Sink::Store(store) => store.register(name, shape, group, init, self.seed),
            Sink::Count(specs) => {
                specs.push(ParamSpec {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    group,
                });
                Ok(ParamId(specs.len() - 1))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Result<Self, ModelError> {
        Self::with_init(
            bld,
            name,
            fan_in,
            fan_out,
            group,
            Init::Normal(1.0 / (fan_in as f64).sqrt()),
        )
    }

    pub(crate) fn with_init(
        bld: &mut Builder,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        init: Init,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w: bld.param(&format!("{name}.weight"), &[fan_in, fan_out], group, init)?,
            b: bld.param(&format!("{name}.bias"), &[fan_out], group, Init::Zeros)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, ModelError> {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.graph.matmul(x, w)?;
        Ok(s.graph.add_row(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        width: usize,
        group: ParamGroup,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            gain: bld.param(&format!("{name}.gain"), &[width], group, Init::Ones)?,
            bias: bld.param(&format!("{name}.bias"), &[width], group, Init::Zeros)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, ModelError> {
        let g = s.p(self.gain);
        let b = s.p(self.bias);
        Ok(s.graph.layer_norm(x, g, b, NORM_EPS)?)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            q: Linear::new(bld, &format!("{name}.q"), width, width, group)?,
            k: Linear::new(bld, &format!("{name}.k"), kv_width, width, group)?,
            v: Linear::new(bld, &format!("{name}.v"), kv_width, width, group)?,
            o: Linear::new(bld, &format!("{name}.o"), width, width, group)?,
            heads,
            width,
        })
    }

    /// `causal` restricts query `i` to keys `0..=i + (keys - queries)`.
    pub fn forward(
        &self,
        s: &mut Session,
        xq: Var,
        xkv: Var,
        causal: bool,
    ) -> Result<Var, ModelError> {
        let q = self.q.forward(s, xq)?;
        let k = self.k.forward(s, xkv)?;
        let v = self.v.forward(s, xkv)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let g = &mut s.graph;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let probs = if causal {
                g.causal_softmax(scores)?
            } else {
                g.softmax(scores, 1)?
            };
            outs.push(g.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        self.o.forward(s, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        width: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            up: Linear::new(bld, &format!("{name}.up"), width, hidden, group)?,
            down: Linear::new(bld, &format!("{name}.down"), hidden, width, group)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, ModelError> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.gelu(h)?;
        self.down.forward(s, h)
    }
}

/// Residual bottleneck: `x + up(squared_relu(down(x)))`, identity at init.
#[derive(Clone, Debug)]
pub struct Adaptor {
    pub down: Linear,
    pub up: Linear,
}

impl Adaptor {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        width: usize,
        bottleneck: usize,
    ) -> Result<Self, ModelError> {
        let down_std = 1.0 / (width as f64).sqrt();
        Ok(Self {
            down: Linear::with_init(
                bld,
                &format!("{name}.down"),
                width,
                bottleneck,
                ParamGroup::Adaptor,
                Init::Normal(down_std),
            )?,
            up: Linear::with_init(
                bld,
                &format!("{name}.up"),
                bottleneck,
                width,
                ParamGroup::Adaptor,
                Init::Zeros,
            )?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, ModelError> {
        let h = self.down.forward(s, x)?;
        let h = s.graph.squared_relu(h)?;
        let h = self.up.forward(s, h)?;
        Ok(s.graph.add(x, h)?)
    }
}

/// Five 3×3 convolutions with GELU, then a projection to the encoder width.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub convs: Vec<(ParamId, ParamId, usize)>,
    pub proj: Linear,
    pub in_channels: usize,
}

impl ConvStem {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        in_channels: usize,
        channels: &[usize; 5],
        strides: &[usize; 5],
        width: usize,
        group: ParamGroup,
    ) -> Result<Self, ModelError> {
        let mut convs = Vec::with_capacity(5);
        let mut cin = in_channels;
        for (i, (&cout, &stride)) in channels.iter().zip(strides).enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let k = bld.param(
                &format!("{name}.conv{i}.kernel"),
                &[3, 3, cin, cout],
                group,
                Init::Normal(std),
            )?;
            let b = bld.param(&format!("{name}.conv{i}.bias"), &[cout], group, Init::Zeros)?;
            convs.push((k, b, stride));
            cin = cout;
        }
        let proj = Linear::new(bld, &format!("{name}.proj"), cin, width, group)?;
        Ok(Self {
            convs,
            proj,
            in_channels,
        })
    }

    /// `[H, W, C]` input to `[tokens, width]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        for &(k, b, stride) in &self.convs {
            let kv = s.p(k);
            let bv = s.p(b);
            let y = s.graph.conv2d(h, kv, stride, 1)?;
            let y = s.graph.add_row(y, bv)?;
            h = s.graph.gelu(y)?;
        }
        let shape = s.graph.shape(h).to_vec();
        let flat = s.graph.reshape(h, &[shape[0] * shape[1], shape[2]])?;
        self.proj.forward(s, flat)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ffn: FeedForward,
    pub adaptor: Adaptor,
}

impl EncoderLayer {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, ModelError> {
        let h = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, h, h, false)?;
        let x = s.graph.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        let x = s.graph.add(x, f)?;
        self.adaptor.forward(s, x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln2: Norm,
    pub ffn: FeedForward,
    pub adaptor: Adaptor,
}

impl DecoderLayer {
    pub fn forward(&self, s: &mut Session, x: Var, z: Var) -> Result<Var, ModelError> {
        let h = self.ln1.forward(s, x)?;
        let a = self.self_attn.forward(s, h, h, true)?;
        let x = s.graph.add(x, a)?;
        let h = self.ln_cross.forward(s, x)?;
        let c = self.cross_attn.forward(s, h, z, false)?;
        let x = s.graph.add(x, c)?;
        let h = self.ln2.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        let x = s.graph.add(x, f)?;
        self.adaptor.forward(s, x)
    }
}

/// One latent cross-attention layer: queries are the latents, keys and
/// values the expert tokens followed by the latents.
#[derive(Clone, Debug)]
pub struct ResamplerLayer {
    pub attn: Attention,
    pub ffn: FeedForward,
}

impl ResamplerLayer {
    pub fn forward(&self, s: &mut Session, latents: Var, tokens: Var) -> Result<Var, ModelError> {
        let kv = s.graph.concat(&[tokens, latents])?;
        let a = self.attn.forward(s, latents, kv, false)?;
        let x = s.graph.add(latents, a)?;
        let f = self.ffn.forward(s, x)?;
        Ok(s.graph.add(x, f)?)
    }
}
