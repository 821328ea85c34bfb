//! The Prismer network: per-kind convolutional stems, a transformer encoder
//! with adaptors, the experts resampler and an autoregressive decoder that
//! cross-attends to the encoder output `z`.

mod checkpoint;
mod config;
mod layers;
mod params;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST};
pub use config::{
    parse_kinds, Mode, ModelConfig, ResamplerVariant, HIGH_LEVEL_STEM_STRIDES, PATCH_STRIDE,
    STEM_STRIDES,
};
pub use layers::{
    Adaptor, Attention, ConvStem, DecoderLayer, EncoderLayer, FeedForward, Linear, Norm,
    ResamplerLayer, NORM_EPS,
};
pub use params::{AdamMoments, Init, ParamGroup, ParamId, ParamSpec, Parameter, ParameterStore};

use crate::experts::{ExpertError, ExpertKind, ExpertLabelMap, INSTANCE_SLOTS};
use crate::seed::mix_seed;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use layers::{Builder, Sink};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Text tokens plus the length of the conditioning prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    /// Tokens `0..prefix_len` are conditioned on and never predicted.
    pub prefix_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, prefix_len: usize, vocab_size: usize) -> Result<Self> {
        if prefix_len > tokens.len() {
            return Err(ModelError::Contract(format!(
                "prefix {prefix_len} longer than sequence {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(ModelError::Contract(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { tokens, prefix_len })
    }

    /// `BOS prompt target EOS`, with `BOS prompt` as the prefix.
    pub fn prompted(prompt: &[usize], target: &[usize], vocab_size: usize) -> Result<Self> {
        use crate::vocab::{BOS, EOS};
        let mut tokens = Vec::with_capacity(prompt.len() + target.len() + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(target);
        tokens.push(EOS);
        Self::new(tokens, prompt.len() + 1, vocab_size)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Module layout. Fields are handles into the model's [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub rgb_stem: ConvStem,
    pub expert_stems: Vec<(ExpertKind, ConvStem)>,
    /// Shared by RGB and expert tokens at the same grid position.
    pub enc_pos: ParamId,
    pub instance_embed: Option<ParamId>,
    pub enc_layers: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub latents: Option<ParamId>,
    pub resampler_layers: Vec<ResamplerLayer>,
    pub resampler_norm: Option<Norm>,
    pub tok_embed: ParamId,
    pub dec_pos: ParamId,
    pub dec_layers: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub head: Linear,
}

fn build_network(cfg: &ModelConfig, bld: &mut Builder) -> Result<Network> {
    use ParamGroup::*;
    let ew = cfg.enc_width;
    let dw = cfg.dec_width;
    let rgb_stem = ConvStem::new(
        bld,
        "stem.rgb",
        3,
        &cfg.stem_channels,
        &STEM_STRIDES,
        ew,
        VisionBackbone,
    )?;
    let mut expert_stems = Vec::with_capacity(cfg.experts.len());
    for &kind in &cfg.experts {
        let strides = if kind.is_low_level() {
            &STEM_STRIDES
        } else {
            &HIGH_LEVEL_STEM_STRIDES
        };
        let name = format!("stem.{}", kind.name());
        let stem = ConvStem::new(
            bld,
            &name,
            kind.channels(),
            &cfg.stem_channels,
            strides,
            ew,
            ExpertStem,
        )?;
        expert_stems.push((kind, stem));
    }
    let enc_pos = bld.param(
        "encoder.pos",
        &[cfg.rgb_tokens(), ew],
        VisionBackbone,
        Init::Normal(0.5),
    )?;
    let instance_embed = if cfg.experts.iter().any(|k| k.has_instances()) {
        let c = crate::experts::HIGH_LEVEL_CHANNELS;
        Some(bld.param(
            "experts.instance_embed",
            &[INSTANCE_SLOTS, c],
            InstanceEmbedding,
            Init::Normal(0.1),
        )?)
    } else {
        None
    };
    let mut enc_layers = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        let n = format!("encoder.layer{i}");
        enc_layers.push(EncoderLayer {
            ln1: Norm::new(bld, &format!("{n}.ln1"), ew, VisionBackbone)?,
            attn: Attention::new(bld, &format!("{n}.attn"), ew, ew, cfg.heads, VisionBackbone)?,
            ln2: Norm::new(bld, &format!("{n}.ln2"), ew, VisionBackbone)?,
            ffn: FeedForward::new(
                bld,
                &format!("{n}.ffn"),
                ew,
                ew * cfg.ffn_mult,
                VisionBackbone,
            )?,
            adaptor: layers::Adaptor::new(bld, &format!("{n}.adaptor"), ew, cfg.adaptor_dim(ew))?,
        });
    }
    let enc_norm = Norm::new(bld, "encoder.ln_f", ew, VisionBackbone)?;

    let (latents, resampler_layers, resampler_norm) = match cfg.resampler {
        ResamplerVariant::Learned => {
            let latents = bld.param(
                "resampler.latents",
                &[cfg.latents, ew],
                Resampler,
                Init::Normal(1.0),
            )?;
            let mut layers = Vec::with_capacity(cfg.resampler_layers);
            for i in 0..cfg.resampler_layers {
                let n = format!("resampler.layer{i}");
                layers.push(ResamplerLayer {
                    attn: Attention::new(bld, &format!("{n}.attn"), ew, ew, cfg.heads, Resampler)?,
                    ffn: FeedForward::new(
                        bld,
                        &format!("{n}.ffn"),
                        ew,
                        ew * cfg.ffn_mult,
                        Resampler,
                    )?,
                });
            }
            (
                Some(latents),
                layers,
                Some(Norm::new(bld, "resampler.ln_out", ew, Resampler)?),
            )
        }
        ResamplerVariant::RandomSampling | ResamplerVariant::None => (None, Vec::new(), None),
    };

    let tok_embed = bld.param(
        "decoder.tok_embed",
        &[cfg.vocab_size, dw],
        LanguageBackbone,
        Init::Normal(1.0),
    )?;
    let dec_pos = bld.param(
        "decoder.pos",
        &[cfg.max_seq_len, dw],
        LanguageBackbone,
        Init::Normal(0.5),
    )?;
    let mut dec_layers = Vec::with_capacity(cfg.dec_layers);
    for i in 0..cfg.dec_layers {
        let n = format!("decoder.layer{i}");
        dec_layers.push(DecoderLayer {
            ln1: Norm::new(bld, &format!("{n}.ln1"), dw, LanguageBackbone)?,
            self_attn: Attention::new(
                bld,
                &format!("{n}.self_attn"),
                dw,
                dw,
                cfg.heads,
                LanguageBackbone,
            )?,
            ln_cross: Norm::new(bld, &format!("{n}.ln_cross"), dw, CrossAttention)?,
            cross_attn: Attention::new(
                bld,
                &format!("{n}.cross_attn"),
                dw,
                ew,
                cfg.heads,
                CrossAttention,
            )?,
            ln2: Norm::new(bld, &format!("{n}.ln2"), dw, LanguageBackbone)?,
            ffn: FeedForward::new(
                bld,
                &format!("{n}.ffn"),
                dw,
                dw * cfg.ffn_mult,
                LanguageBackbone,
            )?,
            adaptor: layers::Adaptor::new(bld, &format!("{n}.adaptor"), dw, cfg.adaptor_dim(dw))?,
        });
    }
    let dec_norm = Norm::new(bld, "decoder.ln_f", dw, LanguageBackbone)?;
    let head = Linear::new(bld, "decoder.head", dw, cfg.vocab_size, LanguageBackbone)?;

    Ok(Network {
        rgb_stem,
        expert_stems,
        enc_pos,
        instance_embed,
        enc_layers,
        enc_norm,
        latents,
        resampler_layers,
        resampler_norm,
        tok_embed,
        dec_pos,
        dec_layers,
        dec_norm,
        head,
    })
}

/// Names, shapes and groups of every parameter `config` would create,
/// without allocating values.
pub fn parameter_inventory(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut specs = Vec::new();
    build_network(
        config,
        &mut Builder {
            sink: Sink::Count(&mut specs),
            seed: 0,
        },
    )?;
    Ok(specs)
}

#[derive(Clone, Debug)]
pub struct Prismer {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub net: Network,
    pub seed: u64,
}

impl Prismer {
    /// Fresh model. Every parameter starts trainable; apply a freeze policy
    /// before training.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let net = build_network(
            &config,
            &mut Builder {
                sink: Sink::Store(&mut store),
                seed,
            },
        )?;
        Ok(Self {
            config,
            store,
            net,
            seed,
        })
    }

    pub fn stem(&self, kind: ExpertKind) -> Option<&ConvStem> {
        self.net
            .expert_stems
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, s)| s)
    }

    /// All adaptors, encoder first.
    pub fn adaptors(&self) -> impl Iterator<Item = &Adaptor> {
        self.net
            .enc_layers
            .iter()
            .map(|l| &l.adaptor)
            .chain(self.net.dec_layers.iter().map(|l| &l.adaptor))
    }
}

/// Input to [`Session::stem_forward`].
#[derive(Clone, Copy, Debug)]
pub enum StemInput<'a> {
    /// `H×W×3` in `[0, 1]`.
    Rgb(&'a Tensor),
    Expert(&'a ExpertLabelMap),
}

/// One forward evaluation of a model on a graph. Parameters are put on the
/// graph on first use: trainable ones as gradient leaves (when `track`),
/// frozen ones as constants.
pub struct Session<'m, 'g> {
    pub model: &'m Prismer,
    pub graph: &'g mut Graph,
    bound: Vec<Option<Var>>,
    track: bool,
    /// Seed for the random-sampling resampler.
    pub sample_seed: u64,
}

impl<'m, 'g> Session<'m, 'g> {
    pub fn new(model: &'m Prismer, graph: &'g mut Graph) -> Self {
        Self {
            model,
            graph,
            bound: vec![None; model.store.len()],
            track: true,
            sample_seed: mix_seed(model.seed, 0x5a),
        }
    }

    /// Session that records no gradients.
    pub fn inference(model: &'m Prismer, graph: &'g mut Graph) -> Self {
        Self {
            track: false,
            ..Self::new(model, graph)
        }
    }

    /// Uses `var` for parameter `id` instead of the stored value.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Trainable parameters put on the graph so far.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.model.store.get(id);
        let v = self
            .graph
            .leaf(param.value.clone(), self.track && !param.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Token grid `[S, enc_width]` with positional embedding added.
    pub fn stem_forward(&mut self, input: StemInput) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let (stem, x) = match input {
            StemInput::Rgb(rgb) => {
                let s = rgb.shape();
                if s.len() != 3 || s[2] != 3 {
                    return Err(ModelError::Config(format!(
                        "RGB input must be H×W×3, got {s:?}"
                    )));
                }
                let mut scaled = rgb.clone();
                scaled
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 2.0 * *v - 1.0);
                (&model.net.rgb_stem, self.graph.constant(scaled))
            }
            StemInput::Expert(map) => {
                let stem = model.stem(map.kind).ok_or_else(|| {
                    ModelError::Config(format!("no stem registered for expert {}", map.kind))
                })?;
                if map.grid.rank() != 3 || map.channels() != stem.in_channels {
                    return Err(ModelError::Config(format!(
                        "{} stem takes {} channels, map has shape {:?}",
                        map.kind,
                        stem.in_channels,
                        map.grid.shape()
                    )));
                }
                let mut x = self.graph.constant(map.grid.clone());
                if let (Some(slots), Some(table)) = (map.instance_slots(), model.net.instance_embed)
                {
                    let t = self.p(table);
                    let e = self.graph.gather_rows(t, &slots)?;
                    let e = self.graph.reshape(e, map.grid.shape())?;
                    x = self.graph.add(x, e)?;
                }
                (stem, x)
            }
        };
        let tokens = stem.forward(self, x)?;
        let n = self.graph.shape(tokens)[0];
        if n != cfg.rgb_tokens() {
            return Err(ModelError::Config(format!(
                "stem produced {n} tokens, the {0}×{0} image grid has {1}",
                cfg.image_size,
                cfg.rgb_tokens()
            )));
        }
        let pos = self.p(model.net.enc_pos);
        Ok(self.graph.add(tokens, pos)?)
    }

    pub fn adaptor_forward(&mut self, adaptor: &Adaptor, x: Var) -> Result<Var> {
        let width = self.model.store.get(adaptor.up.b).value.numel();
        if self.graph.shape(x).last() != Some(&width) {
            return Err(ModelError::Contract(format!(
                "adaptor of width {width} got {:?}",
                self.graph.shape(x)
            )));
        }
        adaptor.forward(self, x)
    }

    /// `[latents, enc_width]` from any non-empty list of token grids.
    pub fn resampler_forward(&mut self, grids: &[Var]) -> Result<Var> {
        if grids.is_empty() {
            return Err(ModelError::Contract(
                "resampler needs at least one expert; use prismer-z".into(),
            ));
        }
        let model = self.model;
        let tokens = if grids.len() == 1 {
            grids[0]
        } else {
            self.graph.concat(grids)?
        };
        match model.config.resampler {
            ResamplerVariant::Learned => {
                let mut x = self.p(model.net.latents.expect("learned resampler has latents"));
                for layer in &model.net.resampler_layers {
                    x = layer.forward(self, x, tokens)?;
                }
                Ok(x)
            }
            ResamplerVariant::RandomSampling => {
                let n = self.graph.shape(tokens)[0];
                let l = model.config.latents;
                let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
                let idx: Vec<Option<usize>> = if n >= l {
                    sample(&mut rng, n, l).into_iter().map(Some).collect()
                } else {
                    (0..l).map(|_| Some(rng.random_range(0..n))).collect()
                };
                Ok(self.graph.gather_rows(tokens, &idx)?)
            }
            ResamplerVariant::None => Err(ModelError::Config("model has no resampler".into())),
        }
    }

    /// `z`: encoded RGB tokens followed, in prismer mode, by the resampled
    /// expert tokens.
    pub fn encoder_forward(&mut self, rgb: &Tensor, maps: &[ExpertLabelMap]) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let mut given: Vec<ExpertKind> = maps.iter().map(|m| m.kind).collect();
        let mut wanted = cfg.experts.clone();
        given.sort();
        wanted.sort();
        if given != wanted {
            return Err(ModelError::Config(format!(
                "model expects experts {:?}, got {:?}",
                cfg.experts, given
            )));
        }
        let mut x = self.stem_forward(StemInput::Rgb(rgb))?;
        for layer in &model.net.enc_layers {
            x = layer.forward(self, x)?;
        }
        let rgb_feats = model.net.enc_norm.forward(self, x)?;
        if cfg.mode == Mode::PrismerZ {
            return Ok(rgb_feats);
        }
        let mut grids = Vec::with_capacity(maps.len());
        for kind in &cfg.experts {
            let map = maps
                .iter()
                .find(|m| m.kind == *kind)
                .expect("kinds checked above");
            grids.push(self.stem_forward(StemInput::Expert(map))?);
        }
        let mut latents = self.resampler_forward(&grids)?;
        if let Some(norm) = &model.net.resampler_norm {
            latents = norm.forward(self, latents)?;
        }
        Ok(self.graph.concat(&[rgb_feats, latents])?)
    }

    /// Logits `[T, vocab]`; row `t` depends on tokens `0..=t` and on `z`.
    pub fn decoder_forward(&mut self, z: Var, tokens: &[usize]) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(ModelError::Length(format!(
                "sequence of {} tokens, allowed 1..={}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = self.p(model.net.tok_embed);
        let idx: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
        let emb = self.graph.gather_rows(table, &idx)?;
        let pos = self.p(model.net.dec_pos);
        let pos = self.graph.slice_rows(pos, 0, tokens.len())?;
        let mut x = self.graph.add(emb, pos)?;
        for layer in &model.net.dec_layers {
            x = layer.forward(self, x, z)?;
        }
        let x = model.net.dec_norm.forward(self, x)?;
        model.net.head.forward(self, x)
    }

    /// Mean next-token cross-entropy over the tokens after the prefix.
    pub fn prefix_lm_loss(&mut self, z: Var, seq: &TokenSequence) -> Result<Var> {
        let logits = self.decoder_forward(z, &seq.tokens)?;
        let (targets, mask) = next_token_targets(seq);
        Ok(self.graph.cross_entropy(logits, &targets, &mask)?)
    }
}

/// Row `t` of the logits predicts token `t + 1`; it counts towards the loss
/// when that token lies outside the prefix. Token 0 is never predicted.
pub fn next_token_targets(seq: &TokenSequence) -> (Vec<usize>, Vec<bool>) {
    let t = seq.tokens.len();
    let first = seq.prefix_len.max(1);
    (0..t)
        .map(|i| {
            if i + 1 < t {
                (seq.tokens[i + 1], i + 1 >= first)
            } else {
                (0, false)
            }
        })
        .unzip()
}
