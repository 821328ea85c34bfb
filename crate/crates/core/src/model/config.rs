use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::experts::ExpertKind;
use crate::vocab::Vocab;

/// Stride schedule of the five-layer stem for full-resolution inputs.
pub const STEM_STRIDES: [usize; 5] = [2, 2, 2, 2, 1];
/// Stride schedule for inputs already at quarter resolution.
pub const HIGH_LEVEL_STEM_STRIDES: [usize; 5] = [2, 2, 1, 1, 1];
/// Total spatial reduction from RGB pixels to encoder tokens.
pub const PATCH_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Prismer,
    PrismerZ,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Prismer => "prismer",
            Mode::PrismerZ => "prismer-z",
        }
    }
}

impl FromStr for Mode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "prismer" => Ok(Mode::Prismer),
            "prismer-z" | "prismerz" => Ok(Mode::PrismerZ),
            _ => Err(ModelError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResamplerVariant {
    /// Learned latent queries cross-attending expert tokens and themselves.
    Learned,
    /// Parameter-free uniform sampling of expert tokens.
    RandomSampling,
    None,
}

impl ResamplerVariant {
    pub fn name(self) -> &'static str {
        match self {
            ResamplerVariant::Learned => "learned",
            ResamplerVariant::RandomSampling => "random-sampling",
            ResamplerVariant::None => "none",
        }
    }
}

impl FromStr for ResamplerVariant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "learned" => Ok(ResamplerVariant::Learned),
            "random-sampling" | "random" => Ok(ResamplerVariant::RandomSampling),
            "none" => Ok(ResamplerVariant::None),
            _ => Err(ModelError::Config(format!(
                "unknown resampler variant {s:?}"
            ))),
        }
    }
}

impl fmt::Display for ResamplerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Square RGB input side in pixels.
    pub image_size: usize,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub dec_width: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Output channels of the five stem convolutions.
    pub stem_channels: [usize; 5],
    pub latents: usize,
    pub resampler_layers: usize,
    pub resampler: ResamplerVariant,
    /// Adaptor bottleneck width as a fraction of the layer width.
    pub adaptor_ratio: f64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub experts: Vec<ExpertKind>,
    /// Parameters of external frozen expert networks whose labels feed the
    /// model. Only used for parameter and cost accounting.
    pub expert_network_params: u64,
}

impl ModelConfig {
    /// Laptop-scale Prismer with the given experts.
    pub fn desk(experts: Vec<ExpertKind>) -> Self {
        Self {
            mode: Mode::Prismer,
            image_size: 64,
            enc_width: 64,
            enc_layers: 2,
            dec_width: 64,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            stem_channels: [8, 16, 32, 32, 64],
            latents: 16,
            resampler_layers: 2,
            resampler: ResamplerVariant::Learned,
            adaptor_ratio: 1.0,
            vocab_size: Vocab::get().len(),
            max_seq_len: 24,
            experts,
            expert_network_params: 0,
        }
    }

    /// Laptop-scale PrismerZ (no experts, no resampler).
    pub fn desk_z() -> Self {
        Self {
            mode: Mode::PrismerZ,
            resampler: ResamplerVariant::None,
            experts: Vec::new(),
            ..Self::desk(Vec::new())
        }
    }

    /// Tiny configuration used for end-to-end gradient checks.
    pub fn micro(experts: Vec<ExpertKind>) -> Self {
        Self {
            image_size: 8,
            enc_width: 16,
            enc_layers: 1,
            dec_width: 16,
            dec_layers: 1,
            heads: 2,
            ffn_mult: 2,
            stem_channels: [2, 2, 4, 4, 4],
            latents: 4,
            resampler_layers: 1,
            vocab_size: 8,
            max_seq_len: 6,
            ..Self::desk(experts)
        }
    }

    /// BASE-sized dimensions: 12-layer 768-wide encoder and decoder, a
    /// 4-layer 768-wide resampler with 64 latents, and the six task experts.
    pub fn paper_base() -> Self {
        Self {
            mode: Mode::Prismer,
            image_size: 224,
            enc_width: 768,
            enc_layers: 12,
            dec_width: 768,
            dec_layers: 12,
            heads: 12,
            ffn_mult: 4,
            stem_channels: [96, 192, 384, 768, 768],
            latents: 64,
            resampler_layers: 4,
            resampler: ResamplerVariant::Learned,
            adaptor_ratio: 1.0,
            vocab_size: 50265,
            max_seq_len: 512,
            experts: ExpertKind::TASK_ORDER.to_vec(),
            // 215M + 120M + 89M + 123M + 72M + 35M
            expert_network_params: 654_000_000,
        }
    }

    /// LARGE-sized dimensions: 24 layers, width 1024.
    pub fn paper_large() -> Self {
        Self {
            enc_width: 1024,
            enc_layers: 24,
            dec_width: 1024,
            dec_layers: 24,
            heads: 16,
            stem_channels: [128, 256, 512, 1024, 1024],
            ..Self::paper_base()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size.div_ceil(PATCH_STRIDE)
    }

    pub fn rgb_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Tokens in `z`, i.e. the decoder's cross-attention key count.
    pub fn z_tokens(&self) -> usize {
        match self.mode {
            Mode::Prismer => self.rgb_tokens() + self.latents,
            Mode::PrismerZ => self.rgb_tokens(),
        }
    }

    pub fn adaptor_dim(&self, width: usize) -> usize {
        ((width as f64 * self.adaptor_ratio).round() as usize).max(1)
    }

    /// Named preset, as accepted by `model.preset`.
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "desk" => Ok(Self::desk(vec![
                ExpertKind::Depth,
                ExpertKind::Segmentation,
            ])),
            "desk-z" => Ok(Self::desk_z()),
            "micro" => Ok(Self::micro(vec![ExpertKind::Depth])),
            "base" => Ok(Self::paper_base()),
            "large" => Ok(Self::paper_large()),
            _ => Err(ModelError::Config(format!("unknown model preset {name:?}"))),
        }
    }

    /// Sets one field from a `model.*` or `experts.kinds` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key {
            "model.mode" => self.mode = v.parse()?,
            "model.image_size" => self.image_size = num(key, v)?,
            "model.enc_width" => self.enc_width = num(key, v)?,
            "model.enc_layers" => self.enc_layers = num(key, v)?,
            "model.dec_width" => self.dec_width = num(key, v)?,
            "model.dec_layers" => self.dec_layers = num(key, v)?,
            "model.width" => {
                self.enc_width = num(key, v)?;
                self.dec_width = self.enc_width;
            }
            "model.heads" => self.heads = num(key, v)?,
            "model.ffn_mult" => self.ffn_mult = num(key, v)?,
            "model.stem_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| num(key, p))
                    .collect::<Result<_, _>>()?;
                self.stem_channels = parts.try_into().map_err(|_| {
                    ModelError::Config(format!("{key}: expected 5 comma-separated channels"))
                })?;
            }
            "model.latents" => self.latents = num(key, v)?,
            "model.resampler_layers" => self.resampler_layers = num(key, v)?,
            "model.resampler" => self.resampler = v.parse()?,
            "model.adaptor_ratio" => self.adaptor_ratio = num(key, v)?,
            "model.vocab_size" => self.vocab_size = num(key, v)?,
            "model.max_seq_len" => self.max_seq_len = num(key, v)?,
            "model.expert_network_params" => self.expert_network_params = num(key, v)?,
            "experts.kinds" => self.experts = parse_kinds(v)?,
            _ => return Err(ModelError::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `key=value` pairs that [`ModelConfig::set`] accepts.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let stems: Vec<String> = self.stem_channels.iter().map(|c| c.to_string()).collect();
        let kinds: Vec<&str> = self.experts.iter().map(|k| k.name()).collect();
        [
            ("model.mode", self.mode.name().to_string()),
            ("model.image_size", self.image_size.to_string()),
            ("model.enc_width", self.enc_width.to_string()),
            ("model.enc_layers", self.enc_layers.to_string()),
            ("model.dec_width", self.dec_width.to_string()),
            ("model.dec_layers", self.dec_layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.ffn_mult", self.ffn_mult.to_string()),
            ("model.stem_channels", stems.join(",")),
            ("model.latents", self.latents.to_string()),
            ("model.resampler_layers", self.resampler_layers.to_string()),
            ("model.resampler", self.resampler.name().to_string()),
            ("model.adaptor_ratio", self.adaptor_ratio.to_string()),
            ("model.vocab_size", self.vocab_size.to_string()),
            ("model.max_seq_len", self.max_seq_len.to_string()),
            (
                "model.expert_network_params",
                self.expert_network_params.to_string(),
            ),
            ("experts.kinds", kinds.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || self.enc_width % self.heads != 0 || self.dec_width % self.heads != 0 {
            return err(format!(
                "widths {}/{} not divisible by {} heads",
                self.enc_width, self.dec_width, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_mult == 0 {
            return err("layer counts and ffn multiplier must be positive".into());
        }
        if self.image_size == 0 || self.vocab_size < 2 || self.max_seq_len == 0 {
            return err("image size, vocab and max sequence length must be positive".into());
        }
        if !(self.adaptor_ratio > 0.0) {
            return err(format!(
                "adaptor ratio {} must be positive",
                self.adaptor_ratio
            ));
        }
        if self.stem_channels.contains(&0) {
            return err("stem channels must be positive".into());
        }
        let mut seen = self.experts.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.experts.len() {
            return err("expert kinds must be distinct".into());
        }
        match self.mode {
            Mode::PrismerZ => {
                if self.resampler != ResamplerVariant::None || !self.experts.is_empty() {
                    return err("prismer-z takes no experts and no resampler".into());
                }
            }
            Mode::Prismer => {
                if self.experts.is_empty() {
                    return err("prismer needs at least one expert; use prismer-z".into());
                }
                if self.resampler == ResamplerVariant::None {
                    return err("prismer needs a resampler variant".into());
                }
                if self.latents == 0 {
                    return err("latent count must be positive".into());
                }
                if self.resampler == ResamplerVariant::Learned && self.resampler_layers == 0 {
                    return err("learned resampler needs at least one layer".into());
                }
            }
        }
        Ok(())
    }
}

/// Comma-separated expert kind names; empty or `none` is the empty list.
pub fn parse_kinds(v: &str) -> Result<Vec<ExpertKind>, ModelError> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|k| k.trim().parse::<ExpertKind>().map_err(ModelError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(vec![ExpertKind::Depth])
            .validate()
            .unwrap();
        ModelConfig::desk_z().validate().unwrap();
        ModelConfig::micro(vec![ExpertKind::Depth])
            .validate()
            .unwrap();
        ModelConfig::paper_base().validate().unwrap();
        ModelConfig::paper_large().validate().unwrap();
    }

    #[test]
    fn invalid_combinations() {
        let mut c = ModelConfig::desk_z();
        c.experts = vec![ExpertKind::Depth];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(vec![]);
        assert!(c.validate().is_err());
        c.experts = vec![ExpertKind::Depth];
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::micro(vec![ExpertKind::Depth, ExpertKind::OcrDetection]);
        c.adaptor_ratio = 0.25;
        let mut back = ModelConfig::desk_z();
        for (k, v) in c.to_kv() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(back.set("model.heads", "x").is_err());
        assert!(back.set("model.nope", "1").is_err());
    }

    #[test]
    fn token_counts() {
        assert_eq!(ModelConfig::desk_z().z_tokens(), 16);
        let mut c = ModelConfig::desk(vec![ExpertKind::Depth]);
        c.latents = 64;
        assert_eq!(c.z_tokens(), 16 + 64);
    }
}
