use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::seed::name_seed;
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to. Freeze policies are
/// expressed over groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// RGB stem, positional embedding and transformer blocks of the encoder.
    VisionBackbone,
    /// Token/position embeddings, self-attention and feed-forward blocks of
    /// the decoder, and the output head.
    LanguageBackbone,
    ExpertStem,
    InstanceEmbedding,
    Resampler,
    Adaptor,
    /// Decoder cross-attention onto `z`.
    CrossAttention,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VisionBackbone => "vision-backbone",
            ParamGroup::LanguageBackbone => "language-backbone",
            ParamGroup::ExpertStem => "expert-stem",
            ParamGroup::InstanceEmbedding => "instance-embedding",
            ParamGroup::Resampler => "resampler",
            ParamGroup::Adaptor => "adaptor",
            ParamGroup::CrossAttention => "cross-attention",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            ParamGroup::VisionBackbone,
            ParamGroup::LanguageBackbone,
            ParamGroup::ExpertStem,
            ParamGroup::InstanceEmbedding,
            ParamGroup::Resampler,
            ParamGroup::Adaptor,
            ParamGroup::CrossAttention,
        ]
        .into_iter()
        .find(|g| g.name() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Handle to a parameter in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name, shape and group of a parameter without its values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Adam first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub frozen: bool,
    /// Whether decoupled weight decay applies (false for biases and norm gains).
    pub decay: bool,
    /// Present exactly for trainable parameters once an optimizer is attached.
    pub moments: Option<AdamMoments>,
}

/// Flat registry of named parameters, partitioned into frozen and trainable.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    /// Adam step counter shared by all trainable parameters.
    pub step: u64,
}

/// How a fresh parameter is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Initial values are a function of
    /// `(seed, name)` only, so models that share parameter names start from
    /// identical values for them.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        group: ParamGroup,
        init: Init,
        seed: u64,
    ) -> Result<ParamId, ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
                Tensor::randn(shape, std, &mut rng)
            }
        };
        let decay = !matches!(init, Init::Ones) && shape.len() > 1;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            group,
            frozen: false,
            decay,
            moments: None,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn total_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> u64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    /// Freezes exactly the parameters whose group satisfies `frozen`, and
    /// resets optimizer state to match the new trainable set.
    pub fn apply_freeze(&mut self, frozen: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.frozen = frozen(p.group);
            p.moments = None;
        }
        self.step = 0;
    }

    /// Creates zeroed Adam moments for every trainable parameter.
    pub fn init_moments(&mut self) {
        for p in &mut self.params {
            p.moments = (!p.frozen).then(|| AdamMoments {
                m: vec![0.0; p.value.numel()],
                v: vec![0.0; p.value.numel()],
            });
        }
    }
}
