use super::Result;
use crate::model::{parameter_inventory, ModelConfig, ParamGroup, ParamSpec};
use crate::train::FreezePolicy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub trainable_params: u64,
    /// Prismer's own parameters plus `expert_network_params`.
    pub total_params: u64,
    pub train_flops: f64,
    pub inference_flops: f64,
}

impl CostEstimate {
    pub fn trainable_share(&self) -> f64 {
        self.trainable_params as f64 / self.total_params as f64
    }
}

/// Lookup tables and additive embeddings: they cost no multiply-adds.
fn is_embedding(p: &ParamSpec) -> bool {
    p.name == "encoder.pos"
        || p.name == "decoder.pos"
        || p.name == "decoder.tok_embed"
        || p.name == "resampler.latents"
        || p.group == ParamGroup::InstanceEmbedding
}

/// Multiply-add parameters on the forward path.
pub fn forward_path_params(specs: &[ParamSpec]) -> u64 {
    specs
        .iter()
        .filter(|p| !is_embedding(p))
        .map(ParamSpec::numel)
        .sum()
}

/// Parameter counts under the pre-training freeze policy, with the
/// 6·N·D (training) and 2·N·D (inference) approximations over
/// `tokens_per_example · examples` tokens. Inference also runs the expert
/// networks.
pub fn estimate_cost(
    config: &ModelConfig,
    tokens_per_example: u64,
    examples: u64,
) -> Result<CostEstimate> {
    let specs = parameter_inventory(config)?;
    let policy = FreezePolicy::FreezeVisionAndLanguage;
    let trainable_params = specs
        .iter()
        .filter(|p| !policy.freezes(p.group))
        .map(ParamSpec::numel)
        .sum();
    let own: u64 = specs.iter().map(ParamSpec::numel).sum();
    let path = forward_path_params(&specs) as f64;
    let tokens = tokens_per_example as f64 * examples as f64;
    Ok(CostEstimate {
        trainable_params,
        total_params: own + config.expert_network_params,
        train_flops: 6.0 * path * tokens,
        inference_flops: 2.0 * (path + config.expert_network_params as f64) * tokens,
    })
}
