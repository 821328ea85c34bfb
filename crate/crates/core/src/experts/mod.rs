//! Synthetic scenes and the stand-in task experts.
//!
//! Every scene is rendered jointly into an RGB image, one label map per
//! expert kind, a caption and a set of question/answer pairs. Low-level maps
//! (depth, surface normal, edge) are min-max re-normalised to `[−1, 1]`;
//! high-level maps (segmentation, object detection, OCR detection) are
//! rendered at quarter resolution, each site tiled with its label's semantic
//! embedding and projected to 64 channels.

mod labels;
mod pca;
mod scene;
mod text;

pub use labels::{
    corrupt_uniform, high_level_extent, label, make_noise_expert, renormalize, ExpertKind,
    ExpertLabelMap, ExpertPipeline, InstanceEmbeddingTable, SemanticEmbeddingTable,
    HIGH_LEVEL_CHANNELS, HIGH_LEVEL_STRIDE, INSTANCE_SLOTS, SEMANTIC_DIM,
};
pub use pca::{pca_fit, pca_fit_weighted, PcaProjection};
pub use scene::{
    generate_scene, generate_scene_sized, object_count_range, render_rgb, Region, SceneObject,
    SceneSpec, ShapeKind, TextItem, BACKGROUND_CLASS, BACKGROUND_DEPTH, DEFAULT_CANVAS,
};
pub use text::{build_caption_and_qa, caption_text, QaPair, QuestionKind, SceneText};

use crate::seed::mix_seed;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("PCA fit error: {0}")]
    Fit(String),
}

/// Uniform corruption of one expert's map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    pub kind: ExpertKind,
    pub fraction: f64,
}

/// Everything rendered from one scene.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub scene: SceneSpec,
    /// `H×W×3` in `[0, 1]`.
    pub rgb: Tensor,
    pub experts: Vec<ExpertLabelMap>,
    pub text: SceneText,
}

impl SceneRecord {
    pub fn expert(&self, kind: ExpertKind) -> Option<&ExpertLabelMap> {
        self.experts.iter().find(|m| m.kind == kind)
    }
}

impl ExpertPipeline {
    /// Renders a scene with the requested experts. The corruption seed and
    /// the noise-expert seed are derived from `noise_seed` and the scene seed,
    /// so `(scene seed, noise_seed)` fixes every grid.
    pub fn render_record(
        &self,
        scene: SceneSpec,
        kinds: &[ExpertKind],
        corruption: Option<Corruption>,
        noise_seed: u64,
    ) -> Result<SceneRecord, ExpertError> {
        let rgb = render_rgb(&scene);
        let mut experts = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let sub = mix_seed(mix_seed(noise_seed, scene.seed), kind as u64);
            let mut map = match kind {
                ExpertKind::Noise => {
                    make_noise_expert(scene.height, scene.width, kind.channels(), sub)
                }
                _ => self.render(&scene, kind)?,
            };
            if let Some(c) = corruption.filter(|c| c.kind == kind) {
                map = corrupt_uniform(&map, c.fraction, mix_seed(sub, 0xc0))?;
            }
            experts.push(map);
        }
        let text = build_caption_and_qa(&scene);
        Ok(SceneRecord {
            scene,
            rgb,
            experts,
            text,
        })
    }
}
