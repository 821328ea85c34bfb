use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::pca::{pca_fit_weighted, PcaProjection};
use super::scene::{generate_scene, SceneSpec, ShapeKind};
use super::ExpertError;
use crate::seed::mix_seed;
use crate::tensor::Tensor;

/// Channel count of high-level maps after projection.
pub const HIGH_LEVEL_CHANNELS: usize = 64;
/// Dimension of the semantic label embeddings before projection.
pub const SEMANTIC_DIM: usize = 256;
pub const INSTANCE_SLOTS: usize = 128;
/// High-level maps are rendered at `1 / HIGH_LEVEL_STRIDE` resolution.
pub const HIGH_LEVEL_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpertKind {
    Depth,
    Normal,
    Edge,
    Segmentation,
    ObjectDetection,
    OcrDetection,
    /// Scene-independent Uniform(−1, 1) output; an uninformative expert.
    Noise,
}

impl ExpertKind {
    /// The six task experts, in the order used by expert-count sweeps.
    pub const TASK_ORDER: [ExpertKind; 6] = [
        ExpertKind::Depth,
        ExpertKind::Segmentation,
        ExpertKind::ObjectDetection,
        ExpertKind::Normal,
        ExpertKind::Edge,
        ExpertKind::OcrDetection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Depth => "depth",
            ExpertKind::Normal => "normal",
            ExpertKind::Edge => "edge",
            ExpertKind::Segmentation => "segmentation",
            ExpertKind::ObjectDetection => "object-detection",
            ExpertKind::OcrDetection => "ocr-detection",
            ExpertKind::Noise => "noise",
        }
    }

    pub fn is_low_level(self) -> bool {
        matches!(
            self,
            ExpertKind::Depth | ExpertKind::Normal | ExpertKind::Edge | ExpertKind::Noise
        )
    }

    pub fn channels(self) -> usize {
        match self {
            ExpertKind::Depth | ExpertKind::Edge | ExpertKind::Noise => 1,
            ExpertKind::Normal => 3,
            _ => HIGH_LEVEL_CHANNELS,
        }
    }

    /// Spatial downsampling of the map relative to the RGB image.
    pub fn spatial_stride(self) -> usize {
        if self.is_low_level() {
            1
        } else {
            HIGH_LEVEL_STRIDE
        }
    }

    /// Whether object pixels carry instance ids.
    pub fn has_instances(self) -> bool {
        matches!(self, ExpertKind::Segmentation | ExpertKind::ObjectDetection)
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpertKind {
    type Err = ExpertError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = ExpertKind::TASK_ORDER
            .iter()
            .chain(std::iter::once(&ExpertKind::Noise));
        all.copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| ExpertError::Config(format!("unknown expert kind {s:?}")))
    }
}

/// One expert's post-processed output: an `H'×W'×C` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLabelMap {
    pub kind: ExpertKind,
    /// Shape `[H', W', C]`.
    pub grid: Tensor,
    /// Per-site instance id for object-bearing sites of high-level maps.
    pub instances: Option<Vec<Option<u32>>>,
}

impl ExpertLabelMap {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn sites(&self) -> usize {
        self.height() * self.width()
    }

    /// Instance slot for every site (`id mod 128`), `None` off-object.
    pub fn instance_slots(&self) -> Option<Vec<Option<usize>>> {
        self.instances.as_ref().map(|ids| {
            ids.iter()
                .map(|id| id.map(|i| i as usize % INSTANCE_SLOTS))
                .collect()
        })
    }

    /// The grid with instance embeddings added at object sites.
    pub fn with_instances(&self, table: &InstanceEmbeddingTable) -> Tensor {
        let mut grid = self.grid.clone();
        if let Some(slots) = self.instance_slots() {
            let c = self.channels();
            for (site, slot) in slots.iter().enumerate() {
                if let Some(s) = slot {
                    let emb = table.lookup(*s as u32);
                    for (g, e) in grid.data_mut()[site * c..(site + 1) * c]
                        .iter_mut()
                        .zip(emb)
                    {
                        *g += e;
                    }
                }
            }
        }
        grid
    }
}

/// Seeded unit vectors standing in for text-model label embeddings.
#[derive(Clone, Debug)]
pub struct SemanticEmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// Semantic label ids: background, the shape classes, "no text" and the sign words.
pub mod label {
    use super::ShapeKind;

    pub const BACKGROUND: usize = 0;
    pub fn shape(s: ShapeKind) -> usize {
        s.class_id()
    }
    pub const NO_TEXT: usize = 5;
    pub fn sign(word: usize) -> usize {
        6 + word
    }
    pub const COUNT: usize = 10;
}

impl SemanticEmbeddingTable {
    pub fn new(dim: usize, seed: u64) -> Self {
        let vectors = (0..label::COUNT)
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id as u64));
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Self { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }
}

/// Fixed-size table of per-instance vectors added to high-level maps.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEmbeddingTable {
    /// `128 × 64`.
    pub table: Tensor,
}

impl InstanceEmbeddingTable {
    pub fn new(std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            table: Tensor::randn(&[INSTANCE_SLOTS, HIGH_LEVEL_CHANNELS], std, &mut rng),
        }
    }

    pub fn lookup(&self, instance_id: u32) -> &[f64] {
        self.table.row(instance_id as usize % INSTANCE_SLOTS)
    }
}

/// Renders scene-grounded stand-ins for each task expert and applies the
/// per-kind post-processing.
#[derive(Clone, Debug)]
pub struct ExpertPipeline {
    pub semantic: SemanticEmbeddingTable,
    pub pca: PcaProjection,
    /// Projected embedding per semantic label id.
    projected: Vec<Vec<f64>>,
}

const PIPELINE_SEED: u64 = 0x5eed_0f_1abe1;
const REFERENCE_SCENES: u64 = 64;

impl ExpertPipeline {
    /// Builds the embedding table and fits the projection on label
    /// frequencies from a fixed reference set of scenes.
    pub fn new() -> Self {
        let semantic = SemanticEmbeddingTable::new(SEMANTIC_DIM, PIPELINE_SEED);
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for seed in 0..REFERENCE_SCENES {
            let scene = generate_scene(mix_seed(PIPELINE_SEED, seed), 3);
            for kind in [
                ExpertKind::Segmentation,
                ExpertKind::ObjectDetection,
                ExpertKind::OcrDetection,
            ] {
                for (id, _) in label_sites(&scene, kind) {
                    *counts.entry(id).or_default() += 1.0;
                }
            }
        }
        // every label appears at least once so none projects to an unseen direction
        for id in 0..label::COUNT {
            counts.entry(id).or_insert(1.0);
        }
        let weighted: Vec<(&[f64], f64)> = counts
            .iter()
            .map(|(&id, &w)| (semantic.get(id), w))
            .collect();
        let pca =
            pca_fit_weighted(&weighted, HIGH_LEVEL_CHANNELS).expect("reference label set is valid");
        let projected = (0..label::COUNT)
            .map(|id| pca.project(semantic.get(id)).expect("dims"))
            .collect();
        Self {
            semantic,
            pca,
            projected,
        }
    }

    pub fn projected_label(&self, id: usize) -> &[f64] {
        &self.projected[id]
    }

    pub fn render(
        &self,
        scene: &SceneSpec,
        kind: ExpertKind,
    ) -> Result<ExpertLabelMap, ExpertError> {
        match kind {
            ExpertKind::Depth => Ok(low_level(kind, 1, scene, |s, y, x, out| {
                out[0] = s
                    .object_at(y, x)
                    .map_or(super::scene::BACKGROUND_DEPTH, |i| s.objects[i].depth);
            })),
            ExpertKind::Normal => Ok(low_level(kind, 3, scene, |s, y, x, out| {
                out.copy_from_slice(&surface_normal(s, y, x));
            })),
            ExpertKind::Edge => Ok(low_level(kind, 1, scene, |s, y, x, out| {
                let here = s.object_at(y, x);
                let mut edge = false;
                if y > 0 {
                    edge |= s.object_at(y - 1, x) != here;
                }
                if x > 0 {
                    edge |= s.object_at(y, x - 1) != here;
                }
                if y + 1 < s.height {
                    edge |= s.object_at(y + 1, x) != here;
                }
                if x + 1 < s.width {
                    edge |= s.object_at(y, x + 1) != here;
                }
                out[0] = if edge { 1.0 } else { 0.0 };
            })),
            ExpertKind::Segmentation | ExpertKind::ObjectDetection | ExpertKind::OcrDetection => {
                Ok(self.high_level(scene, kind))
            }
            ExpertKind::Noise => Err(ExpertError::Config(
                "the noise expert has no scene rendering; use make_noise_expert".into(),
            )),
        }
    }

    fn high_level(&self, scene: &SceneSpec, kind: ExpertKind) -> ExpertLabelMap {
        let (h, w) = high_level_extent(scene.height, scene.width);
        let sites = label_sites(scene, kind);
        let mut data = Vec::with_capacity(h * w * HIGH_LEVEL_CHANNELS);
        for (id, _) in &sites {
            data.extend_from_slice(self.projected_label(*id));
        }
        let instances = kind
            .has_instances()
            .then(|| sites.iter().map(|(_, inst)| *inst).collect());
        ExpertLabelMap {
            kind,
            grid: Tensor::new(&[h, w, HIGH_LEVEL_CHANNELS], data).expect("high-level shape"),
            instances,
        }
    }
}

impl Default for ExpertPipeline {
    fn default() -> Self {
        Self::new()
    }
}

/// `⌈H/4⌉ × ⌈W/4⌉`.
pub fn high_level_extent(height: usize, width: usize) -> (usize, usize) {
    (
        height.div_ceil(HIGH_LEVEL_STRIDE),
        width.div_ceil(HIGH_LEVEL_STRIDE),
    )
}

/// Semantic label id and instance id at every site of the downsampled grid.
/// Each site takes the label of the pixel nearest its block centre.
fn label_sites(scene: &SceneSpec, kind: ExpertKind) -> Vec<(usize, Option<u32>)> {
    let (h, w) = high_level_extent(scene.height, scene.width);
    let mut out = Vec::with_capacity(h * w);
    for sy in 0..h {
        for sx in 0..w {
            let y = (sy * HIGH_LEVEL_STRIDE + HIGH_LEVEL_STRIDE / 2).min(scene.height - 1);
            let x = (sx * HIGH_LEVEL_STRIDE + HIGH_LEVEL_STRIDE / 2).min(scene.width - 1);
            let entry = match kind {
                ExpertKind::Segmentation => match scene.object_at(y, x) {
                    Some(i) => (
                        label::shape(scene.objects[i].shape),
                        Some(scene.objects[i].instance_id),
                    ),
                    None => (label::BACKGROUND, None),
                },
                ExpertKind::ObjectDetection => match scene.box_at(y, x) {
                    Some(i) => (
                        label::shape(scene.objects[i].shape),
                        Some(scene.objects[i].instance_id),
                    ),
                    None => (label::BACKGROUND, None),
                },
                ExpertKind::OcrDetection => match scene.text_at(y, x) {
                    Some(word) => (label::sign(word), None),
                    None => (label::NO_TEXT, None),
                },
                _ => unreachable!("low-level kinds have no label sites"),
            };
            out.push(entry);
        }
    }
    out
}

fn low_level(
    kind: ExpertKind,
    channels: usize,
    scene: &SceneSpec,
    pixel: impl Fn(&SceneSpec, usize, usize, &mut [f64]),
) -> ExpertLabelMap {
    let (h, w) = (scene.height, scene.width);
    let mut data = vec![0.0; h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let at = (y * w + x) * channels;
            pixel(scene, y, x, &mut data[at..at + channels]);
        }
    }
    renormalize(&mut data);
    ExpertLabelMap {
        kind,
        grid: Tensor::new(&[h, w, channels], data).expect("low-level shape"),
        instances: None,
    }
}

/// Min-max maps values onto `[−1, 1]`; a constant map becomes all zeros.
pub fn renormalize(data: &mut [f64]) {
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        data.fill(0.0);
        return;
    }
    let span = max - min;
    for v in data.iter_mut() {
        *v = (2.0 * (*v - min) / span - 1.0).clamp(-1.0, 1.0);
    }
}

fn surface_normal(scene: &SceneSpec, y: usize, x: usize) -> [f64; 3] {
    let Some(i) = scene.object_at(y, x) else {
        return [0.0, 0.0, 1.0];
    };
    let o = &scene.objects[i];
    let (cy, cx) = o.region.center();
    let r = ((o.region.bottom - o.region.top) as f64 / 2.0).max(1.0);
    let dy = (y as f64 - cy) / r;
    let dx = (x as f64 - cx) / r;
    match o.shape {
        ShapeKind::Circle => {
            let (dx, dy) = (dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0));
            let z = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
            let n = (dx * dx + dy * dy + z * z).sqrt().max(1e-12);
            [dx / n, dy / n, z / n]
        }
        ShapeKind::Diamond => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            [0.5 * dx.signum() * s, 0.5 * dy.signum() * s, s]
        }
        ShapeKind::Square | ShapeKind::Triangle => [0.0, 0.0, 1.0],
    }
}

/// Replaces exactly `round(p · sites)` sites, chosen without replacement,
/// with i.i.d. Uniform(−1, 1) values across all channels.
pub fn corrupt_uniform(
    map: &ExpertLabelMap,
    fraction: f64,
    seed: u64,
) -> Result<ExpertLabelMap, ExpertError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ExpertError::Range(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let mut out = map.clone();
    let sites = map.sites();
    let count = (fraction * sites as f64).round() as usize;
    if count == 0 {
        return Ok(out);
    }
    let c = map.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, sites, count).into_vec();
    chosen.sort_unstable();
    let data = out.grid.data_mut();
    for site in chosen {
        for v in &mut data[site * c..(site + 1) * c] {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    Ok(out)
}

/// Pure Uniform(−1, 1) map with no dependence on any scene.
pub fn make_noise_expert(
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> ExpertLabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ExpertLabelMap {
        kind: ExpertKind::Noise,
        grid: Tensor::uniform(&[height, width, channels], -1.0, 1.0, &mut rng),
        instances: None,
    }
}
