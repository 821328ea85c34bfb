use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vocab::{COLORS, SHAPES, SIGN_WORDS};

pub const DEFAULT_CANVAS: usize = 64;
pub const BACKGROUND_DEPTH: f64 = 0.9;
/// Semantic class of the background in every scene.
pub const BACKGROUND_CLASS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
    ];

    pub fn name(self) -> &'static str {
        SHAPES[self as usize]
    }

    /// Semantic class id; 0 is reserved for the background.
    pub fn class_id(self) -> usize {
        self as usize + 1
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.top <= other.bottom
            && other.top <= self.bottom
            && self.left <= other.right
            && other.left <= self.right
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.top + self.bottom) as f64 / 2.0,
            (self.left + self.right) as f64 / 2.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    pub class_id: usize,
    pub instance_id: u32,
    /// In (0, 1); smaller is nearer to the camera.
    pub depth: f64,
    pub region: Region,
}

impl SceneObject {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }

    /// Whether pixel `(y, x)` lies on the object's silhouette.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        if !self.region.contains(y, x) {
            return false;
        }
        let (cy, cx) = self.region.center();
        let r = (self.region.bottom - self.region.top) as f64 / 2.0;
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r + 0.5,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r + 0.5,
            ShapeKind::Triangle => dx.abs() <= (dy + r) / 2.0 + 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextItem {
    pub word: usize,
    pub region: Region,
}

impl TextItem {
    pub fn text(&self) -> &'static str {
        SIGN_WORDS[self.word]
    }
}

/// Ground truth from which the image, every expert label, the caption and
/// the question/answer pairs are rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub text: Option<TextItem>,
    pub background_class: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Objects ordered nearest first.
    pub fn by_depth(&self) -> Vec<&SceneObject> {
        let mut objs: Vec<&SceneObject> = self.objects.iter().collect();
        objs.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        objs
    }

    /// Index of the visible object at a pixel (nearest wins), if any.
    pub fn object_at(&self, y: usize, x: usize) -> Option<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.covers(y, x))
            .min_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
            .map(|(i, _)| i)
    }

    /// Index of the nearest object whose bounding box contains the pixel.
    pub fn box_at(&self, y: usize, x: usize) -> Option<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.region.contains(y, x))
            .min_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
            .map(|(i, _)| i)
    }

    pub fn text_at(&self, y: usize, x: usize) -> Option<usize> {
        self.text
            .as_ref()
            .filter(|t| t.region.contains(y, x))
            .map(|t| t.word)
    }
}

/// Number of objects placed at a given difficulty.
pub fn object_count_range(difficulty: u32) -> (usize, usize) {
    match difficulty {
        0 => (1, 1),
        d => (2, (d as usize + 1).min(4)),
    }
}

/// Deterministic scene for a seed. Difficulty 0 yields exactly one object;
/// higher difficulties add objects (up to four) and an optional sign.
pub fn generate_scene(seed: u64, difficulty: u32) -> SceneSpec {
    generate_scene_sized(seed, difficulty, DEFAULT_CANVAS, DEFAULT_CANVAS)
}

pub fn generate_scene_sized(seed: u64, difficulty: u32, height: usize, width: usize) -> SceneSpec {
    assert!(
        height >= 16 && width >= 16,
        "canvas too small for scene objects"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = object_count_range(difficulty);
    let count = rng.random_range(lo..=hi);

    let mut shapes = ShapeKind::ALL.to_vec();
    shapes.shuffle(&mut rng);
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(&mut rng);
    let mut instance_ids: Vec<u32> = (1..128).collect();
    instance_ids.shuffle(&mut rng);

    // Distinct depths with a minimum gap, so ordering is always strict.
    let mut depth_slots: Vec<usize> = (0..15).collect();
    depth_slots.shuffle(&mut rng);

    let max_half = (height.min(width) / 5).max(4);
    let min_half = (max_half * 3 / 5).max(3);
    let objects = (0..count)
        .map(|i| {
            let half = rng.random_range(min_half..=max_half);
            let top = rng.random_range(0..=height - 2 * half - 1);
            let left = rng.random_range(0..=width - 2 * half - 1);
            let shape = shapes[i];
            SceneObject {
                shape,
                color: colors[i],
                class_id: shape.class_id(),
                instance_id: instance_ids[i],
                depth: 0.1 + 0.05 * depth_slots[i] as f64,
                region: Region {
                    top,
                    left,
                    bottom: top + 2 * half,
                    right: left + 2 * half,
                },
            }
        })
        .collect();

    let text = (difficulty > 0 && rng.random_bool(0.5)).then(|| {
        let h = (height / 10).max(3);
        let w = (width / 4).max(6);
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        TextItem {
            word: rng.random_range(0..SIGN_WORDS.len()),
            region: Region {
                top,
                left,
                bottom: top + h - 1,
                right: left + w - 1,
            },
        }
    });

    SceneSpec {
        height,
        width,
        objects,
        text,
        background_class: BACKGROUND_CLASS,
        seed,
    }
}

const COLOR_RGB: [[f64; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.6, 0.15, 0.75],
    [1.0, 0.55, 0.05],
];
const BACKGROUND_RGB: [f64; 3] = [0.5, 0.5, 0.5];

/// Renders the `H×W×3` RGB image with values in `[0, 1]`.
///
/// Depth is not drawn: nearer objects only show through occlusion.
pub fn render_rgb(scene: &SceneSpec) -> crate::tensor::Tensor {
    let (h, w) = (scene.height, scene.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let rgb = if let Some(word) = scene.text_at(y, x) {
                sign_pixel(scene.text.as_ref().unwrap(), word, y, x)
            } else if let Some(i) = scene.object_at(y, x) {
                COLOR_RGB[scene.objects[i].color]
            } else {
                BACKGROUND_RGB
            };
            data.extend_from_slice(&rgb);
        }
    }
    crate::tensor::Tensor::new(&[h, w, 3], data).expect("rgb shape")
}

/// Signs are white plates with a per-word stripe pattern.
fn sign_pixel(item: &TextItem, word: usize, y: usize, x: usize) -> [f64; 3] {
    let col = x - item.region.left;
    let row = y - item.region.top;
    let period = word + 2;
    if row > 0 && row + 1 < item.region.bottom - item.region.top + 1 && col % period == 0 {
        [0.05, 0.05, 0.05]
    } else {
        [0.97, 0.97, 0.97]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(42, 2), generate_scene(42, 2));
        assert_ne!(generate_scene(42, 2), generate_scene(43, 2));
    }

    #[test]
    fn difficulty_zero_has_one_object() {
        for seed in 0..50 {
            let s = generate_scene(seed, 0);
            assert_eq!(s.objects.len(), 1);
            assert!(s.text.is_none());
        }
    }

    #[test]
    fn thousand_seeds_have_unique_instances_and_valid_regions() {
        for seed in 0..1000 {
            let s = generate_scene(seed, 3);
            let ids: HashSet<u32> = s.objects.iter().map(|o| o.instance_id).collect();
            assert_eq!(ids.len(), s.objects.len(), "seed {seed}");
            let depths: HashSet<u64> = s.objects.iter().map(|o| o.depth.to_bits()).collect();
            assert_eq!(depths.len(), s.objects.len());
            for o in &s.objects {
                assert!(o.region.bottom < s.height && o.region.right < s.width);
                assert!(o.depth > 0.0 && o.depth < 1.0);
            }
        }
    }
}
