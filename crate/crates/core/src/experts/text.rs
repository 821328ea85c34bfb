use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{SceneObject, SceneSpec};
use crate::seed::mix_seed;
use crate::vocab::{Vocab, COLORS, NUMBERS, SHAPES, SIGN_WORDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionKind {
    ColorOfShape,
    ShapeOfColor,
    NearestShape,
    NearestColor,
    FarthestShape,
    Count,
    SignText,
}

impl QuestionKind {
    /// Questions whose answer depends on depth ordering, which the RGB
    /// image only reveals through occlusion.
    pub fn needs_depth(self) -> bool {
        matches!(
            self,
            QuestionKind::NearestShape | QuestionKind::NearestColor | QuestionKind::FarthestShape
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub kind: QuestionKind,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    /// Three wrong answers of the same category, all distinct.
    pub distractors: Vec<Vec<usize>>,
}

impl QaPair {
    /// Answer followed by distractors; the answer sits at index 0.
    pub fn candidates(&self) -> Vec<Vec<usize>> {
        std::iter::once(self.answer.clone())
            .chain(self.distractors.iter().cloned())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneText {
    pub caption: Vec<usize>,
    pub qa: Vec<QaPair>,
}

fn words(text: &str) -> Vec<usize> {
    Vocab::get()
        .encode(text)
        .expect("template words are in the vocabulary")
}

/// Objects as read left to right.
fn reading_order(scene: &SceneSpec) -> Vec<&SceneObject> {
    let mut objs: Vec<&SceneObject> = scene.objects.iter().collect();
    objs.sort_by(|a, b| {
        let (ay, ax) = a.region.center();
        let (by, bx) = b.region.center();
        ax.total_cmp(&bx).then(ay.total_cmp(&by))
    });
    objs
}

pub fn caption_text(scene: &SceneSpec) -> String {
    let parts: Vec<String> = reading_order(scene)
        .iter()
        .map(|o| format!("a {} {}", o.color_name(), o.shape.name()))
        .collect();
    format!("{} on a gray background", parts.join(" and "))
}

/// Caption plus every question the scene answers unambiguously.
pub fn build_caption_and_qa(scene: &SceneSpec) -> SceneText {
    let caption = words(&caption_text(scene));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, 0x9a));
    let mut qa = Vec::new();
    let mut push = |kind: QuestionKind, question: String, answer: &str, pool: &[&str]| {
        let mut others: Vec<&str> = pool.iter().copied().filter(|w| *w != answer).collect();
        others.shuffle(&mut rng);
        qa.push(QaPair {
            kind,
            question: words(&question),
            answer: words(answer),
            distractors: others.iter().take(3).map(|w| words(w)).collect(),
        });
    };

    for o in &scene.objects {
        push(
            QuestionKind::ColorOfShape,
            format!("what color is the {}", o.shape.name()),
            o.color_name(),
            &COLORS,
        );
        push(
            QuestionKind::ShapeOfColor,
            format!("what shape is the {} object", o.color_name()),
            o.shape.name(),
            &SHAPES,
        );
    }
    let ordered = scene.by_depth();
    if ordered.len() >= 2 {
        let near = ordered[0];
        let far = ordered[ordered.len() - 1];
        push(
            QuestionKind::NearestShape,
            "what shape is the nearest object".into(),
            near.shape.name(),
            &SHAPES,
        );
        push(
            QuestionKind::NearestColor,
            "what color is the nearest object".into(),
            near.color_name(),
            &COLORS,
        );
        push(
            QuestionKind::FarthestShape,
            "what shape is the farthest object".into(),
            far.shape.name(),
            &SHAPES,
        );
    }
    push(
        QuestionKind::Count,
        "how many objects are there".into(),
        NUMBERS[scene.objects.len() - 1],
        &NUMBERS,
    );
    if let Some(t) = &scene.text {
        push(
            QuestionKind::SignText,
            "what does the sign say".into(),
            t.text(),
            &SIGN_WORDS,
        );
    }
    SceneText { caption, qa }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::scene::{generate_scene, Region, ShapeKind};

    fn one_red_square() -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            objects: vec![SceneObject {
                shape: ShapeKind::Square,
                color: 0,
                class_id: ShapeKind::Square.class_id(),
                instance_id: 7,
                depth: 0.3,
                region: Region {
                    top: 10,
                    left: 10,
                    bottom: 30,
                    right: 30,
                },
            }],
            text: None,
            background_class: 0,
            seed: 1,
        }
    }

    #[test]
    fn single_square_caption_and_color_question() {
        let scene = one_red_square();
        let out = build_caption_and_qa(&scene);
        let v = Vocab::get();
        assert_eq!(v.decode(&out.caption), "a red square on a gray background");
        let q = out
            .qa
            .iter()
            .find(|q| v.decode(&q.question) == "what color is the square")
            .unwrap();
        assert_eq!(v.decode(&q.answer), "red");
        assert_eq!(q.distractors.len(), 3);
        let mut all: Vec<&Vec<usize>> = q.distractors.iter().collect();
        all.push(&q.answer);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn deterministic_per_scene() {
        let s = generate_scene(9, 3);
        assert_eq!(build_caption_and_qa(&s), build_caption_and_qa(&s));
    }
}
