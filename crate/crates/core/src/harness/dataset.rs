use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::experts::{
    generate_scene, Corruption, ExpertKind, ExpertLabelMap, ExpertPipeline, QaPair, QuestionKind,
};
use crate::infer::CAPTION_PROMPT;
use crate::model::{parse_kinds, TokenSequence};
use crate::seed::mix_seed;
use crate::tensor::Tensor;
use crate::train::Example;
use crate::vocab::Vocab;

pub const DATASET_MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "prismer-dataset-1";

const QUESTION_KINDS: [QuestionKind; 7] = [
    QuestionKind::ColorOfShape,
    QuestionKind::ShapeOfColor,
    QuestionKind::NearestShape,
    QuestionKind::NearestColor,
    QuestionKind::FarthestShape,
    QuestionKind::Count,
    QuestionKind::SignText,
];

/// What to render: scene `i` uses seed `mix_seed(seed, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub difficulty: u32,
    pub seed: u64,
    pub experts: Vec<ExpertKind>,
    pub corruption: Option<Corruption>,
    /// Seeds the noise expert and the corruption draws.
    pub noise_seed: u64,
}

impl DatasetSpec {
    pub fn scene_seed(&self, i: usize) -> u64 {
        mix_seed(self.seed, i as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(HarnessError::Config(
                "dataset needs at least one scene".into(),
            ));
        }
        if let Some(c) = self.corruption {
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(HarnessError::Config(format!(
                    "corruption fraction {} outside [0, 1]",
                    c.fraction
                )));
            }
            if !self.experts.contains(&c.kind) {
                return Err(HarnessError::Config(format!(
                    "corrupted expert {} is not enabled",
                    c.kind
                )));
            }
        }
        Ok(())
    }
}

/// One rendered scene as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DataItem {
    pub seed: u64,
    pub rgb: Tensor,
    pub experts: Vec<ExpertLabelMap>,
    pub caption: Vec<usize>,
    pub qa: Vec<QaPair>,
}

impl DataItem {
    pub fn qa_example(&self) -> Result<Example> {
        let n = Vocab::get().len();
        let seqs = self
            .qa
            .iter()
            .map(|q| TokenSequence::prompted(&q.question, &q.answer, n))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Example {
            rgb: self.rgb.clone(),
            experts: self.experts.clone(),
            seqs,
        })
    }

    pub fn caption_example(&self) -> Result<Example> {
        let vocab = Vocab::get();
        let prompt = vocab.encode(CAPTION_PROMPT).map_err(HarnessError::Config)?;
        let seq = TokenSequence::prompted(&prompt, &self.caption, vocab.len())?;
        Ok(Example {
            rgb: self.rgb.clone(),
            experts: self.experts.clone(),
            seqs: vec![seq],
        })
    }
}

pub fn build_items(spec: &DatasetSpec, pipe: &ExpertPipeline) -> Result<Vec<DataItem>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let scene = generate_scene(spec.scene_seed(i), spec.difficulty);
            let seed = scene.seed;
            let rec = pipe.render_record(scene, &spec.experts, spec.corruption, spec.noise_seed)?;
            Ok(DataItem {
                seed,
                rgb: rec.rgb,
                experts: rec.experts,
                caption: rec.text.caption,
                qa: rec.text.qa,
            })
        })
        .collect()
}

/// SHA-256 over the expert-independent content (image, caption, QA), used
/// to confirm that paired arms see the same scenes.
pub fn content_hash(items: &[DataItem]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.rgb.to_pten_bytes());
        let qa = it
            .qa
            .iter()
            .flat_map(|q| q.question.iter().copied().chain(q.candidates().concat()));
        for t in it.caption.iter().copied().chain(qa) {
            h.update((t as u32).to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn ids_tensor(rows: &[Vec<usize>]) -> Tensor {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut data = vec![-1.0; rows.len().max(1) * width];
    for (r, row) in rows.iter().enumerate() {
        for (c, &t) in row.iter().enumerate() {
            data[r * width + c] = t as f64;
        }
    }
    Tensor::new(&[rows.len().max(1), width], data).expect("id table shape")
}

fn tensor_ids(t: &Tensor) -> Result<Vec<Vec<usize>>> {
    let (rows, width) = t.dims2()?;
    Ok((0..rows)
        .map(|r| {
            t.data()[r * width..(r + 1) * width]
                .iter()
                .take_while(|&&v| v >= 0.0)
                .map(|&v| v as usize)
                .collect()
        })
        .collect())
}

fn write_pten(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    t.write_pten(&mut w)?;
    Ok(())
}

fn read_pten(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Ok(Tensor::read_pten(&mut bytes.as_slice())?)
}

fn scene_dir(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Renders the dataset into `dir`: `manifest.txt` plus one directory per
/// scene holding `rgb.pten`, `expert_<kind>.pten`, `instances_<kind>.pten`
/// (site instance ids, −1 off-object), `caption.pten`, `qa_questions.pten`,
/// `qa_candidates.pten` (answer first) and `qa_kinds.pten`. Token tables
/// are padded with −1.
pub fn write_dataset(
    spec: &DatasetSpec,
    pipe: &ExpertPipeline,
    dir: &Path,
) -> Result<Vec<DataItem>> {
    let items = build_items(spec, pipe)?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let kinds: Vec<&str> = spec.experts.iter().map(|k| k.name()).collect();
    let (ckind, cfrac) = spec
        .corruption
        .map_or(("none", 0.0), |c| (c.kind.name(), c.fraction));
    let _ = writeln!(manifest, "format={FORMAT}");
    let _ = writeln!(manifest, "count={}", spec.count);
    let _ = writeln!(manifest, "seed={}", spec.seed);
    let _ = writeln!(manifest, "difficulty={}", spec.difficulty);
    let _ = writeln!(manifest, "experts={}", kinds.join(","));
    let _ = writeln!(manifest, "corruption={ckind}");
    let _ = writeln!(manifest, "corruption_fraction={cfrac}");
    let _ = writeln!(manifest, "noise_seed={}", spec.noise_seed);
    for (i, it) in items.iter().enumerate() {
        let _ = writeln!(manifest, "scene.{i:05}={}", it.seed);
        let d = dir.join(scene_dir(i));
        fs::create_dir_all(&d)?;
        write_pten(&d.join("rgb.pten"), &it.rgb)?;
        for m in &it.experts {
            write_pten(&d.join(format!("expert_{}.pten", m.kind.name())), &m.grid)?;
            if let Some(ids) = &m.instances {
                let data = ids.iter().map(|id| id.map_or(-1.0, |v| v as f64)).collect();
                write_pten(
                    &d.join(format!("instances_{}.pten", m.kind.name())),
                    &Tensor::new(&[m.height(), m.width()], data)?,
                )?;
            }
        }
        write_pten(
            &d.join("caption.pten"),
            &ids_tensor(std::slice::from_ref(&it.caption)),
        )?;
        let questions: Vec<Vec<usize>> = it.qa.iter().map(|q| q.question.clone()).collect();
        write_pten(&d.join("qa_questions.pten"), &ids_tensor(&questions))?;
        let cands: Vec<Vec<usize>> = it.qa.iter().flat_map(|q| q.candidates()).collect();
        let flat = ids_tensor(&cands);
        let width = flat.shape()[1];
        write_pten(
            &d.join("qa_candidates.pten"),
            &flat.reshape(&[it.qa.len(), 4, width])?,
        )?;
        let kinds = it
            .qa
            .iter()
            .map(|q| QUESTION_KINDS.iter().position(|k| *k == q.kind).unwrap() as f64)
            .collect();
        write_pten(
            &d.join("qa_kinds.pten"),
            &Tensor::new(&[it.qa.len()], kinds)?,
        )?;
    }
    fs::write(dir.join(DATASET_MANIFEST), manifest)?;
    Ok(items)
}

/// Parses a dataset manifest back into the spec that produced it.
pub fn read_manifest(dir: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(dir.join(DATASET_MANIFEST))?;
    let kv = super::config::parse_kv(&text)?;
    let get = |k: &str| {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| HarnessError::Config(format!("dataset manifest lacks {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| HarnessError::Config(format!("dataset manifest: bad {k}")))
    };
    if get("format")? != FORMAT {
        return Err(HarnessError::Config("not a dataset manifest".into()));
    }
    let experts = parse_kinds(get("experts")?)?;
    let corruption = match get("corruption")? {
        "none" => None,
        k => Some(Corruption {
            kind: k.parse()?,
            fraction: get("corruption_fraction")?.parse().map_err(|_| {
                HarnessError::Config("dataset manifest: bad corruption_fraction".into())
            })?,
        }),
    };
    Ok(DatasetSpec {
        count: num("count")? as usize,
        difficulty: num("difficulty")? as u32,
        seed: num("seed")?,
        experts,
        corruption,
        noise_seed: num("noise_seed")?,
    })
}

/// Loads every record written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<DataItem>)> {
    let spec = read_manifest(dir)?;
    let mut items = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let d = dir.join(scene_dir(i));
        let rgb = read_pten(&d.join("rgb.pten"))?;
        let mut experts = Vec::with_capacity(spec.experts.len());
        for &kind in &spec.experts {
            let grid = read_pten(&d.join(format!("expert_{}.pten", kind.name())))?;
            let instances = if kind.has_instances() {
                let t = read_pten(&d.join(format!("instances_{}.pten", kind.name())))?;
                Some(
                    t.data()
                        .iter()
                        .map(|&v| (v >= 0.0).then_some(v as u32))
                        .collect(),
                )
            } else {
                None
            };
            experts.push(ExpertLabelMap {
                kind,
                grid,
                instances,
            });
        }
        let caption = tensor_ids(&read_pten(&d.join("caption.pten"))?)?.remove(0);
        let questions = tensor_ids(&read_pten(&d.join("qa_questions.pten"))?)?;
        let cand = read_pten(&d.join("qa_candidates.pten"))?;
        let (n, width) = (cand.shape()[0], cand.shape()[2]);
        let cands = tensor_ids(&cand.reshape(&[n * 4, width])?)?;
        let kinds = read_pten(&d.join("qa_kinds.pten"))?;
        let qa = questions
            .into_iter()
            .enumerate()
            .map(|(q, question)| {
                let kind = QUESTION_KINDS
                    .get(kinds.data()[q] as usize)
                    .copied()
                    .ok_or_else(|| {
                        HarnessError::Config(format!("bad question kind in {}", d.display()))
                    })?;
                Ok(QaPair {
                    kind,
                    question,
                    answer: cands[q * 4].clone(),
                    distractors: cands[q * 4 + 1..q * 4 + 4].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        items.push(DataItem {
            seed: spec.scene_seed(i),
            rgb,
            experts,
            caption,
            qa,
        });
    }
    Ok((spec, items))
}
