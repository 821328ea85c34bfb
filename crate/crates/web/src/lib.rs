//! Browser bindings for the demo page. Everything here also builds natively,
//! which is how the tests exercise it.

use prismer::experts::{generate_scene, Corruption, ExpertKind, ExpertLabelMap, ExpertPipeline};
use prismer::train::{lr_at, TrainConfig};
use prismer::vocab::Vocab;
use wasm_bindgen::prelude::*;

const NOISE_SEED: u64 = 7;

thread_local! {
    static PIPE: ExpertPipeline = ExpertPipeline::new();
}

/// Comma-separated expert names, task experts first.
#[wasm_bindgen]
pub fn expert_kinds() -> String {
    let mut names: Vec<&str> = ExpertKind::TASK_ORDER.iter().map(|k| k.name()).collect();
    names.push(ExpertKind::Noise.name());
    names.join(",")
}

/// RGB image of scene `seed` as RGBA bytes, row-major.
#[wasm_bindgen]
pub fn scene_rgba(seed: u32, difficulty: u32) -> Vec<u8> {
    let rec = PIPE
        .with(|p| {
            p.render_record(
                generate_scene(seed as u64, difficulty),
                &[],
                None,
                NOISE_SEED,
            )
        })
        .expect("rgb rendering has no failure modes");
    let px = rec.rgb.data();
    px.chunks(3)
        .flat_map(|c| [byte(c[0]), byte(c[1]), byte(c[2]), 255])
        .collect()
}

#[wasm_bindgen]
pub fn scene_caption(seed: u32, difficulty: u32) -> String {
    let scene = generate_scene(seed as u64, difficulty);
    let text = prismer::experts::build_caption_and_qa(&scene);
    Vocab::get().decode(&text.caption)
}

/// Side length of the grid `expert_rgba` returns for `kind`.
#[wasm_bindgen]
pub fn expert_side(kind: &str) -> Result<u32, String> {
    Ok(render(0, 0, kind, 0.0)?.height() as u32)
}

/// One expert map as RGBA bytes, with a fraction of its sites replaced by
/// uniform noise. Low-level maps show their first three channels (or grey
/// for one channel) mapped from [−1, 1]; high-level maps show their first
/// three principal components, each stretched to its own range.
#[wasm_bindgen]
pub fn expert_rgba(
    seed: u32,
    difficulty: u32,
    kind: &str,
    corruption: f64,
) -> Result<Vec<u8>, String> {
    let map = render(seed, difficulty, kind, corruption)?;
    let c = map.channels();
    let g = map.grid.data();
    let stretch: Vec<(f64, f64)> = (0..c.min(3))
        .map(|ch| {
            if map.kind.is_low_level() {
                return (-1.0, 1.0);
            }
            let vals = g.iter().skip(ch).step_by(c);
            let lo = vals.clone().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi } else { lo + 1.0 })
        })
        .collect();
    Ok(g.chunks(c)
        .flat_map(|site| {
            let v = |ch: usize| {
                let ch = ch.min(c - 1);
                let (lo, hi) = stretch[ch];
                byte((site[ch] - lo) / (hi - lo))
            };
            [v(0), v(1), v(2), 255]
        })
        .collect())
}

/// Learning rate at every step `0..=total` of the warmup + cosine schedule.
#[wasm_bindgen]
pub fn lr_curve(peak: f64, warmup: u32, total: u32) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        peak_lr: peak,
        warmup_steps: warmup as u64,
        total_steps: total as u64,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    (0..=total as u64)
        .map(|s| lr_at(s, &cfg).map_err(|e| e.to_string()))
        .collect()
}

fn render(
    seed: u32,
    difficulty: u32,
    kind: &str,
    corruption: f64,
) -> Result<ExpertLabelMap, String> {
    let kind: ExpertKind = kind
        .parse()
        .map_err(|e: prismer::experts::ExpertError| e.to_string())?;
    let corruption = (corruption > 0.0).then_some(Corruption {
        kind,
        fraction: corruption,
    });
    let rec = PIPE
        .with(|p| {
            p.render_record(
                generate_scene(seed as u64, difficulty),
                &[kind],
                corruption,
                NOISE_SEED,
            )
        })
        .map_err(|e| e.to_string())?;
    Ok(rec
        .experts
        .into_iter()
        .next()
        .expect("one expert requested"))
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
