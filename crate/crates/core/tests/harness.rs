use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use prismer::experts::{generate_scene, ExpertKind, ExpertPipeline};
use prismer::harness::dataset::{build_items, read_dataset, write_dataset, DatasetSpec};
use prismer::harness::plan::qa_accuracy;
use prismer::harness::*;
use prismer::infer::{candidate_score, encode, Scorer};
use prismer::model::{ModelConfig, Prismer};
use prismer::train::{partition_parameters, FreezePolicy};
use prismer::vocab::BOS;

fn spec(count: usize, difficulty: u32) -> DatasetSpec {
    DatasetSpec {
        count,
        difficulty,
        seed: 42,
        experts: vec![ExpertKind::Depth, ExpertKind::Segmentation],
        corruption: None,
        noise_seed: 7,
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn single_scene_dataset() {
    let s = spec(1, 0);
    let dir = tempfile::tempdir().unwrap();
    let items = write_dataset(&s, &ExpertPipeline::new(), dir.path()).unwrap();
    assert_eq!(items.len(), 1);
    assert_eq!(generate_scene(s.scene_seed(0), 0).objects.len(), 1);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("format=prismer-dataset-1\ncount=1\n"));
    assert!(manifest.contains("experts=depth,segmentation\n"));
}

#[test]
fn datasets_rebuild_byte_identically_and_read_back() {
    let s = DatasetSpec {
        corruption: Some(prismer::experts::Corruption {
            kind: ExpertKind::Depth,
            fraction: 0.1,
        }),
        ..spec(5, 2)
    };
    let pipe = ExpertPipeline::new();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let items = write_dataset(&s, &pipe, a.path()).unwrap();
    write_dataset(&s, &pipe, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let (back_spec, back) = read_dataset(a.path()).unwrap();
    assert_eq!(back_spec, s);
    assert_eq!(back.len(), items.len());
    for (x, y) in items.iter().zip(&back) {
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.caption, y.caption);
        assert_eq!(x.qa, y.qa);
        assert!(x
            .rgb
            .data()
            .iter()
            .zip(y.rgb.data())
            .all(|(p, q)| (p - q).abs() < 1e-6));
        for (m, n) in x.experts.iter().zip(&y.experts) {
            assert_eq!(m.kind, n.kind);
            assert_eq!(m.instances, n.instances);
            assert!(m
                .grid
                .data()
                .iter()
                .zip(n.grid.data())
                .all(|(p, q)| (p - q).abs() < 1e-6));
        }
    }
    assert!(matches!(
        build_items(&spec(0, 0), &pipe),
        Err(HarnessError::Config(_))
    ));
}

/// Forward multiply-adds per text token, layer by layer, with the
/// attention score and mixing terms that the 2·N rule leaves out.
fn per_token_forward_flops(cfg: &ModelConfig, ctx: usize) -> f64 {
    let mm = |i: usize, o: usize| 2.0 * (i * o) as f64;
    let (e, d, f) = (cfg.enc_width, cfg.dec_width, cfg.ffn_mult);
    let attn = |w: usize, kv: usize, keys: usize| {
        2.0 * mm(w, w) + 2.0 * mm(kv, w) + 4.0 * (keys * w) as f64
    };
    let ffn = |w: usize| mm(w, w * f) + mm(w * f, w);
    let adaptor = |w: usize| 2.0 * mm(w, cfg.adaptor_dim(w));
    let stem = |cin: usize| {
        let (mut c, mut n) = (cin, 0.0);
        for &o in &cfg.stem_channels {
            n += 9.0 * mm(c, o);
            c = o;
        }
        n + mm(c, e)
    };
    let rgb = cfg.rgb_tokens();
    let mut n = stem(3) + cfg.experts.iter().map(|k| stem(k.channels())).sum::<f64>();
    n += cfg.enc_layers as f64 * (attn(e, e, rgb) + ffn(e) + adaptor(e));
    let expert_tokens = rgb * cfg.experts.len() + cfg.latents;
    n += cfg.resampler_layers as f64 * (attn(e, e, expert_tokens) + ffn(e));
    n += cfg.dec_layers as f64
        * (attn(d, d, ctx) + attn(d, e, cfg.z_tokens()) + ffn(d) + adaptor(d));
    n + mm(d, cfg.vocab_size)
}

#[test]
fn desk_cost_matches_layer_count() {
    let cfg = ModelConfig::desk(vec![ExpertKind::Depth, ExpertKind::Segmentation]);
    let (tokens, examples) = (24u64, 500u64);
    let c = estimate_cost(&cfg, tokens, examples).unwrap();
    let oracle = 3.0 * per_token_forward_flops(&cfg, tokens as usize) * (tokens * examples) as f64;
    let rel = (c.train_flops - oracle).abs() / oracle;
    assert!(
        rel < 0.10,
        "estimate {:.4e} vs layer count {oracle:.4e}",
        c.train_flops
    );
    let c2 = estimate_cost(&cfg, tokens, 2 * examples).unwrap();
    assert!((c2.train_flops - 2.0 * c.train_flops).abs() <= 1e-6 * c.train_flops);
}

#[test]
fn cost_counts_equal_store_counts() {
    for cfg in [
        ModelConfig::desk(vec![ExpertKind::Depth]),
        ModelConfig::desk_z(),
    ] {
        let c = estimate_cost(&cfg, 10, 1).unwrap();
        let mut m = Prismer::new(cfg.clone(), 0).unwrap();
        let part = partition_parameters(&mut m.store, FreezePolicy::FreezeVisionAndLanguage);
        assert_eq!(c.trainable_params, part.trainable_count);
        assert_eq!(
            c.total_params,
            m.store.total_count() + cfg.expert_network_params
        );
    }
    let base = estimate_cost(&ModelConfig::paper_base(), 32, 1).unwrap();
    assert!(
        (0.10..=0.25).contains(&base.trainable_share()),
        "{}",
        base.trainable_share()
    );
}

fn tiny_base() -> RunConfig {
    RunConfig::parse(
        "model.preset=desk\ntrain.total_steps=3\ntrain.warmup_steps=1\ntrain.batch_size=2\n\
         data.scenes=4\ndata.eval_scenes=2\n",
    )
    .unwrap()
}

#[test]
fn plans_are_deterministic_and_paired() {
    let mut plan = ExperimentPlan::standard(PlanKind::NoiseExpert, tiny_base());
    plan.seeds = vec![0, 1];
    let run = || {
        let r = run_plan(&plan, |_| {}).unwrap();
        let (mut m, mut s) = (Vec::new(), Vec::new());
        r.write_metrics(&mut m).unwrap();
        r.write_summary(&mut s).unwrap();
        (m, s, r)
    };
    let (m1, s1, r1) = run();
    let (m2, s2, _) = run();
    assert_eq!(m1, m2);
    assert_eq!(s1, s2);
    let text = String::from_utf8(m1).unwrap();
    assert!(text.starts_with("plan,arm,seed,metric,value,trainable_params,status\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    // one hash per seed, shared by every arm, different across seeds
    assert_eq!(r1.data_hashes.len(), 2);
    assert_ne!(r1.data_hashes[0].1, r1.data_hashes[1].1);
}

#[test]
fn accuracy_matches_a_hand_count() {
    let cfg = tiny_base();
    let pipe = ExpertPipeline::new();
    let mut items = build_items(&cfg.eval_spec(), &pipe).unwrap();
    items.extend(
        build_items(
            &DatasetSpec {
                count: 8,
                ..cfg.eval_spec()
            },
            &pipe,
        )
        .unwrap(),
    );
    // keep exactly 20 questions
    let mut left = 20usize;
    for it in &mut items {
        it.qa.truncate(left);
        left -= it.qa.len();
    }
    items.retain(|it| !it.qa.is_empty());
    assert_eq!(left, 0);
    let model = Prismer::new(cfg.model.clone(), 3).unwrap();
    let mut right = 0;
    for it in &items {
        let z = encode(&model, &it.rgb, &it.experts).unwrap();
        for q in &it.qa {
            let mut prefix = vec![BOS];
            prefix.extend(&q.question);
            let mut scorer = Scorer::new(&model, &z);
            let answer = candidate_score(&mut scorer, &prefix, &q.answer).unwrap();
            let beaten = q.distractors.iter().any(|d| {
                let mut s = Scorer::new(&model, &z);
                candidate_score(&mut s, &prefix, d).unwrap() > answer
            });
            right += usize::from(!beaten);
        }
    }
    assert_eq!(qa_accuracy(&model, &items).unwrap(), right as f64 / 20.0);
}

#[test]
fn config_errors_are_validation_errors() {
    for bad in [
        "model.widht=3\n",
        "train.total_steps=ten\n",
        "nonsense\n",
        "data.corruption=depth:2\n",
    ] {
        let e = RunConfig::parse(bad).unwrap_err();
        assert!(e.is_validation(), "{bad}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
    assert_eq!(HarnessError::ArmsFailed(1).exit_code(), 3);
}
