use prismer::experts::{generate_scene, ExpertKind, ExpertLabelMap, ExpertPipeline};
use prismer::model::*;
use prismer::tensor::{grad_check, GradCheckConfig, Graph, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn low_map(kind: ExpertKind, side: usize, seed: u64) -> ExpertLabelMap {
    let grid = Tensor::uniform(&[side, side, kind.channels()], -1.0, 1.0, &mut rng(seed));
    ExpertLabelMap {
        kind,
        grid,
        instances: None,
    }
}

fn high_map(kind: ExpertKind, side: usize, seed: u64) -> ExpertLabelMap {
    let s = side / 4;
    let grid = Tensor::uniform(&[s, s, kind.channels()], -1.0, 1.0, &mut rng(seed));
    let instances = (0..s * s)
        .map(|i| (i % 2 == 0).then_some(3 + i as u32))
        .collect();
    ExpertLabelMap {
        kind,
        grid,
        instances: Some(instances),
    }
}

fn map_for(kind: ExpertKind, side: usize, seed: u64) -> ExpertLabelMap {
    if kind.is_low_level() {
        low_map(kind, side, seed)
    } else {
        high_map(kind, side, seed)
    }
}

fn rgb(side: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[side, side, 3], 0.0, 1.0, &mut rng(seed))
}

fn set(m: &mut Prismer, id: ParamId, data: Vec<f64>) {
    let shape = m.store.get(id).value.shape().to_vec();
    m.store.get_mut(id).value = Tensor::new(&shape, data).unwrap();
}

fn to_tensor_err(e: ModelError) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Finite-difference check over the listed parameters of `model`, with
/// `loss` evaluated through a session that uses the perturbed values.
fn model_grad_check<F>(model: &Prismer, ids: &[ParamId], coords: usize, loss: F) -> f64
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let params: Vec<Tensor> = ids
        .iter()
        .map(|&id| model.store.get(id).value.clone())
        .collect();
    let build = |g: &mut Graph, vars: &[Var]| {
        let mut s = Session::new(model, g);
        for (&id, &v) in ids.iter().zip(vars) {
            s.bind(id, v);
        }
        loss(&mut s).map_err(to_tensor_err)
    };
    grad_check(
        build,
        &params,
        &GradCheckConfig {
            coords_per_param: coords,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn rgb_stem_gives_sixteen_tokens() {
    let m = Prismer::new(ModelConfig::desk_z(), 1).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let t = s.stem_forward(StemInput::Rgb(&rgb(64, 2))).unwrap();
    assert_eq!(s.graph.shape(t), &[16, 64]);
}

#[test]
fn high_level_stem_aligns_with_rgb_grid() {
    let m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Segmentation]), 1).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let t = s
        .stem_forward(StemInput::Expert(&high_map(
            ExpertKind::Segmentation,
            64,
            3,
        )))
        .unwrap();
    assert_eq!(s.graph.shape(t), &[16, 64]);
}

#[test]
fn stems_are_task_specific() {
    let m = Prismer::new(
        ModelConfig::desk(vec![ExpertKind::Depth, ExpertKind::Edge]),
        1,
    )
    .unwrap();
    let depth = low_map(ExpertKind::Depth, 64, 5);
    let edge = ExpertLabelMap {
        kind: ExpertKind::Edge,
        ..depth.clone()
    };
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let a = s.stem_forward(StemInput::Expert(&depth)).unwrap();
    let b = s.stem_forward(StemInput::Expert(&edge)).unwrap();
    assert!(s.graph.value(a).max_abs_diff(s.graph.value(b)) > 1e-3);
}

#[test]
fn stem_channel_mismatch_is_config_error() {
    let m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 1).unwrap();
    let bad = ExpertLabelMap {
        kind: ExpertKind::Depth,
        grid: Tensor::zeros(&[64, 64, 3]),
        instances: None,
    };
    let missing = low_map(ExpertKind::Edge, 64, 1);
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    assert!(matches!(
        s.stem_forward(StemInput::Expert(&bad)),
        Err(ModelError::Config(_))
    ));
    assert!(matches!(
        s.stem_forward(StemInput::Expert(&missing)),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn stem_gradient_matches_finite_differences() {
    let m = Prismer::new(ModelConfig::micro(vec![ExpertKind::Normal]), 4).unwrap();
    let stem = m.stem(ExpertKind::Normal).unwrap().clone();
    let mut ids: Vec<ParamId> = stem.convs.iter().flat_map(|&(k, b, _)| [k, b]).collect();
    ids.push(stem.proj.w);
    let map = low_map(ExpertKind::Normal, 8, 9);
    let err = model_grad_check(&m, &ids, 12, |s| {
        let t = s.stem_forward(StemInput::Expert(&map))?;
        let sq = s.graph.mul(t, t)?;
        Ok(s.graph.sum(sq)?)
    });
    assert!(err < 1e-4, "stem gradient rel. error {err}");
}

#[test]
fn adaptors_are_identity_at_init() {
    let m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 7).unwrap();
    let x = Tensor::randn(&[5, 64], 3.0, &mut rng(1));
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let xv = s.graph.constant(x.clone());
    let mut n = 0;
    for a in m.adaptors() {
        let y = s.adaptor_forward(a, xv).unwrap();
        assert_eq!(s.graph.value(y).data(), x.data());
        n += 1;
    }
    assert_eq!(n, 4);
}

#[test]
fn adaptor_nonzero_up_changes_output() {
    let mut m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 7).unwrap();
    let a = m.net.enc_layers[0].adaptor.clone();
    let n = m.store.get(a.up.w).value.numel();
    set(
        &mut m,
        a.up.w,
        (0..n).map(|i| 0.01 * (i % 7) as f64).collect(),
    );
    let x = Tensor::randn(&[3, 64], 1.0, &mut rng(2));
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let xv = s.graph.constant(x.clone());
    let y = s.adaptor_forward(&a, xv).unwrap();
    assert!(s.graph.value(y).max_abs_diff(&x) > 1e-6);
}

#[test]
fn adaptor_hand_sized_case() {
    let mut cfg = ModelConfig::micro(vec![ExpertKind::Depth]);
    cfg.enc_width = 2;
    cfg.heads = 1;
    let mut m = Prismer::new(cfg, 0).unwrap();
    let a = m.net.enc_layers[0].adaptor.clone();
    set(&mut m, a.down.w, vec![1.0, -1.0, 2.0, 0.5]);
    set(&mut m, a.down.b, vec![0.5, 0.0]);
    set(&mut m, a.up.w, vec![1.0, 2.0, -1.0, 0.5]);
    set(&mut m, a.up.b, vec![0.1, -0.2]);
    let x = [1.0, 2.0];
    // down: [1+4+0.5, -1+1] = [5.5, 0]; squared relu: [30.25, 0]
    // up: [30.25 + 0.1, 60.5 - 0.2]
    let expect = [x[0] + 30.35, x[1] + 60.3];
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let xv = s.graph.constant(Tensor::new(&[1, 2], x.to_vec()).unwrap());
    let y = s.adaptor_forward(&a, xv).unwrap();
    for (got, want) in s.graph.value(y).data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn adaptor_width_mismatch_is_rejected() {
    let m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 7).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let x = s.graph.constant(Tensor::zeros(&[2, 3]));
    assert!(s.adaptor_forward(&m.net.enc_layers[0].adaptor, x).is_err());
}

#[test]
fn resampler_output_count_is_constant() {
    let kinds = ExpertKind::TASK_ORDER;
    for variant in [ResamplerVariant::Learned, ResamplerVariant::RandomSampling] {
        let mut shapes = Vec::new();
        for n in [1, 2, 4, 6] {
            let mut cfg = ModelConfig::desk(kinds[..n].to_vec());
            cfg.resampler = variant;
            let m = Prismer::new(cfg, 11).unwrap();
            let mut g = Graph::new();
            let mut s = Session::inference(&m, &mut g);
            let grids: Vec<Var> = kinds[..n]
                .iter()
                .map(|&k| {
                    s.stem_forward(StemInput::Expert(&map_for(k, 64, k as u64)))
                        .unwrap()
                })
                .collect();
            let out = s.resampler_forward(&grids).unwrap();
            shapes.push(s.graph.shape(out).to_vec());
        }
        assert!(
            shapes.iter().all(|sh| sh == &[16, 64]),
            "{variant}: {shapes:?}"
        );
    }
}

#[test]
fn random_sampling_resampler_has_no_parameters_and_falls_back() {
    let mut cfg = ModelConfig::desk(vec![ExpertKind::Depth]);
    cfg.resampler = ResamplerVariant::RandomSampling;
    cfg.latents = 40;
    let m = Prismer::new(cfg, 1).unwrap();
    assert!(m.store.names().all(|n| !n.starts_with("resampler.")));
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let t = s
        .graph
        .constant(Tensor::from_fn(&[16, 64], |i| (i / 64) as f64));
    let out = s.resampler_forward(&[t]).unwrap();
    assert_eq!(s.graph.shape(out), &[40, 64]);
    // Without replacement when there are enough tokens.
    let big = s
        .graph
        .constant(Tensor::from_fn(&[64, 64], |i| (i / 64) as f64));
    let out = s.resampler_forward(&[big]).unwrap();
    let mut rows: Vec<i64> = (0..40)
        .map(|r| s.graph.value(out).row(r)[0] as i64)
        .collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), 40);
}

#[test]
fn empty_expert_list_is_contract_error() {
    let m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 1).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    assert!(matches!(
        s.resampler_forward(&[]),
        Err(ModelError::Contract(_))
    ));
}

fn scalar_resampler() -> Prismer {
    let mut cfg = ModelConfig::micro(vec![ExpertKind::Depth]);
    cfg.enc_width = 1;
    cfg.dec_width = 2;
    cfg.heads = 1;
    cfg.latents = 1;
    cfg.resampler_layers = 1;
    cfg.ffn_mult = 1;
    Prismer::new(cfg, 0).unwrap()
}

#[test]
fn scalar_attention_oracle() {
    let mut m = scalar_resampler();
    let layer = m.net.resampler_layers[0].clone();
    let (wq, bq, wk, bk, wv, bv, wo, bo) = (0.7, 0.1, -1.3, 0.2, 2.0, -0.5, 1.5, 0.05);
    let a = &layer.attn;
    for (id, v) in [
        (a.q.w, wq),
        (a.q.b, bq),
        (a.k.w, wk),
        (a.k.b, bk),
        (a.v.w, wv),
        (a.v.b, bv),
        (a.o.w, wo),
        (a.o.b, bo),
        (layer.ffn.up.w, 0.0),
        (layer.ffn.down.w, 0.0),
    ] {
        set(&mut m, id, vec![v]);
    }
    let latent = 0.8;
    let lat = m.net.latents.unwrap();
    set(&mut m, lat, vec![latent]);
    let tokens = [0.3, -1.1, 2.4];

    let q = wq * latent + bq;
    let keys: Vec<f64> = tokens
        .iter()
        .chain([latent].iter())
        .map(|t| wk * t + bk)
        .collect();
    let vals: Vec<f64> = tokens
        .iter()
        .chain([latent].iter())
        .map(|t| wv * t + bv)
        .collect();
    let scores: Vec<f64> = keys.iter().map(|k| q * k).collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = ex.iter().sum();
    let mix: f64 = ex.iter().zip(&vals).map(|(e, v)| e / total * v).sum();
    let expect = latent + wo * mix + bo;

    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let t = s
        .graph
        .constant(Tensor::new(&[3, 1], tokens.to_vec()).unwrap());
    let out = s.resampler_forward(&[t]).unwrap();
    let got = s.graph.value(out).item().unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn resampler_gradient_wrt_latents() {
    let m = Prismer::new(
        ModelConfig::micro(vec![ExpertKind::Depth, ExpertKind::Edge]),
        5,
    )
    .unwrap();
    let ids = [m.net.latents.unwrap()];
    let tokens = Tensor::randn(&[6, 16], 1.0, &mut rng(3));
    let err = model_grad_check(&m, &ids, 64, |s| {
        let t = s.graph.constant(tokens.clone());
        let out = s.resampler_forward(&[t])?;
        let sq = s.graph.mul(out, out)?;
        Ok(s.graph.mean(sq)?)
    });
    assert!(err < 1e-4, "latent gradient rel. error {err}");
}

#[test]
fn z_token_budget() {
    let m = Prismer::new(ModelConfig::desk_z(), 1).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let z = s.encoder_forward(&rgb(64, 1), &[]).unwrap();
    assert_eq!(s.graph.shape(z), &[16, 64]);

    for n in [1, 2, 4, 6] {
        let kinds = ExpertKind::TASK_ORDER[..n].to_vec();
        let mut cfg = ModelConfig::desk(kinds.clone());
        cfg.latents = 64;
        let m = Prismer::new(cfg, 1).unwrap();
        let maps: Vec<ExpertLabelMap> = kinds.iter().map(|&k| map_for(k, 64, 2)).collect();
        let mut g = Graph::new();
        let mut s = Session::inference(&m, &mut g);
        let z = s.encoder_forward(&rgb(64, 1), &maps).unwrap();
        assert_eq!(s.graph.shape(z), &[16 + 64, 64]);
        assert_eq!(m.config.z_tokens(), 80);
    }
}

#[test]
fn encoder_rejects_mismatched_experts() {
    let m = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 1).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let wrong = [low_map(ExpertKind::Edge, 64, 1)];
    assert!(matches!(
        s.encoder_forward(&rgb(64, 1), &wrong),
        Err(ModelError::Config(_))
    ));
    assert!(matches!(
        s.encoder_forward(&rgb(64, 1), &[]),
        Err(ModelError::Config(_))
    ));
    let z = Prismer::new(ModelConfig::desk_z(), 1).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&z, &mut g);
    let extra = [low_map(ExpertKind::Depth, 64, 1)];
    assert!(matches!(
        s.encoder_forward(&rgb(64, 1), &extra),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn perturbing_an_expert_map_changes_z() {
    let pipe = ExpertPipeline::new();
    let scene = generate_scene(4, 2);
    let kinds = [ExpertKind::Depth, ExpertKind::Segmentation];
    let m = Prismer::new(ModelConfig::desk(kinds.to_vec()), 1).unwrap();
    let rec = pipe.render_record(scene, &kinds, None, 0).unwrap();
    let mut moved = rec.experts.clone();
    moved[0].grid.data_mut()[64 * 20 + 30] += 0.5;
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let a = s.encoder_forward(&rec.rgb, &rec.experts).unwrap();
    let b = s.encoder_forward(&rec.rgb, &moved).unwrap();
    let diff = s.graph.value(a).max_abs_diff(s.graph.value(b));
    assert!(diff > 0.0, "z insensitive to the depth map");
}

fn decoder_rows(m: &Prismer, z: &Tensor, tokens: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let mut s = Session::inference(m, &mut g);
    let zv = s.graph.constant(z.clone());
    let l = s.decoder_forward(zv, tokens).unwrap();
    s.graph.value(l).clone()
}

#[test]
fn decoder_is_causal() {
    let m = Prismer::new(ModelConfig::desk_z(), 3).unwrap();
    let z = Tensor::randn(&[16, 64], 1.0, &mut rng(4));
    let base = [1, 5, 9, 12, 20, 3];
    let ref_rows = decoder_rows(&m, &z, &base);
    for j in 1..base.len() {
        let mut changed = base;
        changed[j] = (changed[j] + 7) % m.config.vocab_size;
        let rows = decoder_rows(&m, &z, &changed);
        for t in 0..base.len() {
            let same = rows.row(t) == ref_rows.row(t);
            assert_eq!(same, t < j, "row {t} after changing token {j}");
        }
    }
}

#[test]
fn decoder_cross_attention_is_live_and_short_sequences_work() {
    let m = Prismer::new(ModelConfig::desk_z(), 3).unwrap();
    let z = Tensor::randn(&[16, 64], 1.0, &mut rng(4));
    let mut z2 = z.clone();
    z2.data_mut()[5] += 1.0;
    let tokens = [1, 5, 9, 12];
    let a = decoder_rows(&m, &z, &tokens);
    let b = decoder_rows(&m, &z2, &tokens);
    for t in 0..tokens.len() {
        assert!(a.row(t) != b.row(t), "row {t} ignores z");
    }
    let one = decoder_rows(&m, &z, &[1]);
    assert_eq!(one.shape(), &[1, m.config.vocab_size]);
    assert!(one.data().iter().all(|v| v.is_finite()));
}

#[test]
fn decoder_rejects_long_and_empty_sequences() {
    let m = Prismer::new(ModelConfig::desk_z(), 3).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let z = s.graph.constant(Tensor::zeros(&[16, 64]));
    let long = vec![2; m.config.max_seq_len + 1];
    assert!(matches!(
        s.decoder_forward(z, &long),
        Err(ModelError::Length(_))
    ));
    assert!(matches!(
        s.decoder_forward(z, &[]),
        Err(ModelError::Length(_))
    ));
    assert!(matches!(
        s.decoder_forward(z, &[999]),
        Err(ModelError::Contract(_))
    ));
}

fn micro_z() -> Prismer {
    let mut cfg = ModelConfig::micro(vec![]);
    cfg.mode = Mode::PrismerZ;
    cfg.resampler = ResamplerVariant::None;
    Prismer::new(cfg, 2).unwrap()
}

#[test]
fn uniform_logits_give_ln_vocab() {
    let mut m = micro_z();
    let head = m.net.head.clone();
    let n = m.store.get(head.w).value.numel();
    set(&mut m, head.w, vec![0.0; n]);
    let seq = TokenSequence::new(vec![1, 2, 3, 4, 5], 0, 8).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let z = s.graph.constant(Tensor::randn(&[1, 16], 1.0, &mut rng(0)));
    let loss = s.prefix_lm_loss(z, &seq).unwrap();
    assert!((s.graph.value(loss).item().unwrap() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn prefix_loss_matches_manual_mean_log_prob() {
    let m = micro_z();
    let seq = TokenSequence::new(vec![1, 6, 3], 1, 8).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let z = s.graph.constant(Tensor::randn(&[1, 16], 1.0, &mut rng(0)));
    let logits = s.decoder_forward(z, &seq.tokens).unwrap();
    let rows = s.graph.value(logits).clone();
    let log_p = |r: usize, t: usize| {
        let row = rows.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row[t] - lse
    };
    let expect = -(log_p(0, 6) + log_p(1, 3)) / 2.0;
    let loss = s.prefix_lm_loss(z, &seq).unwrap();
    let got = s.graph.value(loss).item().unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");

    let again = s.prefix_lm_loss(z, &seq).unwrap();
    assert_eq!(s.graph.value(again).item().unwrap(), got);
}

#[test]
fn full_prefix_is_empty_loss() {
    let m = micro_z();
    let seq = TokenSequence::new(vec![1, 6, 3], 3, 8).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&m, &mut g);
    let z = s.graph.constant(Tensor::zeros(&[1, 16]));
    assert!(matches!(
        s.prefix_lm_loss(z, &seq),
        Err(ModelError::Tensor(TensorError::EmptyLoss))
    ));
    assert!(TokenSequence::new(vec![1, 2], 3, 8).is_err());
    assert!(TokenSequence::new(vec![1, 9], 0, 8).is_err());
}

#[test]
fn prismer_z_registers_no_expert_parameters() {
    let m = Prismer::new(ModelConfig::desk_z(), 1).unwrap();
    for (_, p) in m.store.iter() {
        assert!(!p.name.starts_with("resampler."), "{}", p.name);
        assert!(
            !p.name.starts_with("stem.") || p.name.starts_with("stem.rgb."),
            "{}",
            p.name
        );
        assert!(!matches!(
            p.group,
            ParamGroup::Resampler | ParamGroup::ExpertStem | ParamGroup::InstanceEmbedding
        ));
    }
    assert_eq!(m.store.group_count(ParamGroup::Resampler), 0);
    assert_eq!(m.store.group_count(ParamGroup::ExpertStem), 0);
}

#[test]
fn micro_end_to_end_gradient_check() {
    let kinds = vec![ExpertKind::Depth, ExpertKind::Segmentation];
    let mut m = Prismer::new(ModelConfig::micro(kinds.clone()), 8).unwrap();
    // Non-zero adaptor up-projections so that their downstream paths are exercised.
    let ups: Vec<ParamId> = m.adaptors().map(|a| a.up.w).collect();
    for id in ups {
        let n = m.store.get(id).value.numel();
        let t = Tensor::randn(&[n], 0.1, &mut rng(id.index() as u64));
        set(&mut m, id, t.into_data());
    }
    let maps: Vec<ExpertLabelMap> = kinds.iter().map(|&k| map_for(k, 8, 1)).collect();
    let image = rgb(8, 2);
    let seq = TokenSequence::new(vec![1, 4, 6, 2, 0], 2, 8).unwrap();
    let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
    let err = model_grad_check(&m, &ids, 4, |s| {
        let z = s.encoder_forward(&image, &maps)?;
        s.prefix_lm_loss(z, &seq)
    });
    assert!(err < 1e-4, "end-to-end rel. error {err}");
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut m = Prismer::new(ModelConfig::micro(vec![ExpertKind::Depth]), 8).unwrap();
    m.store
        .apply_freeze(|g| matches!(g, ParamGroup::VisionBackbone | ParamGroup::LanguageBackbone));
    let maps = [low_map(ExpertKind::Depth, 8, 1)];
    let mut g = Graph::new();
    let mut s = Session::new(&m, &mut g);
    let z = s.encoder_forward(&rgb(8, 1), &maps).unwrap();
    let seq = TokenSequence::new(vec![1, 4, 6], 1, 8).unwrap();
    let loss = s.prefix_lm_loss(z, &seq).unwrap();
    let bound: Vec<(ParamId, Var)> = s.bound_params().collect();
    let grads = g.backward(loss).unwrap();
    let mut trainable_with_grad = 0;
    for (id, v) in bound {
        let frozen = m.store.get(id).frozen;
        assert_eq!(grads.get(v).is_some(), !frozen, "{}", m.store.get(id).name);
        trainable_with_grad += usize::from(!frozen);
    }
    assert!(trainable_with_grad > 0);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Prismer::new(
        ModelConfig::micro(vec![ExpertKind::Depth, ExpertKind::ObjectDetection]),
        6,
    )
    .unwrap();
    m.store.apply_freeze(|g| g == ParamGroup::VisionBackbone);
    m.store.step = 17;
    save_checkpoint(&m, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.store.step, 17);
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.frozen, b.frozen);
        let rounded: Vec<f64> = a.value.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(b.value.data(), &rounded[..]);
    }
    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(&back, dir2.path()).unwrap();
    for name in m.store.names() {
        let f = format!("params/{name}.pten");
        assert_eq!(
            std::fs::read(dir.path().join(&f)).unwrap(),
            std::fs::read(dir2.path().join(&f)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(dir.path().join(CHECKPOINT_MANIFEST)).unwrap(),
        std::fs::read(dir2.path().join(CHECKPOINT_MANIFEST)).unwrap()
    );
}

#[test]
fn initial_values_are_shared_by_name() {
    let a = Prismer::new(ModelConfig::desk(vec![ExpertKind::Depth]), 42).unwrap();
    let b = Prismer::new(
        ModelConfig::desk(vec![ExpertKind::Depth, ExpertKind::Edge]),
        42,
    )
    .unwrap();
    for (_, p) in a.store.iter() {
        assert_eq!(
            b.store.by_name(&p.name).unwrap().value,
            p.value,
            "{}",
            p.name
        );
    }
}
