mod common;

use std::sync::OnceLock;

use common::*;
use diffusion_iqa::ablation::{run_ablation, AblationCell, AblationSpec};
use diffusion_iqa::checkpoint::{load_checkpoint, save_checkpoint};
use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{load_manifest, Manifest, Split};
use diffusion_iqa::eval::{evaluate, export_features};
use diffusion_iqa::model::{build_toy_bundle, multi_step_score, score_image, ModelBundle};
use diffusion_iqa::readout::Pooling;
use diffusion_iqa::schedule::{seeded_rng, Latent};
use diffusion_iqa::train::{batch_gradient, load_samples, train_samples, training_draw, TrainOptions, TrainSample};
use tempfile::TempDir;

/// 40 tiny images shared by every test in this file.
fn dataset() -> &'static (TempDir, Manifest) {
    static DATA: OnceLock<(TempDir, Manifest)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), 40, 32, 3);
        (dir, m)
    })
}

fn samples(bundle: &ModelBundle) -> Vec<TrainSample> {
    load_samples(bundle, &dataset().1).unwrap()
}

#[test]
fn zero_b_adapters_are_transparent() {
    let bundle = build_toy_bundle(&RunConfig::default()).unwrap();
    // Same model with different A factors: B = 0 must hide them completely.
    let mut other = bundle.clone();
    for block in &mut other.readout.blocks {
        for p in diffusion_iqa::readout::Projection::ALL {
            block.projection_mut(p).lora.a.mapv_inplace(|v| 3.0 * v + 1.0);
        }
    }
    let img = synthetic_image(bundle.image_size, 4, 9);
    let a = score_image(&img, &bundle, &mut seeded_rng(1)).unwrap();
    let b = score_image(&img, &other, &mut seeded_rng(1)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn training_touches_only_trainable_parameters() {
    let cfg = RunConfig {
        epochs: 10,
        ..tiny_config()
    };
    let bundle = build_toy_bundle(&cfg).unwrap();
    let before = bundle.named_parameters();
    let opts = TrainOptions {
        check_frozen: true,
        max_steps: Some(10),
        keep_target: false,
    };
    let out = train_samples(bundle, &samples(&build_toy_bundle(&cfg).unwrap()), &cfg, &opts).unwrap();
    assert_eq!(out.steps, 10);
    let after = out.bundle.named_parameters();
    let mut changed = 0;
    for (name, b) in &before {
        let same = bits_equal(b, &after[name]);
        if out.partition.contains(name) {
            changed += usize::from(!same);
        } else {
            assert!(same, "frozen `{name}` moved");
        }
    }
    assert!(changed > 0);
    assert!(!out.partition.contains("block.0.q.lora_B"));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = RunConfig {
        learning_rate: 0.0,
        ..tiny_config()
    };
    let bundle = build_toy_bundle(&cfg).unwrap();
    let before = bundle.named_parameters();
    let out = train_samples(bundle.clone(), &samples(&bundle), &cfg, &TrainOptions::default()).unwrap();
    for (name, p) in out.bundle.named_parameters() {
        assert!(bits_equal(&before[&name], &p), "{name}");
    }
}

#[test]
fn fully_frozen_training_records_history_without_updates() {
    let cfg = RunConfig {
        freeze_cross_attention: true,
        fixed_prompts: true,
        ..tiny_config()
    };
    let bundle = build_toy_bundle(&cfg).unwrap();
    let out = train_samples(bundle.clone(), &samples(&bundle), &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.history.len(), cfg.epochs);
}

#[test]
fn training_is_seed_deterministic() {
    let cfg = tiny_config();
    let bundle = build_toy_bundle(&cfg).unwrap();
    let s = samples(&bundle);
    let a = train_samples(bundle.clone(), &s, &cfg, &TrainOptions::default()).unwrap();
    let b = train_samples(bundle, &s, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
    let (pa, pb) = (a.bundle.named_parameters(), b.bundle.named_parameters());
    for (name, p) in pa {
        assert!(bits_equal(&p, &pb[&name]), "{name}");
    }
}

/// Batch gradient equals the per-sample chain rule `2 (s - y) / n * ds`.
#[test]
fn accumulated_gradient_matches_per_sample_sum() {
    let cfg = tiny_config();
    let mut bundle = build_toy_bundle(&cfg).unwrap();
    perturb_adapters(&mut bundle, 0.1, 2);
    let s = samples(&bundle);
    bundle.target = diffusion_iqa::train::fit_target(&bundle, &s, &cfg);
    let draws: Vec<_> = (0..5).map(|i| training_draw(&bundle, &cfg, &s[i], i, 1).unwrap()).collect();
    let bg = batch_gradient(&bundle, &draws).unwrap();
    let mut manual = bundle.zero_grads();
    for d in &draws {
        let (score, g) = bundle
            .score_grad_at(&d.sample.latent, &[(d.t, d.eps.clone())], bundle.chain)
            .unwrap();
        let w = 2.0 * (score - bundle.target.target(d.sample.mos)) / draws.len() as f64;
        for (name, acc) in manual.iter_mut() {
            acc.scaled_add(w, &g[name]);
        }
    }
    for (name, g) in &bg.grads {
        let scale = g.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(g, &manual[name]) <= 1e-7 * scale, "{name}");
    }
}

/// A linear-response manifest: opinion scores are an exact affine
/// function of each image's frozen-model score, so the adapters only have
/// to stretch the prediction.
#[test]
fn loss_descends_on_linear_response_data() {
    let cfg = RunConfig {
        epochs: 15,
        batch_size: 10,
        learning_rate: 1e-3,
        ..tiny_config()
    };
    let bundle = build_toy_bundle(&cfg).unwrap();
    let mut rng = seeded_rng(17);
    let (c, h, w) = bundle.latent_shape();
    let mut s: Vec<TrainSample> = (0..50)
        .map(|i| TrainSample {
            id: format!("s{i}"),
            latent: Latent::standard_normal((c, h, w), &mut rng).scaled(0.5 + i as f64 / 50.0),
            mos: 0.0,
        })
        .collect();
    let base: Vec<f64> = s
        .iter()
        .map(|x| {
            let draws = bundle.draw_inference(bundle.chain, &mut seeded_rng(0)).unwrap();
            bundle.score_latent_at(&x.latent, &draws, bundle.chain).unwrap().score
        })
        .collect();
    for (x, b) in s.iter_mut().zip(&base) {
        x.mos = 1e4 * b;
    }
    let out = train_samples(bundle, &s, &cfg, &TrainOptions::default()).unwrap();
    let first = out.history.first().unwrap().mean_loss;
    let last = out.history.last().unwrap().mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn evaluation_is_deterministic_and_reports_config() {
    let (_, m) = dataset();
    let bundle = build_toy_bundle(&tiny_config()).unwrap();
    let a = evaluate(&bundle, m, 5).unwrap();
    let b = evaluate(&bundle, m, 5).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.records.len(), m.len());
    assert!(a.srcc.is_some());
    assert_eq!(a.config["lambda"], "0.14");
}

#[test]
fn evaluation_of_two_images() {
    let (_, m) = dataset();
    let two = Manifest {
        records: m.records[..2].to_vec(),
        ..m.clone()
    };
    let r = evaluate(&build_toy_bundle(&tiny_config()).unwrap(), &two, 0).unwrap();
    assert_eq!(r.records.len(), 2);
    assert!(r.records.iter().all(|x| x.predicted.is_finite()));
}

#[test]
fn missing_images_are_reported_not_fatal() {
    let (_, m) = dataset();
    let mut broken = m.clone();
    broken.records[0].path = "images/nope.png".into();
    let r = evaluate(&build_toy_bundle(&tiny_config()).unwrap(), &broken, 0).unwrap();
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.records.len(), m.len() - 1);
}

#[test]
fn exported_features_have_text_length_and_are_reproducible() {
    let (_, m) = dataset();
    let three = Manifest {
        records: m.records[..3].to_vec(),
        ..m.clone()
    };
    let bundle = build_toy_bundle(&tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let recs = export_features(&bundle, &three, &p1, 4).unwrap();
    export_features(&bundle, &three, &p2, 4).unwrap();
    let m_len = bundle.prompt.text_len(diffusion_iqa::prompt::Polarity::Positive);
    assert_eq!(recs.len(), 3);
    for r in &recs {
        assert_eq!(r.features.len(), m_len);
        assert_eq!(r.g_pos.len(), bundle.policy.count);
        assert_eq!(r.g_neg.len(), bundle.policy.count);
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn zeroed_queries_give_uniform_attention() {
    let (_, m) = dataset();
    let mut bundle = build_toy_bundle(&tiny_config()).unwrap();
    for block in &mut bundle.readout.blocks {
        block.query.base.fill(0.0);
        block.query.lora.b.fill(0.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let one = Manifest {
        records: m.records[..2].to_vec(),
        ..m.clone()
    };
    let recs = export_features(&bundle, &one, &dir.path().join("f.jsonl"), 0).unwrap();
    let m_len = recs[0].features.len() as f64;
    for r in &recs {
        assert!(r.features.iter().all(|&v| (v - 1.0 / m_len).abs() < 1e-12));
    }
    // Single block, single prompt, one timestep: 1/M + ln(N)/lambda.
    let mut cfg = tiny_config();
    cfg.num_blocks = 1;
    cfg.eval_timestep_count = 1;
    cfg.prompt_mode = diffusion_iqa::prompt::PromptMode::Single;
    let mut one_block = build_toy_bundle(&cfg).unwrap();
    one_block.readout.blocks[0].query.base.fill(0.0);
    let n = one_block.backbone.block_specs()[0].tokens as f64;
    let m1 = one_block.prompt.text_len(diffusion_iqa::prompt::Polarity::Positive) as f64;
    let img = synthetic_image(32, 1, 1);
    let s = score_image(&img, &one_block, &mut seeded_rng(0)).unwrap();
    assert!((s - (1.0 / m1 + n.ln() / cfg.lambda)).abs() < 1e-9);
    assert!((s - one_block.uniform_baseline()).abs() < 1e-9);
}

/// Switching to mean pooling leaves every attention map untouched.
#[test]
fn mean_pooling_changes_only_the_pooling() {
    let cfg = tiny_config();
    let lse = build_toy_bundle(&cfg).unwrap();
    let mean = build_toy_bundle(&RunConfig {
        mean_pool_instead_of_lse: true,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(mean.readout.pooling, Pooling::Mean);
    let z = lse.encode_image(&synthetic_image(32, 2, 2)).unwrap();
    let eps = Latent::standard_normal(z.shape(), &mut seeded_rng(3));
    let zt = diffusion_iqa::schedule::forward_noise(&z, 40, &eps, &lse.schedule).unwrap();
    let text = diffusion_iqa::prompt::encode_prompt(&lse.prompt, diffusion_iqa::prompt::Polarity::Positive, &lse.encoder).unwrap();
    let a = lse.backbone.forward(&zt, 40, &text, &lse.readout).unwrap();
    let b = mean.backbone.forward(&zt, 40, &text, &mean.readout).unwrap();
    for (x, y) in a.maps.iter().zip(&b.maps) {
        assert!(bits_equal(&x.values, &y.values));
    }
}

#[test]
fn one_step_chain_equals_plain_scoring() {
    let bundle = build_toy_bundle(&tiny_config()).unwrap();
    let img = synthetic_image(32, 3, 3);
    let a = score_image(&img, &bundle, &mut seeded_rng(2)).unwrap();
    let b = multi_step_score(&img, &bundle, 1, 20, &mut seeded_rng(2)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let chain = diffusion_iqa::model::DenoiseChain { steps: 3, delta: 20 };
    let taps: Vec<usize> = bundle
        .score_breakdown(&img, chain, &mut seeded_rng(2))
        .unwrap()
        .timesteps
        .iter()
        .map(|t| t.t)
        .collect();
    let starts: Vec<usize> = bundle
        .draw_inference(chain, &mut seeded_rng(2))
        .unwrap()
        .iter()
        .map(|d| d.0)
        .collect();
    for (tap, start) in taps.iter().zip(&starts) {
        assert_eq!(*tap + 40, *start);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (_, m) = dataset();
    let cfg = tiny_config();
    let bundle = build_toy_bundle(&cfg).unwrap();
    let s = samples(&bundle);
    let opts = TrainOptions {
        max_steps: Some(3),
        ..TrainOptions::default()
    };
    let trained = train_samples(bundle, &s, &cfg, &opts).unwrap().bundle;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&trained, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    for r in m.records.iter().take(10) {
        let img = diffusion_iqa::data::preprocess(&m.resolve(r), 32).unwrap();
        let a = score_image(&img, &trained, &mut seeded_rng(7)).unwrap();
        let b = score_image(&img, &loaded, &mut seeded_rng(7)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{}", r.image_id);
    }
    assert_eq!(trained.target, loaded.target);
}

#[test]
fn manifest_round_trips_through_text() {
    let (dir, m) = dataset();
    let again = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(&again, m);
    assert_eq!(m.split(Split::Train).len() + m.split(Split::Val).len() + m.split(Split::Test).len(), 40);
}

#[test]
fn ablation_grid_runs_each_cell() {
    let (_, m) = dataset();
    let spec = AblationSpec {
        name: "mini".into(),
        cells: vec![
            AblationCell::new("frozen", &[("freeze_cross_attention", "true"), ("fixed_prompts", "true")]),
            AblationCell::new("k2", &[("eval_timestep_count", "2")]),
            AblationCell::new("k4", &[("eval_timestep_count", "4")]),
        ],
        sweep_key: Some("eval_timestep_count".into()),
    };
    let (train, test) = (m.split(Split::Train), m.split(Split::Test));
    let r = run_ablation(&tiny_config(), &spec, &train, &test).unwrap();
    assert_eq!(r.len(), 3);
    assert!(r.iter().all(|c| c.srcc.is_some()), "{r:?}");
}
