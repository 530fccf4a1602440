//! End-to-end behaviour of pre-training and fine-tuning on a tiny model.

use multiclip::finetune::{FinetuneConfig, Init};
use multiclip::optim::AdamConfig;
use multiclip::pretrain::{run_pretraining, ModelConfig, PretrainConfig};
use multiclip::scene_data::io::synthetic_split;
use multiclip::scene_data::{Dataset, GeneratorConfig, Split};
use multiclip::sqa_model::{finetune_sqa, SqaConfig};
use multiclip::vqa_model::{finetune_vqa, VqaConfig};
use serde_json::json;

fn model() -> ModelConfig {
    serde_json::from_value(json!({
        "encoder_warmup_steps": 3,
        "scene": {
            "point_hidden": [8], "knn": 4, "num_proposals": 6, "group_size": 6, "radius": 0.5,
            "feature_dim": 12, "vote_hidden": 8, "group_hidden": 8, "head_hidden": 8,
            "layers": 1, "heads": 2, "ffn_dim": 16, "embed_dim": 8, "num_classes": 8
        },
        "encoders": {
            "embed_dim": 8,
            "text": { "width": 8, "layers": 1, "heads": 2, "ffn_dim": 16, "word_dim": 8 },
            "image": { "width": 8, "layers": 1, "heads": 2, "ffn_dim": 16, "patch": 8, "image_width": 16, "image_height": 16 }
        },
        "render": { "width": 16, "height": 16 }
    }))
    .unwrap()
}

fn data(n: usize) -> Dataset {
    let gen = GeneratorConfig {
        num_points: 384,
        points_per_object: 48,
        min_floor_points: 48,
        ..GeneratorConfig::default()
    };
    synthetic_split(5, Split::Train, n, &gen).unwrap()
}

fn pretrain_cfg(iterations: usize, num_views: usize) -> PretrainConfig {
    PretrainConfig {
        iterations,
        batch_size: 3,
        num_views,
        optimizer: AdamConfig::new(1e-3, 1e-5),
        ..PretrainConfig::default()
    }
}

/// Full-batch steps, so successive losses are measured on the same samples.
fn finetune_cfg(steps: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 1000,
        max_steps: Some(steps),
        batch_size: 10_000,
        optimizer: AdamConfig::new(2e-3, 0.0),
        lr_decay_epoch: 1000,
        ..FinetuneConfig::default()
    }
}

fn vqa() -> VqaConfig {
    VqaConfig {
        hidden: 8,
        fusion_layers: 1,
        heads: 2,
        ffn_dim: 16,
        ..VqaConfig::default()
    }
}

fn sqa() -> SqaConfig {
    SqaConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        mlp_hidden: 8,
        ..SqaConfig::default()
    }
}

#[test]
fn pretraining_is_reproducible_and_thread_count_independent() {
    let ds = data(4);
    let m = model();
    let cfg = pretrain_cfg(3, 2);
    let run = |threads: usize, seed: u64| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pretraining(&ds, &m, &cfg, seed, None).unwrap())
    };
    let a = run(1, 9);
    let b = run(2, 9);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
    let c = run(1, 10);
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn single_view_pretraining_renders_top_down() {
    let ds = data(3);
    let out = run_pretraining(&ds, &model(), &pretrain_cfg(1, 1), 0, None).unwrap();
    assert_eq!(out.view_poses.len(), 3);
    for poses in out.view_poses.values() {
        assert_eq!(poses.len(), 1);
        assert!((poses[0].elevation - 90.0).abs() < 1e-12);
    }
    let multi = run_pretraining(&ds, &model(), &pretrain_cfg(1, 3), 0, None).unwrap();
    assert!(multi.view_poses.values().all(|p| p.len() == 3 && p.iter().all(|v| v.elevation < 90.0)));
}

#[test]
fn pretrained_and_scratch_differ_only_in_the_scene_encoder() {
    let ds = data(4);
    let m = model();
    let pre = run_pretraining(&ds, &m, &pretrain_cfg(2, 2), 1, None).unwrap().checkpoint;
    let with = finetune_vqa(&ds, Some(&pre), &m, &vqa(), &finetune_cfg(1), 4).unwrap();
    let without = finetune_vqa(&ds, None, &m, &vqa(), &finetune_cfg(1), 4).unwrap();
    assert_eq!(with.init, Init::Pretrained);
    assert_eq!(without.init, Init::Scratch);

    let (a, b) = (with.initial_store.entries(), without.initial_store.entries());
    assert_eq!(a.len(), b.len());
    let mut scene = 0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.name, y.name);
        if x.name.starts_with("scene.") {
            scene += 1;
            assert_eq!(Some(&x.value), pre.tensor(&x.name), "{} not loaded", x.name);
        } else {
            assert_eq!(x.value, y.value, "{} depends on the initialisation", x.name);
        }
    }
    assert!(scene > 0);
    assert!(a.iter().zip(b).any(|(x, y)| x.name.starts_with("scene.") && x.value != y.value));
}

#[test]
fn vqa_finetuning_reduces_the_loss() {
    let ds = data(6);
    let out = finetune_vqa(&ds, None, &model(), &vqa(), &finetune_cfg(40), 2).unwrap();
    let totals: Vec<f64> = out.log.records.iter().map(|r| r.total).collect();
    assert_eq!(totals.len(), 40);
    assert!(totals.iter().all(|t| t.is_finite()));
    assert!(totals[39] < 0.8 * totals[0], "{totals:?}");
}

#[test]
fn sqa_finetuning_reduces_the_loss() {
    let ds = data(6);
    let out = finetune_sqa(&ds, None, &model(), &sqa(), &finetune_cfg(40), 2).unwrap();
    let totals: Vec<f64> = out.log.records.iter().map(|r| r.total).collect();
    assert_eq!(out.log.term_names, ["det", "ans", "pos", "rot"]);
    assert!(totals[39] < 0.8 * totals[0], "{totals:?}");
}
