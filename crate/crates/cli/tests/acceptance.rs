//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! for each and exits non-zero if any failed.
//!
//! Criteria can be selected by number: `cargo test -p multiclip-cli --test acceptance -- 1 6 7`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use multiclip::autograd::{ParamStore, Tape, Var};
use multiclip::checkpoint::Checkpoint;
use multiclip::dual_encoder::{fuse_multiview, ImageEncoding, TextEncoding};
use multiclip::finetune::init_rngs;
use multiclip::metrics::{bleu_n, box_iou, cider, em_at_1, rouge_l, CiderCorpus};
use multiclip::pretrain::{
    contrastive_loss, contrastive_loss_tape, cosine_alignment_loss, cosine_alignment_loss_tape, export_embeddings,
    intra_inter_cosine, load_encoders, pretrain_loss, render_scene, run_pretraining, AlignmentBatch, LossBreakdown,
    LossConfig,
};
use multiclip::renderer::{render_view, scene_poses};
use multiclip::scene_data::augment::{rotate, rotation_matrix, translate};
use multiclip::scene_data::{AxisAlignedBox, Dataset, ObjectAnnotation, Split};
use multiclip::scene_encoder::{detection_loss_tape, DetectionLossConfig, SceneEncoder, SceneTokens};
use multiclip::sqa_model::{
    evaluate_sqa, finetune_sqa, load_sqa, predict_sqa, sqa_head_loss_tape, SqaModel, SqaTargets, SqaVars,
};
use multiclip::tensor::Mat;
use multiclip::vqa_model::{
    evaluate_vqa, finetune_vqa, load_vqa, predict_vqa, vqa_head_loss_tape, PredictionVars, VqaModel, VqaTargets,
};
use multiclip_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");
const SMOKE: &str = include_str!("../../../configs/smoke.toml");

/// Outcome of one criterion: pass flag plus a one-line summary of the measured values.
struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

/// Pre-training shared by criteria 4 and 5.
struct Shared {
    config: ExperimentConfig,
    train: Dataset,
    checkpoint: Option<(Checkpoint, Duration)>,
}

impl Shared {
    fn new() -> Self {
        let config = ExperimentConfig::from_toml(DESK).expect("desk config");
        let train = config.data.synthesize(Split::Train).expect("train split");
        Self {
            config,
            train,
            checkpoint: None,
        }
    }

    fn pretrained(&mut self) -> (Checkpoint, Duration) {
        if self.checkpoint.is_none() {
            let t0 = Instant::now();
            let out = single_core(|| run_pretraining(&self.train, &self.config.model, &self.config.pretrain, self.config.seed, None))
                .expect("pre-training");
            self.checkpoint = Some((out.checkpoint, t0.elapsed()));
        }
        self.checkpoint.clone().unwrap()
    }
}

fn single_core<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let shared = std::cell::RefCell::new(Shared::new());
    type Check<'a> = Box<dyn FnMut() -> Verdict + 'a>;
    let mut failures = 0;
    let mut checks: Vec<(usize, &str, Check)> = vec![
        (1, "contrastive-loss oracles", Box::new(criterion_1)),
        (2, "gradient verification", Box::new(criterion_2)),
        (3, "L_pre composition and ablation toggles", Box::new(criterion_3)),
        (4, "alignment sanity", Box::new(|| criterion_4(&mut shared.borrow_mut()))),
        (5, "pre-training benefit", Box::new(|| criterion_5(&mut shared.borrow_mut()))),
        (6, "metric oracles", Box::new(criterion_6)),
        (7, "structural invariants", Box::new(criterion_7)),
        (8, "pipeline determinism", Box::new(criterion_8)),
    ];
    for (n, name, check) in checks.iter_mut() {
        if !wanted(*n) {
            continue;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.passed { "PASS" } else { "FAIL" };
        if !v.passed {
            failures += 1;
        }
        println!("[{status}] criterion {n}: {name} ({:.1} s): {}", t0.elapsed().as_secs_f64(), v.detail);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Contrastive-loss oracles

fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(b, d);
    for r in 0..b {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for (c, x) in v.iter().enumerate() {
            m.as_mut_slice()[r * d + c] = x / n;
        }
    }
    m
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = unit_rows(1, 6, &mut rng);
    let b1 = contrastive_loss(&one, &unit_rows(1, 6, &mut rng), 0.07).unwrap();

    let same = Mat::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]);
    let uniform = contrastive_loss(&same, &same, 0.07).unwrap();
    let ident = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
    let identity = contrastive_loss(&ident, &ident, 1.0).unwrap();
    let identity_expected = (1.0 + (-1.0f64).exp()).ln();

    let mut min_random = f64::INFINITY;
    for _ in 0..1000 {
        let b = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=8);
        let tau = rng.gen_range(0.01..1.0);
        let l = contrastive_loss(&unit_rows(b, d, &mut rng), &unit_rows(b, d, &mut rng), tau).unwrap();
        min_random = min_random.min(l);
    }
    let elapsed = t0.elapsed();
    let passed = b1 == 0.0
        && (uniform - 4f64.ln()).abs() <= 1e-9
        && (identity - identity_expected).abs() <= 1e-9
        && min_random >= 0.0
        && elapsed < Duration::from_secs(1);
    verdict(
        passed,
        format!(
            "B=1 {b1:e}; uniform B=4 err {:.1e}; identity err {:.1e}; min over 1000 random {min_random:.3e}; {:.3} s",
            (uniform - 4f64.ln()).abs(),
            (identity - identity_expected).abs(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradient verification, with its own central-difference code

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// differences of step `h`; entries where both sides are below `floor` are
/// compared in absolute terms.
fn max_rel_error(x: &Mat, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-7;
    let mut t = Tape::new();
    let v = t.input(x.clone());
    let out = f(&mut t, v);
    let grads = t.backward(out);
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));
    let value = |m: &Mat| {
        let mut t = Tape::new();
        let v = t.input(m.clone());
        let o = f(&mut t, v);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[k] += H;
        let mut minus = x.clone();
        minus.as_mut_slice()[k] -= H;
        let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
        let a = analytic.as_slice()[k];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < FLOOR { (a - numeric).abs() } else { (a - numeric).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

fn annotation(instance_id: u32, class_id: usize, center: [f64; 3], size: [f64; 3]) -> ObjectAnnotation {
    ObjectAnnotation {
        instance_id,
        class_id,
        bbox: AxisAlignedBox::new(center, size).unwrap(),
    }
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let anchors = unit_rows(3, 4, &mut rng);
    let positives = unit_rows(3, 4, &mut rng);
    let (a2, p2) = (anchors.clone(), positives.clone());
    errors.push((
        "contrastive",
        max_rel_error(&anchors, &move |t, x| {
            let p = t.constant(p2.clone());
            contrastive_loss_tape(t, x, p, 0.5)
        })
        .max(max_rel_error(&positives, &move |t, x| {
            let a = t.constant(a2.clone());
            contrastive_loss_tape(t, a, x, 0.5)
        })),
    ));
    let p3 = positives.clone();
    errors.push((
        "cosine",
        max_rel_error(&anchors, &move |t, x| {
            let p = t.constant(p3.clone());
            cosine_alignment_loss_tape(t, x, p)
        }),
    ));

    let anns = vec![
        annotation(0, 1, [0.0, 0.0, 0.2], [0.4, 0.5, 0.3]),
        annotation(1, 0, [1.0, 1.0, 0.1], [0.3, 0.3, 0.3]),
    ];
    let det_cfg = DetectionLossConfig::default();
    // Columns: center(3), size(3), objectness(1), class logits(2).
    let proposals = Mat::from_rows(&[
        [0.1, -0.05, 0.25, 0.5, 0.4, 0.35, 0.3, 0.2, -0.1],
        [3.0, 3.0, 0.0, 0.2, 0.2, 0.2, -0.4, 0.5, 0.1],
        [0.93, 1.02, 0.15, 0.31, 0.27, 0.36, 1.1, -0.3, 0.7],
    ]);
    errors.push((
        "L_det",
        max_rel_error(&proposals, &move |t, v| {
            let c = t.slice_cols(v, 0, 3);
            let s = t.slice_cols(v, 3, 3);
            let o = t.slice_cols(v, 6, 1);
            let k = t.slice_cols(v, 7, 2);
            detection_loss_tape(t, c, s, o, k, &anns, &det_cfg).total
        }),
    ));

    let vqa_targets = VqaTargets {
        answers: vec![1.0, 0.0, 1.0, 0.0],
        object_classes: vec![0.0, 1.0, 1.0],
        localization: Some(2),
    };
    let answer_logits = Mat::uniform(1, 4, 2.0, &mut rng);
    let class_logits = Mat::uniform(1, 3, 2.0, &mut rng);
    let loc_logits = Mat::uniform(5, 1, 2.0, &mut rng);
    type Pick = fn(&multiclip::vqa_model::VqaLossVars) -> Var;
    let vqa_terms: [(&str, usize, Pick); 3] = [
        ("L_ans", 0, |l| l.ans),
        ("L_obj", 1, |l| l.obj),
        ("L_loc", 2, |l| l.loc),
    ];
    for (name, slot, pick) in vqa_terms {
        let inputs = [answer_logits.clone(), class_logits.clone(), loc_logits.clone()];
        let targets = vqa_targets.clone();
        let x = inputs[slot].clone();
        errors.push((
            name,
            max_rel_error(&x, &move |t, v| {
                let mut vars: Vec<Var> = inputs.iter().map(|m| t.constant(m.clone())).collect();
                vars[slot] = v;
                let pred = PredictionVars {
                    answer: vars[0],
                    object_class: vars[1],
                    localization: vars[2],
                };
                pick(&vqa_head_loss_tape(t, &pred, &targets))
            }),
        ));
    }

    let sqa_targets = SqaTargets {
        answers: vec![0.0, 1.0, 0.0],
        position: [0.1, -0.3, 0.5],
        rotation: [0.2, -0.4, 0.1, 0.9].map(|v: f64| v / (0.04f64 + 0.16 + 0.01 + 0.81).sqrt()),
    };
    let sqa_inputs = [
        Mat::uniform(1, 3, 1.0, &mut rng),
        Mat::uniform(1, 3, 1.0, &mut rng),
        Mat::row_vector(&[0.3, -0.5, 0.2, 0.7]),
        Mat::row_vector(&[-0.3, 0.5, -0.1, -0.8]),
    ];
    let mut sqa_case = |name: &'static str, slot: usize, raw_rotation: usize, invariant: bool, pos: bool| {
        let inputs = sqa_inputs.clone();
        let targets = sqa_targets.clone();
        let x = inputs[slot].clone();
        let err = max_rel_error(&x, &move |t, v| {
            let mut vars: Vec<Var> = inputs.iter().map(|m| t.constant(m.clone())).collect();
            vars[slot] = v;
            let sv = SqaVars {
                answer: vars[0],
                position: vars[1],
                raw_rotation: vars[raw_rotation],
            };
            let l = sqa_head_loss_tape(t, &sv, &targets, invariant);
            if pos {
                l.pos
            } else {
                l.rot
            }
        });
        errors.push((name, err));
    };
    sqa_case("L_pos", 1, 2, true, true);
    for (raw, invariant) in [(2, true), (3, true), (2, false), (3, false)] {
        sqa_case("L_rot", raw, raw, invariant, false);
    }

    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for (n, e) in &errors {
        let w = worst.entry(n).or_insert(0.0);
        *w = w.max(*e);
    }
    let elapsed = t0.elapsed();
    let passed = worst.values().all(|e| *e < 1e-4) && worst.len() == 8 && elapsed < Duration::from_secs(30);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(passed, format!("max rel err: {}; {:.2} s", parts.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 3. L_pre composition

/// Mean over rows of `logsumexp_j(s_ij) - s_ii` written out directly.
fn contrastive_oracle(a: &Mat, p: &Mat, tau: f64) -> f64 {
    let (b, d) = (a.rows(), a.cols());
    let mut total = 0.0;
    for i in 0..b {
        let s: Vec<f64> = (0..b)
            .map(|j| (0..d).map(|k| a.as_slice()[i * d + k] * p.as_slice()[j * d + k]).sum::<f64>() / tau)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    total / b as f64
}

fn fused(views: &[Vec<f64>]) -> Vec<f64> {
    let enc: Vec<ImageEncoding> = views.iter().map(|v| ImageEncoding { embedding: v.clone() }).collect();
    fuse_multiview(&enc).unwrap().embedding
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, d) = (4, 8);
    let z_scene = unit_rows(b, d, &mut rng);
    let z_text = unit_rows(b, d, &mut rng);
    let views: Vec<Mat> = (0..5).map(|_| unit_rows(b, d, &mut rng)).collect();
    let image_rows = |k: usize| -> Mat {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|i| fused(&views[..k].iter().map(|v| v.row(i).to_vec()).collect::<Vec<_>>()))
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Mat::from_rows(&refs)
    };
    let multi = AlignmentBatch::new(z_scene.clone(), image_rows(5), z_text.clone()).unwrap();
    let single = AlignmentBatch::new(z_scene.clone(), image_rows(1), z_text.clone()).unwrap();
    let det = 0.8125;
    let base = LossConfig::default();
    let full = pretrain_loss(&multi, det, &base).unwrap();

    let text_oracle = contrastive_oracle(&z_scene, &z_text, base.tau);
    let image_oracle = contrastive_oracle(&z_scene, &multi.z_image, base.tau);
    let composed = det + 0.5 * text_oracle + 0.5 * image_oracle;
    let composition_err = (full.total - composed).abs();
    let mut ok = base.alpha == 0.5 && base.beta == 0.5 && composition_err <= 1e-12;
    ok &= (full.text - text_oracle).abs() <= 1e-12 && (full.image - image_oracle).abs() <= 1e-12;

    // Which breakdown fields differ from the full objective.
    let changed = |other: &LossBreakdown| -> Vec<&'static str> {
        let mut v = Vec::new();
        if other.det != full.det {
            v.push("det");
        }
        if other.text != full.text {
            v.push("text");
        }
        if other.image != full.image {
            v.push("image");
        }
        v
    };
    let single_view = pretrain_loss(&single, det, &base).unwrap();
    let cosine_cfg = LossConfig {
        use_cosine_variant: true,
        ..base
    };
    let cosine = pretrain_loss(&multi, det, &cosine_cfg).unwrap();
    let no_text = pretrain_loss(&multi, det, &LossConfig { use_text_loss: false, ..base }).unwrap();
    let no_image = pretrain_loss(&multi, det, &LossConfig { use_image_loss: false, ..base }).unwrap();

    ok &= changed(&single_view) == ["image"];
    ok &= changed(&cosine) == ["text", "image"]
        && cosine.text == cosine_alignment_loss(&z_scene, &z_text).unwrap()
        && cosine.image == cosine_alignment_loss(&z_scene, &multi.z_image).unwrap();
    ok &= changed(&no_text) == ["text"] && no_text.text == 0.0 && no_text.total == det + 0.5 * full.image;
    ok &= changed(&no_image) == ["image"] && no_image.image == 0.0 && no_image.total == det + 0.5 * full.text;

    // The single-view ablation renders the top-down view.
    let cfg = ExperimentConfig::from_toml(SMOKE).unwrap();
    let scene = cfg.data.synthesize(Split::Train).unwrap().scenes.remove(0);
    let top = render_scene(&scene, 1, &cfg.model.render).unwrap();
    ok &= top.len() == 1 && top[0].pose.elevation == 90.0;

    verdict(
        ok,
        format!(
            "composition err {composition_err:.1e}; changed terms: single-view {:?}, cosine {:?}, w/o L_text {:?}, w/o L_image {:?}; single view elevation {}",
            changed(&single_view),
            changed(&cosine),
            changed(&no_text),
            changed(&no_image),
            top[0].pose.elevation
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Alignment sanity

fn criterion_4(shared: &mut Shared) -> Verdict {
    let (ck, elapsed) = shared.pretrained();
    let cfg = &shared.config;
    let train = &shared.train;
    let types: std::collections::BTreeSet<&str> = train.scenes.iter().map(|s| s.scene_type.as_str()).collect();
    let rows = export_embeddings(train, &ck, &cfg.model.scene).unwrap();
    let dual = load_encoders(&ck, &cfg.model.encoders).unwrap();

    let mut captions: Vec<(&str, Vec<f64>)> = Vec::new();
    for s in &train.scenes {
        for c in &s.captions {
            captions.push((c, dual.encode_text(c).unwrap().pooled));
        }
    }
    let hits = train
        .scenes
        .iter()
        .zip(&rows)
        .filter(|(scene, row)| {
            let mut best = (f64::NEG_INFINITY, "");
            for (text, e) in &captions {
                let v: f64 = row.vector.iter().zip(e).map(|(a, b)| a * b).sum();
                if v > best.0 {
                    best = (v, text);
                }
            }
            scene.captions.iter().any(|c| c == best.1)
        })
        .count();
    let accuracy = hits as f64 / train.scenes.len() as f64;
    let (intra, inter) = intra_inter_cosine(&rows);
    let (intra, inter) = (intra.unwrap_or(f64::NAN), inter.unwrap_or(f64::NAN));
    let passed = train.scenes.len() == 16
        && types.len() == 2
        && cfg.pretrain.iterations <= 1000
        && accuracy >= 0.9
        && intra > inter
        && elapsed < Duration::from_secs(300);
    verdict(
        passed,
        format!(
            "{} scenes, {} types, {} iterations; scene->text top-1 {:.3}; intra-type cosine {intra:.3} vs inter-type {inter:.3}; pre-training {:.1} s on one core",
            train.scenes.len(),
            types.len(),
            cfg.pretrain.iterations,
            accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Pre-training benefit

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn criterion_5(shared: &mut Shared) -> Verdict {
    let (ck, pretrain_time) = shared.pretrained();
    let mut cfg = shared.config.clone();
    // Only the task heads are fine-tuned; the scene encoder keeps its
    // pre-trained or random weights.
    cfg.finetune_vqa.train_scene_encoder = false;
    cfg.finetune_sqa.train_scene_encoder = false;
    let train = shared.train.clone();
    let test = cfg.data.synthesize(Split::Test).unwrap();
    let t0 = Instant::now();
    let mut em: BTreeMap<(&str, bool), Vec<f64>> = BTreeMap::new();
    single_core(|| {
        for seed in 0..3u64 {
            for pretrained in [true, false] {
                let init = pretrained.then_some(&ck);
                let vqa = finetune_vqa(&train, init, &cfg.model, &cfg.vqa, &cfg.finetune_vqa, seed).unwrap();
                let artifact = load_vqa(&vqa.checkpoint, Some(&cfg.model)).unwrap();
                let report = evaluate_vqa(&predict_vqa(&artifact, &test).unwrap(), &test).unwrap();
                em.entry(("VQA", pretrained)).or_default().push(report.em_at_1);

                let sqa = finetune_sqa(&train, init, &cfg.model, &cfg.sqa, &cfg.finetune_sqa, seed).unwrap();
                let artifact = load_sqa(&sqa.checkpoint, Some(&cfg.model)).unwrap();
                let report = evaluate_sqa(&predict_sqa(&artifact, &test).unwrap(), &test).unwrap();
                em.entry(("SQA", pretrained)).or_default().push(report.em_at_1);
            }
        }
    });
    let finetune_time = t0.elapsed();
    let mut passed = finetune_time + pretrain_time < Duration::from_secs(900);
    let mut parts = Vec::new();
    for task in ["VQA", "SQA"] {
        let a = median(em[&(task, true)].clone());
        let b = median(em[&(task, false)].clone());
        passed &= a >= b;
        parts.push(format!(
            "{task} median EM@1 pre-trained {a:.3} {:?} vs scratch {b:.3} {:?}",
            em[&(task, true)].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            em[&(task, false)].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
    }
    verdict(
        passed,
        format!(
            "{}; heads only, {} steps per run, held-out {} scenes; fine-tuning {:.0} s + shared pre-training {:.0} s",
            parts.join("; "),
            cfg.finetune_vqa.max_steps.unwrap_or(0),
            test.scenes.len(),
            finetune_time.as_secs_f64(),
            pretrain_time.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Metric oracles, brute force over token lists

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Occurrences of `gram` in `sentence`, by scanning every start position.
fn occurrences(sentence: &[String], gram: &[String]) -> usize {
    if gram.len() > sentence.len() {
        return 0;
    }
    (0..=sentence.len() - gram.len())
        .filter(|&i| sentence[i..i + gram.len()] == *gram)
        .count()
}

fn distinct_grams(sentence: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    if sentence.len() >= n {
        for i in 0..=sentence.len() - n {
            let g = sentence[i..i + n].to_vec();
            if !out.contains(&g) {
                out.push(g);
            }
        }
    }
    out
}

fn bleu_oracle(cand: &str, refs: &[String], n: usize) -> f64 {
    let c = toks(cand);
    let rs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
    if c.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let total = if c.len() >= k { c.len() - k + 1 } else { 0 };
        let matched: usize = distinct_grams(&c, k)
            .iter()
            .map(|g| occurrences(&c, g).min(rs.iter().map(|r| occurrences(r, g)).max().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if k == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_p += p.ln() / n as f64;
    }
    // Closest reference length, preferring the shorter one on ties.
    let mut r = rs[0].len();
    for x in &rs {
        let (dx, dr) = ((x.len() as i64 - c.len() as i64).abs(), (r as i64 - c.len() as i64).abs());
        if dx < dr || (dx == dr && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c.len() > r { 1.0 } else { (1.0 - r as f64 / c.len() as f64).exp() };
    bp * log_p.exp()
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|o| o == *s))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

fn rouge_oracle(cand: &str, refs: &[String]) -> f64 {
    let c = toks(cand);
    let beta2: f64 = 1.2 * 1.2;
    refs.iter()
        .map(|r| {
            let r = toks(r);
            let l = lcs_brute(&c, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .fold(0.0, f64::max)
}

struct CiderOracle {
    items: Vec<Vec<Vec<String>>>,
}

impl CiderOracle {
    fn df(&self, g: &[String]) -> usize {
        self.items
            .iter()
            .filter(|refs| refs.iter().any(|r| occurrences(r, g) > 0))
            .count()
    }

    fn vector(&self, s: &[String], n: usize) -> Vec<(Vec<String>, f64)> {
        let total = if s.len() >= n { s.len() - n + 1 } else { 0 };
        let big_n = self.items.len() as f64;
        distinct_grams(s, n)
            .into_iter()
            .map(|g| {
                let tf = occurrences(s, &g) as f64 / total as f64;
                let idf = (big_n / self.df(&g).max(1) as f64).ln();
                (g, tf * idf)
            })
            .collect()
    }

    fn score(&self, cand: &str, refs: &[String]) -> f64 {
        let c = toks(cand);
        let mut total = 0.0;
        for n in 1..=4 {
            let vc = self.vector(&c, n);
            let mut sum = 0.0;
            for r in refs {
                let vr = self.vector(&toks(r), n);
                let dot: f64 = vc
                    .iter()
                    .map(|(g, a)| vr.iter().filter(|(h, _)| h == g).map(|(_, b)| a * b).sum::<f64>())
                    .sum();
                let nc = vc.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                let nr = vr.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    sum += dot / (nc * nr);
                }
            }
            total += sum / refs.len() as f64;
        }
        10.0 * total / 4.0
    }
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 8] = ["the", "red", "box", "is", "next", "to", "Blue", "chair"];
    let len = rng.gen_range(1..=8);
    (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(if rng.gen_bool(0.2) { "  " } else { " " })
}

fn criterion_6() -> Verdict {
    let b = |c: [f64; 3], s: [f64; 3]| AxisAlignedBox::new(c, s).unwrap();
    let unit = b([0.5, 0.5, 0.5], [1.0, 1.0, 1.0]);
    let iou_ok = box_iou(&unit, &unit) == 1.0
        && box_iou(&unit, &b([3.0, 3.0, 3.0], [1.0, 1.0, 1.0])) == 0.0
        && box_iou(&b([1.0, 0.5, 0.5], [2.0, 1.0, 1.0]), &b([2.0, 0.5, 0.5], [2.0, 1.0, 1.0])) == 1.0 / 3.0;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs: Vec<(String, Vec<String>)> = (0..200)
        .map(|_| {
            let refs = (0..rng.gen_range(1..=3)).map(|_| random_sentence(&mut rng)).collect();
            (random_sentence(&mut rng), refs)
        })
        .collect();
    let mut worst = [0.0f64; 3];
    for (cand, refs) in &pairs {
        for n in 1..=4 {
            worst[0] = worst[0].max((bleu_n(cand, refs, n).unwrap() - bleu_oracle(cand, refs, n)).abs());
        }
        worst[1] = worst[1].max((rouge_l(cand, refs) - rouge_oracle(cand, refs)).abs());
    }
    let reference_sets: Vec<Vec<String>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let oracle = CiderOracle {
        items: reference_sets.iter().map(|refs| refs.iter().map(|r| toks(r)).collect()).collect(),
    };
    let corpus = CiderCorpus::new(&reference_sets).unwrap();
    let mut oracle_sum = 0.0;
    for (cand, refs) in &pairs {
        let o = oracle.score(cand, refs);
        oracle_sum += o;
        worst[2] = worst[2].max((corpus.score(cand, refs) - o).abs());
    }
    let cands: Vec<String> = pairs.iter().map(|(c, _)| c.clone()).collect();
    worst[2] = worst[2].max((cider(&cands, &reference_sets).unwrap() - oracle_sum / pairs.len() as f64).abs());

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let em_ok = em_at_1("  Blue  ", &s(&["blue"])) == 1.0
        && em_at_1("BLUE   Cylinder", &s(&["blue cylinder"])) == 1.0
        && em_at_1("two", &s(&["2", "two"])) == 1.0
        && em_at_1("blue", &s(&["blue cylinder"])) == 0.0
        && em_at_1("blue", &[]) == 0.0;

    let passed = iou_ok && em_ok && worst.iter().all(|w| *w <= 1e-9);
    verdict(
        passed,
        format!(
            "box_iou hand cases {}; max |diff| vs brute force on 200 pairs: BLEU-1..4 {:.1e}, ROUGE-L {:.1e}, CIDEr {:.1e}; em_at_1 normalization {}",
            if iou_ok { "exact" } else { "wrong" },
            worst[0],
            worst[1],
            worst[2],
            if em_ok { "ok" } else { "wrong" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Structural invariants

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_7() -> Verdict {
    let cfg = ExperimentConfig::from_toml(SMOKE).unwrap();
    let model = &cfg.model;
    let scene = cfg.data.synthesize(Split::Train).unwrap().scenes.remove(0);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };

    // Scene encoder: object tokens follow a permutation of the proposals,
    // the global token and the embedding do not move.
    let (mut scene_rng, mut head_rng, _) = init_rngs(5);
    let mut store = ParamStore::new();
    let enc = SceneEncoder::new(&mut store, "scene", model.scene.clone(), &mut scene_rng).unwrap();
    let props = enc.propose_objects(&store, &scene.cloud).unwrap();
    let m = props.len();
    let perm: Vec<usize> = (0..m).rev().collect();
    let a = enc.refine_with_transformer(&store, &props);
    let permuted: Vec<_> = perm.iter().map(|&i| props[i].clone()).collect();
    let b = enc.refine_with_transformer(&store, &permuted);
    for (k, &i) in perm.iter().enumerate() {
        note("scene tokens", max_diff(b.object_tokens.row(k), a.object_tokens.row(i)));
    }
    note("scene global", max_diff(&a.global_token, &b.global_token));
    let za = enc.project_to_clip_space(&store, &a.global_token).unwrap().vector;
    let zb = enc.project_to_clip_space(&store, &b.global_token).unwrap().vector;
    note("scene global", max_diff(&za, &zb));

    let tokens = SceneTokens {
        object_tokens: a.object_tokens.clone(),
        global_token: a.global_token.clone(),
    };
    let shuffled = SceneTokens {
        object_tokens: tokens.object_tokens.select_rows(&perm),
        global_token: tokens.global_token.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let word_dim = model.encoders.text.word_dim;
    let text = |n: usize, rng: &mut ChaCha8Rng| TextEncoding {
        word_embeddings: Mat::uniform(n, word_dim, 1.0, rng),
        pooled: Vec::new(),
        eot_index: n - 1,
    };

    // VQA: answers invariant, localization logits equivariant.
    let mut vqa_store = ParamStore::new();
    let vqa = VqaModel::new(&mut vqa_store, model, cfg.vqa, 5, &mut scene_rng, &mut head_rng).unwrap();
    let q = text(6, &mut rng);
    let pa = vqa.predict(&vqa_store, &vqa.fuse(&vqa_store, &q, &tokens));
    let pb = vqa.predict(&vqa_store, &vqa.fuse(&vqa_store, &q, &shuffled));
    note("vqa answers", max_diff(&pa.answer_logits, &pb.answer_logits));
    note("vqa answers", max_diff(&pa.object_class_logits, &pb.object_class_logits));
    let permuted_loc: Vec<f64> = perm.iter().map(|&i| pa.localization_logits[i]).collect();
    note("vqa localization", max_diff(&pb.localization_logits, &permuted_loc));

    // SQA: every output invariant.
    let (mut s_rng, mut h_rng, _) = init_rngs(8);
    let mut sqa_store = ParamStore::new();
    let sqa = SqaModel::new(&mut sqa_store, model, cfg.sqa, 4, &mut s_rng, &mut h_rng).unwrap();
    let (situation, question) = (text(7, &mut rng), text(5, &mut rng));
    let sa = sqa.predict(&sqa_store, &tokens, &situation, &question).unwrap();
    let sb = sqa.predict(&sqa_store, &shuffled, &situation, &question).unwrap();
    note("sqa outputs", max_diff(&sa.answer_logits, &sb.answer_logits));
    note("sqa outputs", max_diff(&sa.position, &sb.position));
    note("sqa outputs", max_diff(&sa.rotation, &sb.rotation));

    // Multi-view fusion ignores view order.
    let views: Vec<Vec<f64>> = (0..5).map(|_| unit_rows(1, 8, &mut rng).row(0).to_vec()).collect();
    let reordered: Vec<Vec<f64>> = [3, 1, 4, 0, 2].iter().map(|&i| views[i].clone()).collect();
    note("multiview fusion", max_diff(&fused(&views), &fused(&reordered)));

    let invariants_ok = worst.values().all(|v| *v <= 1e-5);

    // Renderer: rotating the cloud by 72 degrees about z and rendering at
    // azimuth 0 matches the original at the next azimuth.
    let c = scene.cloud.centroid();
    let centered = translate(&scene.cloud, [-c[0], -c[1], 0.0]);
    let render = multiclip::renderer::RenderConfig {
        width: 96,
        height: 96,
        ..Default::default()
    };
    let rotated = rotate(&centered, &rotation_matrix([0.0, 0.0, 72f64.to_radians()]));
    let ra = render_view(&rotated, &scene_poses(&rotated, 5, &render).unwrap()[0], &render);
    let rb = render_view(&centered, &scene_poses(&centered, 5, &render).unwrap()[1], &render);
    let render_diff = ra.max_abs_diff(&rb);
    let passed = invariants_ok && render_diff <= 2.0 / 255.0;
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        passed,
        format!(
            "max deviation under permutation: {}; renderer 72 deg max pixel diff {:.4} (limit {:.4})",
            parts.join(", "),
            render_diff,
            2.0 / 255.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Determinism of the CLI pipeline

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_multiclip"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(root: &Path, config: &Path, jobs: &str) -> Result<(), String> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    run_cli(&["gen-data", "--config", &cfg, "--out", &p("data"), "--jobs", jobs])?;
    run_cli(&["pretrain", "--config", &cfg, "--data", &p("data"), "--out", &p("pretrain"), "--jobs", jobs])?;
    let ck = p("pretrain/pretrain.ckpt");
    for task in ["vqa", "sqa"] {
        run_cli(&[
            &format!("finetune-{task}"),
            "--config",
            &cfg,
            "--data",
            &p("data"),
            "--pretrained",
            &ck,
            "--out",
            &p(task),
            "--jobs",
            jobs,
        ])?;
        run_cli(&[
            &format!("eval-{task}"),
            "--checkpoint",
            &p(&format!("{task}/{task}.ckpt")),
            "--data",
            &p("data"),
            "--out",
            &p(&format!("eval-{task}")),
        ])?;
    }
    run_cli(&["embed", "--checkpoint", &ck, "--data", &p("data"), "--out", &p("embed")])?;
    run_cli(&["project", "--embeddings", &p("embed/embeddings.tsv"), "--out", &p("project")])?;
    Ok(())
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("smoke.toml");
    fs::write(&config, SMOKE).unwrap();
    let (a, b) = (tmp.path().join("run1"), tmp.path().join("run2"));
    if let Err(e) = pipeline(&a, &config, "1").and_then(|_| pipeline(&b, &config, "2")) {
        return verdict(false, format!("pipeline failed: {e}"));
    }
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let checkpoints = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    let reports = fa.keys().filter(|k| k.file_name().is_some_and(|n| n == "report.json")).count();
    verdict(
        differing.is_empty() && checkpoints >= 3 && reports == 2,
        format!(
            "{} files per run ({checkpoints} checkpoints, {reports} reports), runs with 1 and 2 worker threads; differing files: {:?}",
            fa.len(),
            differing
        ),
    )
}
