//! Situated question answering: situation words attend to the scene, the
//! resulting tokens attend to the question, and two perceptrons predict the
//! answer and the agent's position and orientation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dual_encoder::{DualEncoder, TextEncoding, Vocabulary};
use crate::error::{Error, Result};
use crate::finetune::{
    encode_texts, init_rngs, init_scene_encoder, metadata_field, resolve_encoders, task_checkpoint, task_fingerprint,
    train, FinetuneConfig, FinetuneLog, Init, LossOutput,
};
use crate::metrics::{evaluate, EvalReport, ScoredItem};
use crate::nn::{DecoderLayer, Linear, Mlp};
use crate::pretrain::ModelConfig;
use crate::scene_data::{Dataset, Quat, SituationRecord, Vec3};
use crate::scene_encoder::{detection_loss_tape, SceneEncoder, SceneTokens};
use crate::tensor::Mat;
use crate::vqa_model::{top_k, AnswerVocabulary};

pub const SQA_KIND: &str = "sqa";
pub const SQA_TERMS: [&str; 4] = ["det", "ans", "pos", "rot"];
const QUAT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqaConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub situation_layers: usize,
    pub question_layers: usize,
    pub mlp_hidden: usize,
    /// Take the smaller rotation error over `q` and `-q`; `false` gives plain MSE.
    pub rotation_sign_invariant: bool,
}

impl Default for SqaConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            heads: 4,
            ffn_dim: 512,
            situation_layers: 1,
            question_layers: 1,
            mlp_hidden: 256,
            rotation_sign_invariant: true,
        }
    }
}

impl SqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("sqa hidden must be a positive multiple of heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SqaPrediction {
    pub answer_logits: Vec<f64>,
    pub position: Vec3,
    /// Unit quaternion `(x, y, z, w)` with `w ≥ 0`.
    pub rotation: Quat,
}

/// Normalizes a raw quaternion and flips it so that `w ≥ 0`.
pub fn normalize_quaternion(raw: &[f64]) -> Result<Quat> {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > QUAT_EPS) {
        return Err(Error::DegenerateRotation);
    }
    let s = if raw[3] < 0.0 { -1.0 / n } else { 1.0 / n };
    Ok([raw[0] * s, raw[1] * s, raw[2] * s, raw[3] * s])
}

#[derive(Clone, Debug)]
pub struct SqaModel {
    pub config: SqaConfig,
    pub scene: SceneEncoder,
    pub situation_proj: Linear,
    pub scene_proj: Linear,
    pub question_proj: Linear,
    pub situation_decoder: Vec<DecoderLayer>,
    pub question_decoder: Vec<DecoderLayer>,
    pub answer_head: Mlp,
    pub location_head: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct SqaVars {
    /// `1 × N_a`.
    pub answer: Var,
    /// `1 × 3`.
    pub position: Var,
    /// `1 × 4`, before normalization.
    pub raw_rotation: Var,
}

impl SqaModel {
    pub fn new(
        store: &mut ParamStore,
        model: &ModelConfig,
        config: SqaConfig,
        num_answers: usize,
        scene_rng: &mut ChaCha8Rng,
        head_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let scene = SceneEncoder::new(store, "scene", model.scene.clone(), scene_rng)?;
        let (h, w) = (config.hidden, model.encoders.text.word_dim);
        let r = head_rng;
        let decoder = |store: &mut ParamStore, name: &str, n: usize, r: &mut ChaCha8Rng| -> Vec<DecoderLayer> {
            (0..n)
                .map(|i| DecoderLayer::new(store, &format!("{name}.{i}"), h, config.heads, config.ffn_dim, r))
                .collect()
        };
        Ok(Self {
            situation_proj: Linear::new(store, "sqa.situation_proj", w, h, true, r),
            scene_proj: Linear::new(store, "sqa.scene_proj", model.scene.feature_dim, h, true, r),
            question_proj: Linear::new(store, "sqa.question_proj", w, h, true, r),
            situation_decoder: decoder(store, "sqa.situation_decoder", config.situation_layers, r),
            question_decoder: decoder(store, "sqa.question_decoder", config.question_layers, r),
            answer_head: Mlp::new(store, "sqa.answer_head", &[h, config.mlp_hidden, num_answers], r),
            location_head: Mlp::new(store, "sqa.location_head", &[h, config.mlp_hidden, 7], r),
            config,
            scene,
        })
    }

    /// Situation words (queries) attend to scene tokens (keys/values).
    pub fn situation_decode_tape(&self, t: &mut Tape, store: &ParamStore, situation: Var, scene_tokens: Var) -> Var {
        let mut x = self.situation_proj.forward(t, store, situation);
        let memory = self.scene_proj.forward(t, store, scene_tokens);
        for layer in &self.situation_decoder {
            x = layer.forward(t, store, x, memory);
        }
        x
    }

    /// Situation tokens attend to the question words; mean over the outputs.
    pub fn question_decode_tape(&self, t: &mut Tape, store: &ParamStore, situation_tokens: Var, question: Var) -> Var {
        let memory = self.question_proj.forward(t, store, question);
        let mut x = situation_tokens;
        for layer in &self.question_decoder {
            x = layer.forward(t, store, x, memory);
        }
        t.mean_rows(x)
    }

    pub fn heads_tape(&self, t: &mut Tape, store: &ParamStore, pooled: Var) -> SqaVars {
        let answer = self.answer_head.forward(t, store, pooled);
        let loc = self.location_head.forward(t, store, pooled);
        SqaVars {
            answer,
            position: t.slice_cols(loc, 0, 3),
            raw_rotation: t.slice_cols(loc, 3, 4),
        }
    }

    pub fn forward_tape(&self, t: &mut Tape, store: &ParamStore, scene_tokens: Var, situation: &TextEncoding, question: &TextEncoding) -> SqaVars {
        let s = t.constant(situation.word_embeddings.clone());
        let q = t.constant(question.word_embeddings.clone());
        let st = self.situation_decode_tape(t, store, s, scene_tokens);
        let pooled = self.question_decode_tape(t, store, st, q);
        self.heads_tape(t, store, pooled)
    }

    pub fn situation_decode(&self, store: &ParamStore, situation: &TextEncoding, scene: &SceneTokens) -> Mat {
        let mut t = Tape::new();
        let s = t.constant(situation.word_embeddings.clone());
        let c = t.constant(scene.object_tokens.clone());
        let out = self.situation_decode_tape(&mut t, store, s, c);
        t.value(out).clone()
    }

    pub fn question_decode(&self, store: &ParamStore, situation_tokens: &Mat, question: &TextEncoding) -> Vec<f64> {
        let mut t = Tape::new();
        let s = t.constant(situation_tokens.clone());
        let q = t.constant(question.word_embeddings.clone());
        let out = self.question_decode_tape(&mut t, store, s, q);
        t.value(out).as_slice().to_vec()
    }

    pub fn sqa_heads(&self, store: &ParamStore, pooled: &[f64]) -> Result<SqaPrediction> {
        let mut t = Tape::new();
        let p = t.constant(Mat::row_vector(pooled));
        let v = self.heads_tape(&mut t, store, p);
        let pos = t.value(v.position).as_slice();
        Ok(SqaPrediction {
            answer_logits: t.value(v.answer).as_slice().to_vec(),
            position: [pos[0], pos[1], pos[2]],
            rotation: normalize_quaternion(t.value(v.raw_rotation).as_slice())?,
        })
    }

    pub fn predict(&self, store: &ParamStore, scene: &SceneTokens, situation: &TextEncoding, question: &TextEncoding) -> Result<SqaPrediction> {
        let st = self.situation_decode(store, situation, scene);
        let pooled = self.question_decode(store, &st, question);
        self.sqa_heads(store, &pooled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SqaTargets {
    pub answers: Vec<f64>,
    pub position: Vec3,
    pub rotation: Quat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SqaLoss {
    pub total: f64,
    pub det: f64,
    pub ans: f64,
    pub pos: f64,
    pub rot: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SqaLossVars {
    pub total: Var,
    pub ans: Var,
    pub pos: Var,
    pub rot: Var,
}

fn mse_tape(t: &mut Tape, x: Var, target: &[f64]) -> Var {
    let c = t.constant(Mat::row_vector(target));
    let d = t.sub(x, c);
    let sq = t.square(d);
    t.mean_all(sq)
}

/// Rotation error of a unit quaternion node; with `sign_invariant` the
/// branch (`q` or `-q`) with the smaller error is used.
pub fn rotation_loss_tape(t: &mut Tape, rotation: Var, target: &Quat, sign_invariant: bool) -> Var {
    if !sign_invariant {
        return mse_tape(t, rotation, target);
    }
    let q = t.value(rotation).as_slice();
    let plus: f64 = q.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let minus: f64 = q.iter().zip(target).map(|(a, b)| (a + b) * (a + b)).sum();
    let signed = if minus < plus {
        target.map(|v| -v)
    } else {
        *target
    };
    mse_tape(t, rotation, &signed)
}

/// Normalizes the raw quaternion on the tape and fixes its sign to `w ≥ 0`.
pub fn normalized_rotation_tape(t: &mut Tape, raw: Var) -> Var {
    let n = t.l2_normalize_rows(raw, QUAT_EPS);
    if t.value(n).as_slice()[3] < 0.0 {
        t.scale(n, -1.0)
    } else {
        n
    }
}

pub fn sqa_head_loss_tape(t: &mut Tape, vars: &SqaVars, targets: &SqaTargets, sign_invariant: bool) -> SqaLossVars {
    let at: Vec<Option<f64>> = targets.answers.iter().map(|&v| Some(v)).collect();
    let ans = t.bce_with_logits(vars.answer, &at);
    let pos = mse_tape(t, vars.position, &targets.position);
    let q = normalized_rotation_tape(t, vars.raw_rotation);
    let rot = rotation_loss_tape(t, q, &targets.rotation, sign_invariant);
    let s = t.add(ans, pos);
    let total = t.add(s, rot);
    SqaLossVars { total, ans, pos, rot }
}

/// `L_sqa = L_det + L_ans + L_pos + L_rot` for a finished prediction.
pub fn sqa_loss(prediction: &SqaPrediction, targets: &SqaTargets, det: f64, sign_invariant: bool) -> SqaLoss {
    let mut t = Tape::new();
    let v = SqaVars {
        answer: t.constant(Mat::row_vector(&prediction.answer_logits)),
        position: t.constant(Mat::row_vector(&prediction.position)),
        raw_rotation: t.constant(Mat::row_vector(&prediction.rotation)),
    };
    let l = sqa_head_loss_tape(&mut t, &v, targets, sign_invariant);
    let (ans, pos, rot) = (t.value(l.ans).item(), t.value(l.pos).item(), t.value(l.rot).item());
    SqaLoss {
        total: det + ans + pos + rot,
        det,
        ans,
        pos,
        rot,
    }
}

pub fn answer_vocabulary(records: &[SituationRecord], min_count: usize) -> Result<AnswerVocabulary> {
    if records.is_empty() {
        return Err(Error::Config("answer vocabulary needs at least one record".into()));
    }
    AnswerVocabulary::build(records.iter().flat_map(|r| r.answers.iter().map(String::as_str)), min_count)
}

pub struct SqaArtifact {
    pub model_config: ModelConfig,
    pub model: SqaModel,
    pub store: ParamStore,
    pub answers: AnswerVocabulary,
    pub text: DualEncoder,
}

pub struct SqaTraining {
    pub checkpoint: Checkpoint,
    pub log: FinetuneLog,
    pub answers: AnswerVocabulary,
    pub init: Init,
    pub initial_store: ParamStore,
}

pub fn finetune_sqa(
    train_set: &Dataset,
    pretrained: Option<&Checkpoint>,
    model: &ModelConfig,
    sqa: &SqaConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<SqaTraining> {
    model.validate()?;
    cfg.validate()?;
    let answers = answer_vocabulary(&train_set.sqa, cfg.min_answer_count)?;
    let dual = resolve_encoders(train_set, model, pretrained)?;
    let (mut scene_rng, mut head_rng, mut data_rng) = init_rngs(seed);
    let mut store = ParamStore::new();
    let net = SqaModel::new(&mut store, model, *sqa, answers.len(), &mut scene_rng, &mut head_rng)?;
    let init = init_scene_encoder(&mut store, model, pretrained)?;
    let initial_store = store.clone();

    let index = train_set.scene_index();
    let sample_scene = train_set
        .sqa
        .iter()
        .map(|q| {
            index
                .get(q.scene_id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("question {} refers to unknown scene {}", q.question_id, q.scene_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let situations = encode_texts(&dual, &train_set.sqa.iter().map(|q| q.situation_text.as_str()).collect::<Vec<_>>())?;
    let questions = encode_texts(&dual, &train_set.sqa.iter().map(|q| q.question.as_str()).collect::<Vec<_>>())?;

    let log = train(
        train_set,
        &sample_scene,
        &net.scene,
        &mut store,
        cfg,
        &mut data_rng,
        &SQA_TERMS,
        |t, store, i, inst| {
            let record = &train_set.sqa[i];
            let (position, rotation) = match inst.transform {
                Some(tr) => tr.transform_situation(record),
                None => (record.position, record.rotation),
            };
            let targets = SqaTargets {
                answers: answers.multi_hot(&record.answers),
                position,
                rotation,
            };
            let f = net.scene.forward(t, store, inst.geometry);
            let det = detection_loss_tape(t, f.centers, f.sizes, f.objectness, f.class_logits, inst.annotations, &cfg.detection);
            let vars = net.forward_tape(t, store, f.object_tokens, &situations[i], &questions[i]);
            let heads = sqa_head_loss_tape(t, &vars, &targets, sqa.rotation_sign_invariant);
            let total = t.add(det.total, heads.total);
            LossOutput {
                total,
                terms: vec![det.total, heads.ans, heads.pos, heads.rot],
            }
        },
    )?;
    let checkpoint = task_checkpoint(SQA_KIND, model, sqa, answers.answers(), &dual, &store, cfg, init);
    Ok(SqaTraining {
        checkpoint,
        log,
        answers,
        init,
        initial_store,
    })
}

pub fn load_sqa(ck: &Checkpoint, expected: Option<&ModelConfig>) -> Result<SqaArtifact> {
    if ck.kind != SQA_KIND {
        return Err(Error::Load(format!("expected a {SQA_KIND} checkpoint, found {}", ck.kind)));
    }
    let model_config: ModelConfig = metadata_field(ck, "model")?;
    if expected.is_some_and(|m| *m != model_config) {
        return Err(Error::Load("checkpoint was trained with a different model config".into()));
    }
    let sqa: SqaConfig = metadata_field(ck, "task")?;
    let answer_list: Vec<String> = metadata_field(ck, "answers")?;
    if task_fingerprint(&model_config, &sqa, &answer_list) != ck.fingerprint {
        return Err(Error::Load("checkpoint fingerprint does not match its metadata".into()));
    }
    let answers = AnswerVocabulary::from_answers(answer_list)?;
    let tokens: Vec<String> = metadata_field(ck, "vocabulary")?;
    let mut text = DualEncoder::new(Vocabulary::from_tokens(tokens)?, model_config.encoders, 0);
    ck.load_into(&mut text.store, "text.")?;
    let (mut a, mut b, _) = init_rngs(0);
    let mut store = ParamStore::new();
    let model = SqaModel::new(&mut store, &model_config, sqa, answers.len(), &mut a, &mut b)?;
    ck.load_into(&mut store, "")?;
    Ok(SqaArtifact {
        model_config,
        model,
        store,
        answers,
        text,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqaPredictionRecord {
    pub question_id: String,
    pub answer: String,
    pub top10: Vec<String>,
    pub position: Vec3,
    pub rotation: Quat,
}

pub fn predict_sqa(artifact: &SqaArtifact, dataset: &Dataset) -> Result<Vec<SqaPredictionRecord>> {
    let enc = &artifact.model.scene;
    let scenes: BTreeMap<&str, SceneTokens> = dataset
        .scenes
        .par_iter()
        .map(|s| -> Result<(&str, SceneTokens)> {
            let geom = enc.geometry(&s.cloud)?;
            let mut t = Tape::new();
            let f = enc.forward(&mut t, &artifact.store, &geom);
            Ok((
                s.scene_id.as_str(),
                SceneTokens {
                    object_tokens: t.value(f.object_tokens).clone(),
                    global_token: t.value(f.global_token).as_slice().to_vec(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    dataset
        .sqa
        .par_iter()
        .map(|q| {
            let scene = scenes
                .get(q.scene_id.as_str())
                .ok_or_else(|| Error::Input(format!("question {} refers to unknown scene {}", q.question_id, q.scene_id)))?;
            let situation = artifact.text.encode_text(&q.situation_text)?;
            let question = artifact.text.encode_text(&q.question)?;
            let p = artifact.model.predict(&artifact.store, scene, &situation, &question)?;
            let top = top_k(&p.answer_logits, 10);
            Ok(SqaPredictionRecord {
                question_id: q.question_id.clone(),
                answer: artifact.answers.get(top[0]).to_string(),
                top10: top.iter().map(|&i| artifact.answers.get(i).to_string()).collect(),
                position: p.position,
                rotation: p.rotation,
            })
        })
        .collect()
}

pub fn evaluate_sqa(predictions: &[SqaPredictionRecord], dataset: &Dataset) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &SqaPredictionRecord> = predictions.iter().map(|p| (p.question_id.as_str(), p)).collect();
    let items = dataset
        .sqa
        .iter()
        .map(|q| {
            let p = by_id
                .get(q.question_id.as_str())
                .ok_or_else(|| Error::Input(format!("no prediction for question {}", q.question_id)))?;
            Ok(ScoredItem {
                answer: p.answer.clone(),
                ground_truths: q.answers.clone(),
                boxes: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, check_param_gradient};
    use crate::vqa_model::tests::tiny_model;
    use rand::SeedableRng;

    fn tiny_sqa() -> SqaConfig {
        SqaConfig {
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            situation_layers: 1,
            question_layers: 1,
            mlp_hidden: 8,
            rotation_sign_invariant: true,
        }
    }

    fn model(seed: u64) -> (ParamStore, SqaModel) {
        let (mut a, mut b, _) = init_rngs(seed);
        let mut store = ParamStore::new();
        let m = SqaModel::new(&mut store, &tiny_model(), tiny_sqa(), 4, &mut a, &mut b).unwrap();
        (store, m)
    }

    fn text(n: usize, seed: u64) -> TextEncoding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextEncoding {
            word_embeddings: Mat::uniform(n, 10, 1.0, &mut rng),
            pooled: vec![],
            eot_index: n - 1,
        }
    }

    fn scene(seed: u64) -> SceneTokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SceneTokens {
            object_tokens: Mat::uniform(6, 12, 1.0, &mut rng),
            global_token: vec![0.0; 12],
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn quaternion_normalization_rules() {
        assert_eq!(normalize_quaternion(&[0.0, 0.0, 0.0, -2.0]).unwrap(), [0.0, 0.0, 0.0, 1.0]);
        let q = normalize_quaternion(&[1.0, 2.0, -2.0, 0.5]).unwrap();
        assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(normalize_quaternion(&[0.0; 4]), Err(Error::DegenerateRotation)));
    }

    #[test]
    fn decoder_shapes_and_invariances() {
        let (store, m) = model(1);
        let (s, q, c) = (text(5, 2), text(4, 3), scene(4));
        let st = m.situation_decode(&store, &s, &c);
        assert_eq!(st.shape(), (5, 8));
        let perm = [5, 3, 1, 0, 2, 4];
        let permuted = SceneTokens {
            object_tokens: c.object_tokens.select_rows(&perm),
            global_token: c.global_token.clone(),
        };
        assert!(close(m.situation_decode(&store, &s, &permuted).as_slice(), st.as_slice(), 1e-9));
        let pooled = m.question_decode(&store, &st, &q);
        assert_eq!(pooled.len(), 8);
        let q_perm = TextEncoding {
            word_embeddings: q.word_embeddings.select_rows(&[2, 0, 3, 1]),
            ..q.clone()
        };
        assert!(close(&m.question_decode(&store, &st, &q_perm), &pooled, 1e-9));
        let p = m.predict(&store, &c, &s, &q).unwrap();
        assert_eq!((p.answer_logits.len(), p.position.len(), p.rotation.len()), (4, 3, 4));
        assert!((p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
        assert!(p.rotation[3] >= 0.0);
    }

    #[test]
    fn zero_residual_question_decoder_is_the_mean() {
        let (mut store, m) = model(1);
        for l in &m.question_decoder {
            l.zero_residual_branches(&mut store);
        }
        let st = Mat::from_rows(&[[1.0; 8], [3.0; 8]]);
        let pooled = m.question_decode(&store, &st, &text(3, 1));
        assert!(close(&pooled, &[2.0; 8], 1e-12));
    }

    #[test]
    fn loss_examples() {
        let target = SqaTargets {
            answers: vec![1.0, 0.0],
            position: [1.0, 2.0, 3.0],
            rotation: [0.0, 0.0, 0.6, 0.8],
        };
        let exact = SqaPrediction {
            answer_logits: vec![0.0, 0.0],
            position: target.position,
            rotation: target.rotation,
        };
        let l = sqa_loss(&exact, &target, 0.5, true);
        assert_eq!((l.pos, l.rot), (0.0, 0.0));
        assert_eq!(l.total, l.det + l.ans + l.pos + l.rot);
        let flipped = SqaPrediction {
            rotation: [0.0, 0.0, -0.6, -0.8],
            ..exact.clone()
        };
        let mut t = Tape::new();
        let q = t.constant(Mat::row_vector(&flipped.rotation));
        let r = rotation_loss_tape(&mut t, q, &target.rotation, true);
        assert_eq!(t.value(r).item(), 0.0);
        let raw = rotation_loss_tape(&mut t, q, &target.rotation, false);
        assert!((t.value(raw).item() - 1.0).abs() < 1e-12);
        let off = SqaPrediction {
            position: [2.0, 2.0, 3.0],
            ..exact
        };
        assert!((sqa_loss(&off, &target, 0.0, true).pos - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn position_and_rotation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = [0.1, -0.3, 0.5];
        let r = check_gradient(&Mat::uniform(1, 3, 1.0, &mut rng), 1e-6, |t, x| mse_tape(t, x, &target));
        assert!(r.max_rel_error < 1e-4, "pos {r:?}");
        let qt = normalize_quaternion(&[0.2, -0.4, 0.1, 0.9]).unwrap();
        for raw in [[0.3, -0.5, 0.2, 0.7], [-0.3, 0.5, -0.1, -0.8]] {
            for invariant in [true, false] {
                let r = check_gradient(&Mat::row_vector(&raw), 1e-6, |t, x| {
                    let q = normalized_rotation_tape(t, x);
                    rotation_loss_tape(t, q, &qt, invariant)
                });
                assert!(r.max_rel_error < 1e-4, "rot {raw:?} {invariant} {r:?}");
            }
        }
    }

    #[test]
    fn head_gradients_reach_parameters() {
        let (store, m) = model(2);
        let (s, q, c) = (text(3, 5), text(2, 6), scene(7));
        let targets = SqaTargets {
            answers: vec![0.0, 1.0, 0.0, 0.0],
            position: [0.5, -0.5, 0.0],
            rotation: [0.0, 0.0, 0.0, 1.0],
        };
        let probe = |t: &mut Tape, store: &ParamStore| {
            let tokens = t.constant(c.object_tokens.clone());
            let v = m.forward_tape(t, store, tokens, &s, &q);
            sqa_head_loss_tape(t, &v, &targets, true).total
        };
        for id in [m.location_head.layers[1].weight, m.situation_proj.weight, m.question_decoder[0].cross_attn.out.weight] {
            let r = check_param_gradient(&store, id, 1e-6, probe);
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
