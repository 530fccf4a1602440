//! 3D visual question answering: question words and scene object tokens are
//! fused by a transformer encoder; heads predict the answer, the classes of
//! related objects and which proposal the question refers to.

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
use crate::metrics::{box_iou, evaluate, EvalReport, ScoredItem};
use crate::nn::{EncoderLayer, Linear};
use crate::pretrain::ModelConfig;
use crate::scene_data::{normalize_answer, AxisAlignedBox, Dataset, ObjectAnnotation, QARecord};
use crate::scene_encoder::{detection_loss_tape, SceneEncoder, SceneTokens};
use crate::tensor::Mat;

pub const VQA_KIND: &str = "vqa";
pub const VQA_TERMS: [&str; 4] = ["det", "obj", "ans", "loc"];

/// Candidate answers ordered by descending training frequency, then
/// lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn build<'a>(answers: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for a in answers {
            let a = normalize_answer(a);
            if !a.is_empty() {
                *counts.entry(a).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_answers(kept.into_iter().map(|(a, _)| a).collect())
    }

    pub fn from_records(records: &[QARecord], min_count: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("answer vocabulary needs at least one record".into()));
        }
        Self::build(records.iter().flat_map(|r| r.answers.iter().map(String::as_str)), min_count)
    }

    /// Uses `answers` as given; entries must be unique and normalized.
    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Config("answer vocabulary is empty".into()));
        }
        let mut index = BTreeMap::new();
        for (i, a) in answers.iter().enumerate() {
            if normalize_answer(a) != *a {
                return Err(Error::Load(format!("answer {a:?} is not normalized")));
            }
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Load(format!("duplicate answer {a:?}")));
            }
        }
        Ok(Self { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn get(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    /// Multi-hot target; answers outside the vocabulary are dropped.
    pub fn multi_hot(&self, answers: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        for a in answers {
            if let Some(i) = self.index_of(a) {
                v[i] = 1.0;
            }
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaConfig {
    pub hidden: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Proposals whose best IoU with the referred box stays below this
    /// floor give no localization target.
    pub iou_floor: f64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            fusion_layers: 2,
            heads: 4,
            ffn_dim: 512,
            iou_floor: 0.05,
        }
    }
}

impl VqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("vqa hidden must be a positive multiple of heads".into()));
        }
        Ok(())
    }
}

/// Values of the fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// `M × h`.
    pub scene_tokens_out: Mat,
    /// `N_q × h`.
    pub question_tokens_out: Mat,
    pub pooled_question: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaPrediction {
    pub localization_logits: Vec<f64>,
    pub answer_logits: Vec<f64>,
    pub object_class_logits: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub scene_out: Var,
    pub question_out: Var,
    /// `1 × h`.
    pub pooled: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `M × 1`.
    pub localization: Var,
    /// `1 × N_a`.
    pub answer: Var,
    /// `1 × num_classes`.
    pub object_class: Var,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub config: VqaConfig,
    pub scene: SceneEncoder,
    pub word_proj: Linear,
    pub scene_proj: Linear,
    pub fusion: Vec<EncoderLayer>,
    pub loc_head: Linear,
    pub answer_head: Linear,
    pub class_head: Linear,
}

impl VqaModel {
    pub fn new(
        store: &mut ParamStore,
        model: &ModelConfig,
        config: VqaConfig,
        num_answers: usize,
        scene_rng: &mut ChaCha8Rng,
        head_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let scene = SceneEncoder::new(store, "scene", model.scene.clone(), scene_rng)?;
        let h = config.hidden;
        let r = head_rng;
        Ok(Self {
            word_proj: Linear::new(store, "vqa.word_proj", model.encoders.text.word_dim, h, true, r),
            scene_proj: Linear::new(store, "vqa.scene_proj", model.scene.feature_dim, h, true, r),
            fusion: (0..config.fusion_layers)
                .map(|i| EncoderLayer::new(store, &format!("vqa.fusion.{i}"), h, config.heads, config.ffn_dim, r))
                .collect(),
            loc_head: Linear::new(store, "vqa.loc_head", h, 1, true, r),
            answer_head: Linear::new(store, "vqa.answer_head", h, num_answers, true, r),
            class_head: Linear::new(store, "vqa.class_head", h, model.scene.num_classes, true, r),
            config,
            scene,
        })
    }

    /// `[scene tokens; question tokens]` through the fusion layers. No
    /// positions are added to scene tokens.
    pub fn fuse_tape(&self, t: &mut Tape, store: &ParamStore, scene_tokens: Var, words: Var, eot_index: usize) -> FusionVars {
        let m = t.shape(scene_tokens).0;
        let nq = t.shape(words).0;
        let s = self.scene_proj.forward(t, store, scene_tokens);
        let q = self.word_proj.forward(t, store, words);
        let mut x = t.concat_rows(&[s, q]);
        for layer in &self.fusion {
            x = layer.forward(t, store, x, None);
        }
        let scene_out = t.slice_rows(x, 0, m);
        let question_out = t.slice_rows(x, m, nq);
        let pooled = t.slice_rows(question_out, eot_index, 1);
        FusionVars {
            scene_out,
            question_out,
            pooled,
        }
    }

    pub fn predict_tape(&self, t: &mut Tape, store: &ParamStore, fusion: &FusionVars) -> PredictionVars {
        PredictionVars {
            localization: self.loc_head.forward(t, store, fusion.scene_out),
            answer: self.answer_head.forward(t, store, fusion.pooled),
            object_class: self.class_head.forward(t, store, fusion.pooled),
        }
    }

    pub fn fuse(&self, store: &ParamStore, question: &TextEncoding, scene: &SceneTokens) -> FusionOutput {
        let mut t = Tape::new();
        let s = t.constant(scene.object_tokens.clone());
        let w = t.constant(question.word_embeddings.clone());
        let f = self.fuse_tape(&mut t, store, s, w, question.eot_index);
        FusionOutput {
            scene_tokens_out: t.value(f.scene_out).clone(),
            question_tokens_out: t.value(f.question_out).clone(),
            pooled_question: t.value(f.pooled).as_slice().to_vec(),
        }
    }

    pub fn predict(&self, store: &ParamStore, fusion: &FusionOutput) -> VqaPrediction {
        let mut t = Tape::new();
        let f = FusionVars {
            scene_out: t.constant(fusion.scene_tokens_out.clone()),
            question_out: t.constant(fusion.question_tokens_out.clone()),
            pooled: t.constant(Mat::row_vector(&fusion.pooled_question)),
        };
        let p = self.predict_tape(&mut t, store, &f);
        VqaPrediction {
            localization_logits: t.value(p.localization).as_slice().to_vec(),
            answer_logits: t.value(p.answer).as_slice().to_vec(),
            object_class_logits: t.value(p.object_class).as_slice().to_vec(),
        }
    }
}

/// Index of the proposal with the highest IoU against `referred` (lowest
/// index on ties), or `None` when that IoU is below `floor`.
pub fn localization_target(proposals: &[AxisAlignedBox], referred: &AxisAlignedBox, floor: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let iou = box_iou(p, referred);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best.filter(|(_, iou)| *iou >= floor).map(|(i, _)| i)
}

/// Boxes of the `M` proposals from center and size matrices.
pub fn proposal_boxes(centers: &Mat, sizes: &Mat) -> Vec<AxisAlignedBox> {
    (0..centers.rows())
        .map(|m| AxisAlignedBox {
            center: [centers[(m, 0)], centers[(m, 1)], centers[(m, 2)]],
            size: [sizes[(m, 0)], sizes[(m, 1)], sizes[(m, 2)]],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaTargets {
    pub answers: Vec<f64>,
    pub object_classes: Vec<f64>,
    pub localization: Option<usize>,
}

impl VqaTargets {
    pub fn new(record: &QARecord, answers: &AnswerVocabulary, num_classes: usize, localization: Option<usize>) -> Self {
        let mut classes = vec![0.0; num_classes];
        for &c in &record.referred_class_ids {
            if c < num_classes {
                classes[c] = 1.0;
            }
        }
        Self {
            answers: answers.multi_hot(&record.answers),
            object_classes: classes,
            localization,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqaLoss {
    pub total: f64,
    pub det: f64,
    pub obj: f64,
    pub ans: f64,
    pub loc: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VqaLossVars {
    pub total: Var,
    pub obj: Var,
    pub ans: Var,
    pub loc: Var,
}

/// `L_obj + L_ans + L_loc` on the tape (the detection term is added by the caller).
pub fn vqa_head_loss_tape(t: &mut Tape, pred: &PredictionVars, targets: &VqaTargets) -> VqaLossVars {
    let ans_t: Vec<Option<f64>> = targets.answers.iter().map(|&v| Some(v)).collect();
    let ans = t.bce_with_logits(pred.answer, &ans_t);
    let obj_t: Vec<Option<f64>> = targets.object_classes.iter().map(|&v| Some(v)).collect();
    let obj = t.bce_with_logits(pred.object_class, &obj_t);
    let loc_row = t.transpose(pred.localization);
    let loc = t.cross_entropy_rows(loc_row, &[targets.localization]);
    let s = t.add(obj, ans);
    let total = t.add(s, loc);
    VqaLossVars { total, obj, ans, loc }
}

/// `L_vqa = L_det + L_obj + L_ans + L_loc` from predicted logits.
pub fn vqa_loss(prediction: &VqaPrediction, targets: &VqaTargets, det: f64) -> VqaLoss {
    let mut t = Tape::new();
    let p = PredictionVars {
        localization: t.constant(Mat::from_vec(
            prediction.localization_logits.len(),
            1,
            prediction.localization_logits.clone(),
        )),
        answer: t.constant(Mat::row_vector(&prediction.answer_logits)),
        object_class: t.constant(Mat::row_vector(&prediction.object_class_logits)),
    };
    let v = vqa_head_loss_tape(&mut t, &p, targets);
    let (obj, ans, loc) = (t.value(v.obj).item(), t.value(v.ans).item(), t.value(v.loc).item());
    VqaLoss {
        total: det + obj + ans + loc,
        det,
        obj,
        ans,
        loc,
    }
}

fn referred_box(record: &QARecord, annotations: &[ObjectAnnotation]) -> Option<AxisAlignedBox> {
    let id = *record.referred_instance_ids.first()?;
    annotations.iter().find(|a| a.instance_id == id).map(|a| a.bbox)
}

/// A trained model with everything needed to answer questions.
pub struct VqaArtifact {
    pub model_config: ModelConfig,
    pub model: VqaModel,
    pub store: ParamStore,
    pub answers: AnswerVocabulary,
    pub text: DualEncoder,
}

pub struct VqaTraining {
    pub checkpoint: Checkpoint,
    pub log: FinetuneLog,
    pub answers: AnswerVocabulary,
    pub init: Init,
    /// Parameters before the first optimizer step.
    pub initial_store: ParamStore,
}

/// Fine-tunes VQA on `train`, starting the scene encoder from `pretrained`
/// or from random weights.
pub fn finetune_vqa(
    train_set: &Dataset,
    pretrained: Option<&Checkpoint>,
    model: &ModelConfig,
    vqa: &VqaConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<VqaTraining> {
    model.validate()?;
    cfg.validate()?;
    let answers = AnswerVocabulary::from_records(&train_set.qa, cfg.min_answer_count)?;
    let dual = resolve_encoders(train_set, model, pretrained)?;
    let (mut scene_rng, mut head_rng, mut data_rng) = init_rngs(seed);
    let mut store = ParamStore::new();
    let net = VqaModel::new(&mut store, model, *vqa, answers.len(), &mut scene_rng, &mut head_rng)?;
    let init = init_scene_encoder(&mut store, model, pretrained)?;
    let initial_store = store.clone();

    let index = train_set.scene_index();
    let sample_scene = train_set
        .qa
        .iter()
        .map(|q| {
            index
                .get(q.scene_id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("question {} refers to unknown scene {}", q.question_id, q.scene_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let questions = encode_texts(&dual, &train_set.qa.iter().map(|q| q.question.as_str()).collect::<Vec<_>>())?;
    let num_classes = model.scene.num_classes;

    let log = train(
        train_set,
        &sample_scene,
        &net.scene,
        &mut store,
        cfg,
        &mut data_rng,
        &VQA_TERMS,
        |t, store, i, inst| {
            let record = &train_set.qa[i];
            let q = &questions[i];
            let f = net.scene.forward(t, store, inst.geometry);
            let det = detection_loss_tape(t, f.centers, f.sizes, f.objectness, f.class_logits, inst.annotations, &cfg.detection);
            let boxes = proposal_boxes(t.value(f.centers), t.value(f.sizes));
            let loc = referred_box(record, inst.annotations).and_then(|b| localization_target(&boxes, &b, vqa.iou_floor));
            let targets = VqaTargets::new(record, &answers, num_classes, loc);
            let words = t.constant(q.word_embeddings.clone());
            let fusion = net.fuse_tape(t, store, f.object_tokens, words, q.eot_index);
            let pred = net.predict_tape(t, store, &fusion);
            let heads = vqa_head_loss_tape(t, &pred, &targets);
            let total = t.add(det.total, heads.total);
            LossOutput {
                total,
                terms: vec![det.total, heads.obj, heads.ans, heads.loc],
            }
        },
    )?;
    let checkpoint = task_checkpoint(VQA_KIND, model, vqa, answers.answers(), &dual, &store, cfg, init);
    Ok(VqaTraining {
        checkpoint,
        log,
        answers,
        init,
        initial_store,
    })
}

/// Rebuilds a fine-tuned model from its checkpoint. When `expected` is
/// given, the checkpoint must have been trained with that model config.
pub fn load_vqa(ck: &Checkpoint, expected: Option<&ModelConfig>) -> Result<VqaArtifact> {
    if ck.kind != VQA_KIND {
        return Err(Error::Load(format!("expected a {VQA_KIND} checkpoint, found {}", ck.kind)));
    }
    let model_config: ModelConfig = metadata_field(ck, "model")?;
    if expected.is_some_and(|m| *m != model_config) {
        return Err(Error::Load("checkpoint was trained with a different model config".into()));
    }
    let vqa: VqaConfig = metadata_field(ck, "task")?;
    let answer_list: Vec<String> = metadata_field(ck, "answers")?;
    if task_fingerprint(&model_config, &vqa, &answer_list) != ck.fingerprint {
        return Err(Error::Load("checkpoint fingerprint does not match its metadata".into()));
    }
    let answers = AnswerVocabulary::from_answers(answer_list)?;
    let tokens: Vec<String> = metadata_field(ck, "vocabulary")?;
    let mut text = DualEncoder::new(Vocabulary::from_tokens(tokens)?, model_config.encoders, 0);
    ck.load_into(&mut text.store, "text.")?;
    let (mut a, mut b, _) = init_rngs(0);
    let mut store = ParamStore::new();
    let model = VqaModel::new(&mut store, &model_config, vqa, answers.len(), &mut a, &mut b)?;
    ck.load_into(&mut store, "")?;
    Ok(VqaArtifact {
        model_config,
        model,
        store,
        answers,
        text,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaPredictionRecord {
    pub question_id: String,
    pub answer: String,
    pub top10: Vec<String>,
    #[serde(rename = "box")]
    pub predicted_box: AxisAlignedBox,
    pub localization_argmax: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending score, ties to the lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

struct CachedScene {
    tokens: SceneTokens,
    boxes: Vec<AxisAlignedBox>,
}

pub fn predict_vqa(artifact: &VqaArtifact, dataset: &Dataset) -> Result<Vec<VqaPredictionRecord>> {
    let enc = &artifact.model.scene;
    let scenes: BTreeMap<&str, CachedScene> = dataset
        .scenes
        .par_iter()
        .map(|s| -> Result<(&str, CachedScene)> {
            let geom = enc.geometry(&s.cloud)?;
            let mut t = Tape::new();
            let f = enc.forward(&mut t, &artifact.store, &geom);
            Ok((
                s.scene_id.as_str(),
                CachedScene {
                    tokens: SceneTokens {
                        object_tokens: t.value(f.object_tokens).clone(),
                        global_token: t.value(f.global_token).as_slice().to_vec(),
                    },
                    boxes: proposal_boxes(t.value(f.centers), t.value(f.sizes)),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    dataset
        .qa
        .par_iter()
        .map(|q| {
            let scene = scenes
                .get(q.scene_id.as_str())
                .ok_or_else(|| Error::Input(format!("question {} refers to unknown scene {}", q.question_id, q.scene_id)))?;
            let question = artifact.text.encode_text(&q.question)?;
            let fusion = artifact.model.fuse(&artifact.store, &question, &scene.tokens);
            let p = artifact.model.predict(&artifact.store, &fusion);
            let loc = argmax(&p.localization_logits);
            let top = top_k(&p.answer_logits, 10);
            Ok(VqaPredictionRecord {
                question_id: q.question_id.clone(),
                answer: artifact.answers.get(top[0]).to_string(),
                top10: top.iter().map(|&i| artifact.answers.get(i).to_string()).collect(),
                predicted_box: scene.boxes[loc],
                localization_argmax: loc,
            })
        })
        .collect()
}

/// Scores predictions against `dataset`; boxes are compared with the
/// question's first referred object.
pub fn evaluate_vqa(predictions: &[VqaPredictionRecord], dataset: &Dataset) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &VqaPredictionRecord> = predictions.iter().map(|p| (p.question_id.as_str(), p)).collect();
    let mut items = Vec::with_capacity(dataset.qa.len());
    for q in &dataset.qa {
        let p = by_id
            .get(q.question_id.as_str())
            .ok_or_else(|| Error::Input(format!("no prediction for question {}", q.question_id)))?;
        let gt = dataset.scene(&q.scene_id).and_then(|s| referred_box(q, &s.annotations));
        items.push(ScoredItem {
            answer: p.answer.clone(),
            ground_truths: q.answers.clone(),
            boxes: gt.map(|g| (p.predicted_box, g)),
        });
    }
    evaluate(&items)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dual_encoder::{DualEncoderConfig, ImageEncoderConfig, TextEncoderConfig};
    use crate::gradcheck::check_gradient;
    use crate::scene_encoder::SceneEncoderConfig;
    use rand::SeedableRng;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            scene: SceneEncoderConfig {
                point_hidden: vec![8],
                knn: 4,
                num_proposals: 6,
                group_size: 4,
                radius: 0.5,
                feature_dim: 12,
                vote_hidden: 8,
                group_hidden: 8,
                head_hidden: 8,
                layers: 1,
                heads: 2,
                ffn_dim: 16,
                embed_dim: 8,
                num_classes: 3,
            },
            encoders: DualEncoderConfig {
                embed_dim: 8,
                text: TextEncoderConfig {
                    width: 8,
                    layers: 1,
                    heads: 2,
                    ffn_dim: 16,
                    word_dim: 10,
                    max_len: 16,
                },
                image: ImageEncoderConfig {
                    width: 8,
                    layers: 1,
                    heads: 2,
                    ffn_dim: 16,
                    patch: 8,
                    image_width: 16,
                    image_height: 16,
                },
            },
            render: crate::renderer::RenderConfig {
                width: 16,
                height: 16,
                ..Default::default()
            },
            ..ModelConfig::default()
        }
    }

    fn tiny_vqa() -> VqaConfig {
        VqaConfig {
            hidden: 8,
            fusion_layers: 2,
            heads: 2,
            ffn_dim: 16,
            iou_floor: 0.05,
        }
    }

    fn model(seed: u64) -> (ParamStore, VqaModel) {
        let (mut a, mut b, _) = init_rngs(seed);
        let mut store = ParamStore::new();
        let m = VqaModel::new(&mut store, &tiny_model(), tiny_vqa(), 5, &mut a, &mut b).unwrap();
        (store, m)
    }

    fn inputs(seed: u64) -> (TextEncoding, SceneTokens) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            TextEncoding {
                word_embeddings: Mat::uniform(4, 10, 1.0, &mut rng),
                pooled: vec![],
                eot_index: 3,
            },
            SceneTokens {
                object_tokens: Mat::uniform(6, 12, 1.0, &mut rng),
                global_token: vec![0.0; 12],
            },
        )
    }

    fn record(answers: &[&str]) -> QARecord {
        QARecord {
            question_id: "q".into(),
            scene_id: "s".into(),
            question: "what".into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            referred_instance_ids: vec![],
            referred_class_ids: vec![],
        }
    }

    #[test]
    fn answer_vocabulary_rules() {
        let mut recs = vec![record(&["brown"]), record(&["brown"]), record(&["Brown "]), record(&["red"])];
        let v = AnswerVocabulary::from_records(&recs, 2).unwrap();
        assert_eq!(v.answers(), ["brown"]);
        let v = AnswerVocabulary::from_records(&recs, 1).unwrap();
        assert_eq!(v.answers(), ["brown", "red"]);
        recs.push(record(&["blue"]));
        let v = AnswerVocabulary::from_records(&recs, 1).unwrap();
        assert_eq!(v.answers(), ["brown", "blue", "red"]);
        assert!(AnswerVocabulary::from_records(&recs, 10).is_err());
        assert!(AnswerVocabulary::from_answers(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(v.multi_hot(&["RED".into(), "green".into()]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn fusion_shapes_and_permutation_equivariance() {
        let (store, m) = model(1);
        let (q, s) = inputs(2);
        let f = m.fuse(&store, &q, &s);
        assert_eq!(f.scene_tokens_out.shape(), (6, 8));
        assert_eq!(f.question_tokens_out.shape(), (4, 8));
        assert_eq!(f.pooled_question.len(), 8);
        assert_eq!(f.pooled_question, f.question_tokens_out.row(3));
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = SceneTokens {
            object_tokens: s.object_tokens.select_rows(&perm),
            global_token: s.global_token.clone(),
        };
        let g = m.fuse(&store, &q, &permuted);
        for (k, &p) in perm.iter().enumerate() {
            for (a, b) in g.scene_tokens_out.row(k).iter().zip(f.scene_tokens_out.row(p)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for (a, b) in g.pooled_question.iter().zip(&f.pooled_question) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(m.fuse(&store, &q, &s), f);
    }

    #[test]
    fn prediction_shapes_and_zero_heads() {
        let (mut store, m) = model(1);
        let (q, s) = inputs(2);
        let f = m.fuse(&store, &q, &s);
        let p = m.predict(&store, &f);
        assert_eq!((p.localization_logits.len(), p.answer_logits.len(), p.object_class_logits.len()), (6, 5, 3));
        for l in [&m.loc_head, &m.answer_head, &m.class_head] {
            l.zero(&mut store);
        }
        let p = m.predict(&store, &f);
        assert!(p.localization_logits.iter().chain(&p.answer_logits).chain(&p.object_class_logits).all(|v| *v == 0.0));
        let t = VqaTargets {
            answers: vec![1.0, 0.0, 0.0, 1.0, 0.0],
            object_classes: vec![0.0, 1.0, 0.0],
            localization: Some(2),
        };
        assert!((vqa_loss(&p, &t, 0.0).ans - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn localization_target_rules() {
        let b = |x: f64| AxisAlignedBox::new([x, 0.0, 0.0], [1.0; 3]).unwrap();
        let gt = b(0.0);
        assert_eq!(localization_target(&[b(3.0), b(0.5), b(0.0), b(-0.5)], &gt, 0.05), Some(2));
        assert_eq!(localization_target(&[b(3.0), b(0.5), b(-0.5)], &gt, 0.05), Some(1));
        assert_eq!(localization_target(&[b(3.0), b(5.0)], &gt, 0.05), None);
    }

    #[test]
    fn vqa_loss_terms_and_saturation() {
        let p = VqaPrediction {
            localization_logits: vec![-30.0, 30.0, -30.0],
            answer_logits: vec![30.0, -30.0],
            object_class_logits: vec![-30.0, 30.0],
        };
        let t = VqaTargets {
            answers: vec![1.0, 0.0],
            object_classes: vec![0.0, 1.0],
            localization: Some(1),
        };
        let l = vqa_loss(&p, &t, 0.25);
        assert!(l.obj < 0.01 && l.ans < 0.01 && l.loc < 0.01);
        assert_eq!(l.total, l.det + l.obj + l.ans + l.loc);
        let none = VqaTargets { localization: None, ..t };
        assert_eq!(vqa_loss(&p, &none, 0.0).loc, 0.0);
    }

    #[test]
    fn head_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let targets = VqaTargets {
            answers: vec![1.0, 0.0, 1.0, 0.0],
            object_classes: vec![0.0, 1.0, 1.0],
            localization: Some(2),
        };
        let at: Vec<Option<f64>> = targets.answers.iter().map(|v| Some(*v)).collect();
        let r = check_gradient(&Mat::uniform(1, 4, 2.0, &mut rng), 1e-6, |t, x| t.bce_with_logits(x, &at));
        assert!(r.max_rel_error < 1e-4, "ans {r:?}");
        let ot: Vec<Option<f64>> = targets.object_classes.iter().map(|v| Some(*v)).collect();
        let r = check_gradient(&Mat::uniform(1, 3, 2.0, &mut rng), 1e-6, |t, x| t.bce_with_logits(x, &ot));
        assert!(r.max_rel_error < 1e-4, "obj {r:?}");
        let r = check_gradient(&Mat::uniform(5, 1, 2.0, &mut rng), 1e-6, |t, x| {
            let row = t.transpose(x);
            t.cross_entropy_rows(row, &[Some(2)])
        });
        assert!(r.max_rel_error < 1e-4, "loc {r:?}");
    }

    #[test]
    fn loss_is_covariant_under_joint_permutation() {
        let p = VqaPrediction {
            localization_logits: vec![0.3, -1.0, 2.0, 0.1],
            answer_logits: vec![0.5, -0.2, 1.5],
            object_class_logits: vec![0.1, 0.2],
        };
        let t = VqaTargets {
            answers: vec![0.0, 1.0, 1.0],
            object_classes: vec![1.0, 0.0],
            localization: Some(2),
        };
        let base = vqa_loss(&p, &t, 0.0);
        let perm = [2, 0, 3, 1];
        let p2 = VqaPrediction {
            localization_logits: perm.iter().map(|&i| p.localization_logits[i]).collect(),
            answer_logits: vec![1.5, 0.5, -0.2],
            ..p.clone()
        };
        let t2 = VqaTargets {
            answers: vec![1.0, 0.0, 1.0],
            localization: Some(0),
            ..t.clone()
        };
        let l2 = vqa_loss(&p2, &t2, 0.0);
        assert!((base.loc - l2.loc).abs() < 1e-12 && (base.ans - l2.ans).abs() < 1e-12);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 3), vec![1, 2, 0]);
    }
}
