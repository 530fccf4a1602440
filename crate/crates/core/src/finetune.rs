//! Training loop and bookkeeping shared by the VQA and SQA fine-tuning runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, ParamStore, Tape, Var};
use crate::checkpoint::{fingerprint, Checkpoint};
use crate::dual_encoder::{DualEncoder, TextEncoding};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::pretrain::{build_encoders, load_encoders, ModelConfig, PRETRAIN_KIND};
use crate::scene_data::augment::AugmentedScene;
use crate::scene_data::{subsample_points, AugmentConfig, Dataset, ObjectAnnotation, SceneAugmenter};
use crate::scene_encoder::{DetectionLossConfig, SceneEncoder, SceneGeometry};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// First epoch (0-based) trained at the decayed rate.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub min_answer_count: usize,
    pub num_points: Option<usize>,
    pub augment: AugmentConfig,
    pub train_scene_encoder: bool,
    pub detection: DetectionLossConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            max_steps: None,
            batch_size: 16,
            optimizer: AdamConfig::new(5e-4, 1e-5),
            lr_decay_epoch: 15,
            lr_decay_factor: 0.2,
            min_answer_count: 1,
            num_points: None,
            augment: AugmentConfig::default(),
            train_scene_encoder: true,
            detection: DetectionLossConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn sqa_default() -> Self {
        Self {
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.min_answer_count == 0 {
            return Err(Error::Config("min_answer_count must be at least 1".into()));
        }
        if self.num_points == Some(0) {
            return Err(Error::Config("num_points must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.optimizer.learning_rate * self.lr_decay_factor
        } else {
            self.optimizer.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub term_names: Vec<String>,
    pub records: Vec<FinetuneRecord>,
}

impl FinetuneLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,learning_rate,total");
        for n in &self.term_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{},{},{}", r.step, r.epoch, r.learning_rate, r.total);
            for v in &r.terms {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// The scene a training sample sees after augmentation.
pub struct SceneInstance<'a> {
    pub geometry: &'a SceneGeometry,
    pub annotations: &'a [ObjectAnnotation],
    /// Rigid transform applied to the scene, if any.
    pub transform: Option<&'a AugmentedScene>,
}

pub(crate) struct LossOutput {
    pub total: Var,
    pub terms: Vec<Var>,
}

/// Which scene encoder weights a run starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Pretrained,
    Scratch,
}

/// Reference encoders for fine-tuning: those saved with the pre-training
/// checkpoint, or a fresh build for the training split.
pub fn resolve_encoders(train: &Dataset, model: &ModelConfig, pretrained: Option<&Checkpoint>) -> Result<DualEncoder> {
    match pretrained {
        Some(ck) => {
            verify_pretrained(ck, model)?;
            load_encoders(ck, &model.encoders)
        }
        None => build_encoders(train, model),
    }
}

pub fn verify_pretrained(ck: &Checkpoint, model: &ModelConfig) -> Result<()> {
    ck.verify(PRETRAIN_KIND, &model.scene_fingerprint())
        .map_err(|e| Error::Load(e.to_string()))
}

/// Copies the pre-trained scene encoder into `store` when given.
pub fn init_scene_encoder(store: &mut ParamStore, model: &ModelConfig, pretrained: Option<&Checkpoint>) -> Result<Init> {
    match pretrained {
        Some(ck) => {
            verify_pretrained(ck, model)?;
            ck.load_into(store, "scene.").map_err(|e| Error::Load(e.to_string()))?;
            Ok(Init::Pretrained)
        }
        None => Ok(Init::Scratch),
    }
}

pub fn encode_texts(dual: &DualEncoder, texts: &[&str]) -> Result<Vec<TextEncoding>> {
    texts.par_iter().map(|t| dual.encode_text(t)).collect()
}

/// Independent RNG streams for the scene encoder and the task heads, so
/// runs that differ only in scene-encoder initialization share head weights.
pub fn init_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let mut scene = ChaCha8Rng::seed_from_u64(seed);
    scene.set_stream(0);
    let mut heads = ChaCha8Rng::seed_from_u64(seed);
    heads.set_stream(1);
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(2);
    (scene, heads, data)
}

/// Minibatch Adam over samples; `sample_scene[i]` is the dataset scene of
/// sample `i`. Each sample runs on its own tape in parallel and gradients
/// are summed in batch order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train<F>(
    dataset: &Dataset,
    sample_scene: &[usize],
    encoder: &SceneEncoder,
    store: &mut ParamStore,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
    term_names: &[&str],
    loss: F,
) -> Result<FinetuneLog>
where
    F: Fn(&mut Tape, &ParamStore, usize, &SceneInstance) -> LossOutput + Sync,
{
    cfg.validate()?;
    if sample_scene.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if !cfg.train_scene_encoder {
        store.set_trainable_prefix("scene.", false);
    }
    let per_step = !cfg.augment.is_noop() || cfg.num_points.is_some();
    let mut cached: BTreeMap<usize, SceneGeometry> = BTreeMap::new();
    if !per_step {
        let mut used: Vec<usize> = sample_scene.to_vec();
        used.sort_unstable();
        used.dedup();
        let geoms = used
            .par_iter()
            .map(|&i| encoder.geometry(&dataset.scenes[i].cloud))
            .collect::<Result<Vec<_>>>()?;
        cached = used.into_iter().zip(geoms).collect();
    }
    let augmenter = SceneAugmenter::new(cfg.augment);
    let mut opt = Adam::new(cfg.optimizer);
    let mut log = FinetuneLog {
        term_names: term_names.iter().map(|s| s.to_string()).collect(),
        records: Vec::new(),
    };
    let mut order: Vec<usize> = (0..sample_scene.len()).collect();
    let mut step = 0;
    let mut last_finite = f64::NAN;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let lr = cfg.learning_rate_at(epoch);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let b = batch.len() as f64;
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&sample, &seed)| -> Result<(ParamGrads, f64, Vec<f64>)> {
                    let scene = &dataset.scenes[sample_scene[sample]];
                    let mut t = Tape::new();
                    let out = if let Some(g) = cached.get(&sample_scene[sample]) {
                        let inst = SceneInstance {
                            geometry: g,
                            annotations: &scene.annotations,
                            transform: None,
                        };
                        loss(&mut t, store, sample, &inst)
                    } else {
                        let mut r = ChaCha8Rng::seed_from_u64(seed);
                        let aug = augmenter.apply(scene, &mut r);
                        let cloud = match cfg.num_points {
                            Some(n) => subsample_points(&aug.cloud, n, &mut r),
                            None => aug.cloud.clone(),
                        };
                        let g = encoder.geometry(&cloud)?;
                        let inst = SceneInstance {
                            geometry: &g,
                            annotations: &aug.annotations,
                            transform: Some(&aug),
                        };
                        loss(&mut t, store, sample, &inst)
                    };
                    let total = t.value(out.total).item();
                    let terms = out.terms.iter().map(|v| t.value(*v).item()).collect();
                    let mut pg = ParamGrads::new();
                    pg.accumulate(&t.backward_seeded(&[(out.total, Mat::scalar(1.0 / b))]));
                    Ok((pg, total, terms))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = ParamGrads::new();
            let mut total = 0.0;
            let mut terms = vec![0.0; term_names.len()];
            for (g, l, ts) in &results {
                grads.merge(g);
                total += l / b;
                for (acc, v) in terms.iter_mut().zip(ts) {
                    *acc += v / b;
                }
            }
            if !total.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    iteration: step,
                    last_finite: format!("total={last_finite}"),
                });
            }
            last_finite = total;
            opt.step(store, &grads, lr);
            log.records.push(FinetuneRecord {
                step,
                epoch,
                learning_rate: lr,
                total,
                terms,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Metadata and tensors of a fine-tuned model. The text encoder weights
/// travel with the checkpoint so evaluation encodes questions identically.
#[allow(clippy::too_many_arguments)]
pub(crate) fn task_checkpoint<T: Serialize>(
    kind: &str,
    model: &ModelConfig,
    task: &T,
    answers: &[String],
    dual: &DualEncoder,
    store: &ParamStore,
    finetune: &FinetuneConfig,
    init: Init,
) -> Checkpoint {
    let metadata = serde_json::json!({
        "model": model,
        "task": task,
        "answers": answers,
        "vocabulary": dual.vocab.tokens(),
        "finetune": finetune,
        "init": init,
    });
    let mut ck = Checkpoint::from_store(kind, task_fingerprint(model, task, answers), metadata, store, &[]);
    ck.tensors.extend(
        dual.store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("text."))
            .map(|e| (e.name.clone(), e.value.clone())),
    );
    ck
}

pub fn task_fingerprint<T: Serialize>(model: &ModelConfig, task: &T, answers: &[String]) -> String {
    fingerprint(&(model, task, answers))
}

/// Parses one metadata field of a checkpoint.
pub fn metadata_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .metadata
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Load(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v).map_err(|e| Error::Load(format!("checkpoint metadata `{key}`: {e}")))
}
