//! Scene↔text and scene↔image alignment: the contrastive and cosine
//! objectives, the combined pre-training loss, the training loop, and
//! embedding export with a principal-components projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, ParamId, ParamStore, Tape, Var};
use crate::checkpoint::{fingerprint, Checkpoint};
use crate::dual_encoder::{l2_norm, DualEncoder, DualEncoderConfig, EmbeddingAdapter, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::renderer::{render_multiview, scene_poses, CameraPose, RenderConfig, ViewImage};
use crate::scene_data::{subsample_points, AugmentConfig, Dataset, SceneAugmenter, SceneSample};
use crate::scene_encoder::{
    detection_loss_tape, DetectionLossConfig, SceneEncoder, SceneEncoderConfig, SceneGeometry,
};
use crate::tensor::Mat;

pub const PRETRAIN_KIND: &str = "pretrain";
const UNIT_TOL: f64 = 1e-5;

/// `-(1/B) Σ_i log softmax_j(a_i·p_j / τ)[i]` on the tape.
pub fn contrastive_loss_tape(t: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Var {
    let logits = t.matmul_t(anchors, positives);
    let logits = t.scale(logits, 1.0 / tau);
    let b = t.shape(anchors).0;
    t.cross_entropy_rows(logits, &(0..b).map(Some).collect::<Vec<_>>())
}

/// Contrastive loss with a differentiable inverse temperature (a 1×1 node).
pub fn contrastive_loss_scaled_tape(t: &mut Tape, anchors: Var, positives: Var, inv_tau: Var) -> Var {
    let logits = t.matmul_t(anchors, positives);
    let logits = t.scale_by(logits, inv_tau);
    let b = t.shape(anchors).0;
    t.cross_entropy_rows(logits, &(0..b).map(Some).collect::<Vec<_>>())
}

/// `(1/B) Σ_i (1 - a_i·p_i)` on the tape.
pub fn cosine_alignment_loss_tape(t: &mut Tape, anchors: Var, positives: Var) -> Var {
    let (b, d) = t.shape(anchors);
    let prod = t.mul(anchors, positives);
    let mean = t.mean_all(prod);
    let mean_dot = t.scale(mean, d as f64);
    let one = t.constant(Mat::scalar(1.0));
    let _ = b;
    t.sub(one, mean_dot)
}

fn check_pair(anchors: &Mat, positives: &Mat) -> Result<()> {
    if anchors.shape() != positives.shape() || anchors.rows() == 0 {
        return Err(Error::Input(format!(
            "anchor/positive shapes {:?} and {:?} must match and be non-empty",
            anchors.shape(),
            positives.shape()
        )));
    }
    if !anchors.all_finite() || !positives.all_finite() {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    Ok(())
}

pub fn contrastive_loss(anchors: &Mat, positives: &Mat, tau: f64) -> Result<f64> {
    check_pair(anchors, positives)?;
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let mut t = Tape::new();
    let a = t.constant(anchors.clone());
    let p = t.constant(positives.clone());
    let l = contrastive_loss_tape(&mut t, a, p, tau);
    Ok(t.value(l).item())
}

pub fn cosine_alignment_loss(anchors: &Mat, positives: &Mat) -> Result<f64> {
    check_pair(anchors, positives)?;
    let mut t = Tape::new();
    let a = t.constant(anchors.clone());
    let p = t.constant(positives.clone());
    let l = cosine_alignment_loss_tape(&mut t, a, p);
    Ok(t.value(l).item())
}

/// Unit-norm embeddings of one batch, row `i` of each matrix from sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentBatch {
    pub z_scene: Mat,
    pub z_image: Mat,
    pub z_text: Mat,
}

impl AlignmentBatch {
    pub fn new(z_scene: Mat, z_image: Mat, z_text: Mat) -> Result<Self> {
        if z_scene.rows() == 0 || z_scene.shape() != z_image.shape() || z_scene.shape() != z_text.shape() {
            return Err(Error::Input("alignment batch matrices must share a non-empty shape".into()));
        }
        for (name, m) in [("scene", &z_scene), ("image", &z_image), ("text", &z_text)] {
            for r in 0..m.rows() {
                let n = l2_norm(m.row(r));
                if !((n - 1.0).abs() <= UNIT_TOL) {
                    return Err(Error::Input(format!("{name} row {r} has norm {n}, expected 1")));
                }
            }
        }
        Ok(Self { z_scene, z_image, z_text })
    }
}

/// The alignment part of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_text_loss: bool,
    pub use_image_loss: bool,
    pub use_cosine_variant: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            alpha: 0.5,
            beta: 0.5,
            use_text_loss: true,
            use_image_loss: true,
            use_cosine_variant: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// `L_pre` and its terms. `text` and `image` are the unweighted terms
/// (zero when switched off); `total = det + alpha·text + beta·image`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub det: f64,
    pub text: f64,
    pub image: f64,
}

fn alignment_term(t: &mut Tape, a: Var, p: Var, cfg: &LossConfig, inv_tau: Option<Var>) -> Var {
    if cfg.use_cosine_variant {
        cosine_alignment_loss_tape(t, a, p)
    } else if let Some(s) = inv_tau {
        contrastive_loss_scaled_tape(t, a, p, s)
    } else {
        contrastive_loss_tape(t, a, p, cfg.tau)
    }
}

/// Handles of the alignment terms on a tape; `None` for disabled terms.
struct AlignmentVars {
    weighted: Option<Var>,
    text: Option<Var>,
    image: Option<Var>,
}

fn alignment_tape(
    t: &mut Tape,
    z_scene: Var,
    z_text: Var,
    z_image: Var,
    cfg: &LossConfig,
    inv_tau: Option<Var>,
) -> AlignmentVars {
    let text = cfg
        .use_text_loss
        .then(|| alignment_term(t, z_scene, z_text, cfg, inv_tau));
    let image = cfg
        .use_image_loss
        .then(|| alignment_term(t, z_scene, z_image, cfg, inv_tau));
    let mut weighted = None;
    for (term, w) in [(text, cfg.alpha), (image, cfg.beta)] {
        if let Some(v) = term {
            let s = t.scale(v, w);
            weighted = Some(match weighted {
                Some(acc) => t.add(acc, s),
                None => s,
            });
        }
    }
    AlignmentVars { weighted, text, image }
}

/// `L_pre = L_det + α·L_text + β·L_image`.
pub fn pretrain_loss(batch: &AlignmentBatch, det_loss: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut t = Tape::new();
    let s = t.constant(batch.z_scene.clone());
    let x = t.constant(batch.z_text.clone());
    let i = t.constant(batch.z_image.clone());
    let v = alignment_tape(&mut t, s, x, i, cfg, None);
    let text = v.text.map_or(0.0, |v| t.value(v).item());
    let image = v.image.map_or(0.0, |v| t.value(v).item());
    let out = LossBreakdown {
        total: det_loss + cfg.alpha * text + cfg.beta * image,
        det: det_loss,
        text,
        image,
    };
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite pre-training loss {out:?}")));
    }
    Ok(out)
}

/// Architecture shared by pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scene: SceneEncoderConfig,
    pub encoders: DualEncoderConfig,
    pub render: RenderConfig,
    /// Seed of the reference text/image encoder weights.
    pub encoder_seed: u64,
    /// Contrastive warm-up steps for the reference encoders before use.
    pub encoder_warmup_steps: usize,
    pub encoder_warmup_lr: f64,
    /// Warm-up temperature. Randomly initialized encoders map every input to
    /// nearly the same point; at a low temperature the loss then falls fastest
    /// by collapsing them completely.
    pub encoder_warmup_tau: f64,
    /// Views rendered per scene for the warm-up pairs.
    pub encoder_warmup_views: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scene: SceneEncoderConfig::default(),
            encoders: DualEncoderConfig::default(),
            render: RenderConfig::default(),
            encoder_seed: 0,
            encoder_warmup_steps: 0,
            encoder_warmup_lr: 1e-3,
            encoder_warmup_tau: 0.5,
            encoder_warmup_views: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.render.validate()?;
        if self.scene.embed_dim != self.encoders.embed_dim {
            return Err(Error::Config(format!(
                "scene embed_dim {} differs from encoder embed_dim {}",
                self.scene.embed_dim, self.encoders.embed_dim
            )));
        }
        let img = &self.encoders.image;
        if img.image_width != self.render.width || img.image_height != self.render.height {
            return Err(Error::Config("image encoder resolution must equal the render resolution".into()));
        }
        if img.patch == 0 || img.image_width % img.patch != 0 || img.image_height % img.patch != 0 {
            return Err(Error::Config("render resolution must be a multiple of the patch size".into()));
        }
        if self.encoder_warmup_steps > 0 && self.encoder_warmup_views == 0 {
            return Err(Error::Config("encoder_warmup_views must be at least 1".into()));
        }
        if !(self.encoder_warmup_tau > 0.0) {
            return Err(Error::Config("encoder_warmup_tau must be positive".into()));
        }
        Ok(())
    }

    /// Fingerprint stored with scene-encoder checkpoints.
    pub fn scene_fingerprint(&self) -> String {
        fingerprint(&self.scene)
    }
}

/// Every text of a split: captions, questions, situations and answers.
pub fn corpus(dataset: &Dataset) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for s in &dataset.scenes {
        out.extend(s.captions.iter().map(String::as_str));
    }
    for q in &dataset.qa {
        out.push(&q.question);
        out.extend(q.answers.iter().map(String::as_str));
    }
    for q in &dataset.sqa {
        out.push(&q.situation_text);
        out.push(&q.question);
        out.extend(q.answers.iter().map(String::as_str));
    }
    out
}

pub fn render_scene(scene: &SceneSample, num_views: usize, render: &RenderConfig) -> Result<Vec<ViewImage>> {
    render_multiview(&scene.cloud, num_views, render)
}

/// Builds the reference encoders for a training split: vocabulary from the
/// split's corpus, weights from `encoder_seed`, then the optional warm-up on
/// (caption, rendered views) pairs.
pub fn build_encoders(dataset: &Dataset, model: &ModelConfig) -> Result<DualEncoder> {
    let vocab = Vocabulary::build(corpus(dataset));
    let mut enc = DualEncoder::new(vocab, model.encoders, model.encoder_seed);
    if model.encoder_warmup_steps > 0 {
        let pairs = dataset
            .scenes
            .par_iter()
            .map(|s| {
                if s.captions.is_empty() {
                    return Err(Error::Input(format!("scene {} has no caption", s.scene_id)));
                }
                let captions = s.captions.iter().map(|c| enc.tokenize(c)).collect::<Result<Vec<_>>>()?;
                Ok((captions, render_scene(s, model.encoder_warmup_views, &model.render)?))
            })
            .collect::<Result<Vec<_>>>()?;
        enc.warmup(&pairs, model.encoder_warmup_steps, model.encoder_warmup_tau, model.encoder_warmup_lr)?;
    }
    Ok(enc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub loss: LossConfig,
    pub learnable_tau: bool,
    pub use_det_loss: bool,
    pub num_views: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Save an intermediate checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
    /// Points per scene after random subsampling; `None` keeps every point.
    pub num_points: Option<usize>,
    pub augment: AugmentConfig,
    /// Train the reference text/image encoders jointly instead of freezing them.
    pub train_encoders: bool,
    pub detection: DetectionLossConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learnable_tau: false,
            use_det_loss: true,
            num_views: 5,
            iterations: 15_000,
            batch_size: 16,
            optimizer: AdamConfig::new(1e-4, 1e-5),
            checkpoint_every: 0,
            num_points: None,
            augment: AugmentConfig {
                random_cuboid: true,
                ..AugmentConfig::default()
            },
            train_encoders: false,
            detection: DetectionLossConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.num_views == 0 {
            return Err(Error::Config("num_views must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.num_points == Some(0) {
            return Err(Error::Config("num_points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub l_pre: f64,
    pub l_det: f64,
    pub l_text: f64,
    pub l_image: f64,
    pub tau: f64,
}

pub fn log_to_csv(log: &[LogRecord]) -> String {
    let mut s = String::from("iteration,l_pre,l_det,l_text,l_image,tau\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iteration, r.l_pre, r.l_det, r.l_text, r.l_image, r.tau);
    }
    s
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub intermediate: Vec<(usize, Checkpoint)>,
    /// Camera poses each scene was rendered with (empty when adapter embeddings are used).
    pub view_poses: BTreeMap<String, Vec<CameraPose>>,
}

/// Per-scene inputs that do not change across iterations.
struct SceneCache {
    geometry: Option<SceneGeometry>,
    captions: Vec<TokenSequence>,
    text_embeddings: Vec<Vec<f64>>,
    views: Vec<ViewImage>,
    image_embedding: Vec<f64>,
}

struct ScenePass {
    tape: Tape,
    embedding: Var,
    det_total: Var,
    det_value: f64,
}

fn scene_pass(
    encoder: &SceneEncoder,
    store: &ParamStore,
    geom: &SceneGeometry,
    scene_annotations: &[crate::scene_data::ObjectAnnotation],
    cfg: &PretrainConfig,
) -> ScenePass {
    let mut t = Tape::new();
    let f = encoder.forward(&mut t, store, geom);
    let det = if cfg.use_det_loss {
        detection_loss_tape(&mut t, f.centers, f.sizes, f.objectness, f.class_logits, scene_annotations, &cfg.detection).total
    } else {
        t.constant(Mat::scalar(0.0))
    };
    let det_value = t.value(det).item();
    ScenePass {
        tape: t,
        embedding: f.embedding,
        det_total: det,
        det_value,
    }
}

/// Pre-trains a freshly initialized scene encoder (seeded by `seed`).
pub fn run_pretraining(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    adapter: Option<&EmbeddingAdapter>,
) -> Result<PretrainOutput> {
    model.validate()?;
    cfg.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::Input("pre-training needs at least one scene".into()));
    }
    if cfg.train_encoders && adapter.is_some() {
        return Err(Error::Config("precomputed embeddings cannot be trained".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = SceneEncoder::new(&mut store, "scene", model.scene.clone(), &mut rng)?;
    let log_tau: Option<ParamId> = cfg
        .learnable_tau
        .then(|| store.register("pretrain.log_tau", Mat::scalar(cfg.loss.tau.ln())));

    let mut dual = build_encoders(dataset, model)?;
    let needs_geometry_per_step = !cfg.augment.is_noop() || cfg.num_points.is_some();
    let mut view_poses = BTreeMap::new();

    let caches = dataset
        .scenes
        .par_iter()
        .map(|s| -> Result<SceneCache> {
            if s.captions.is_empty() {
                return Err(Error::Input(format!("scene {} has no caption", s.scene_id)));
            }
            let geometry = if needs_geometry_per_step {
                None
            } else {
                Some(encoder.geometry(&s.cloud)?)
            };
            if let Some(a) = adapter {
                let (text, image) = a.get(&s.scene_id)?;
                if text.len() != model.scene.embed_dim {
                    return Err(Error::Config(format!(
                        "adapter embeddings are {}-d, scene encoder projects to {}",
                        text.len(),
                        model.scene.embed_dim
                    )));
                }
                return Ok(SceneCache {
                    geometry,
                    captions: Vec::new(),
                    text_embeddings: vec![text],
                    views: Vec::new(),
                    image_embedding: image,
                });
            }
            let captions = s.captions.iter().map(|c| dual.tokenize(c)).collect::<Result<Vec<_>>>()?;
            let views = render_scene(s, cfg.num_views, &model.render)?;
            let (text_embeddings, image_embedding) = if cfg.train_encoders {
                (Vec::new(), Vec::new())
            } else {
                (
                    captions.iter().map(|c| dual.text.encode(&dual.store, c).pooled).collect(),
                    dual.encode_views(&views)?.embedding,
                )
            };
            Ok(SceneCache {
                geometry,
                captions,
                text_embeddings,
                views,
                image_embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if adapter.is_none() {
        for s in &dataset.scenes {
            view_poses.insert(s.scene_id.clone(), scene_poses(&s.cloud, cfg.num_views, &model.render)?);
        }
    }

    let augmenter = SceneAugmenter::new(cfg.augment);
    let mut opt = Adam::new(cfg.optimizer);
    let mut enc_opt = Adam::new(cfg.optimizer);
    let b = cfg.batch_size.min(dataset.scenes.len());
    let d = model.scene.embed_dim;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut intermediate = Vec::new();
    let mut last_finite = LossBreakdown::default();
    let all: Vec<usize> = (0..dataset.scenes.len()).collect();

    for iteration in 0..cfg.iterations {
        let batch: Vec<usize> = all.choose_multiple(&mut rng, b).copied().collect();
        let caption_pick: Vec<usize> = batch
            .iter()
            .map(|&i| rng.gen_range(0..caches[i].text_embeddings.len().max(caches[i].captions.len())))
            .collect();
        let aug_seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();

        let passes = batch
            .par_iter()
            .zip(&aug_seeds)
            .map(|(&i, &s)| -> Result<ScenePass> {
                let scene = &dataset.scenes[i];
                if let Some(g) = &caches[i].geometry {
                    return Ok(scene_pass(&encoder, &store, g, &scene.annotations, cfg));
                }
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let aug = augmenter.apply(scene, &mut r);
                let cloud = match cfg.num_points {
                    Some(n) => subsample_points(&aug.cloud, n, &mut r),
                    None => aug.cloud,
                };
                let g = encoder.geometry(&cloud)?;
                Ok(scene_pass(&encoder, &store, &g, &aug.annotations, cfg))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut zs = Mat::zeros(b, d);
        for (k, p) in passes.iter().enumerate() {
            zs.row_mut(k).copy_from_slice(p.tape.value(p.embedding).as_slice());
        }
        let det = passes.iter().map(|p| p.det_value).sum::<f64>() / b as f64;

        let mut t = Tape::new();
        let z_scene = t.input(zs);
        let (z_text, z_image) = if cfg.train_encoders {
            let mut texts = Vec::with_capacity(b);
            let mut images = Vec::with_capacity(b);
            for (k, &i) in batch.iter().enumerate() {
                texts.push(dual.text.forward(&mut t, &dual.store, &caches[i].captions[caption_pick[k]]).1);
                let rows = caches[i]
                    .views
                    .iter()
                    .map(|v| dual.image.forward(&mut t, &dual.store, v))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = t.concat_rows(&rows);
                let mean = t.mean_rows(stacked);
                images.push(t.l2_normalize_rows(mean, 1e-12));
            }
            (t.concat_rows(&texts), t.concat_rows(&images))
        } else {
            let texts: Vec<&[f64]> = batch
                .iter()
                .zip(&caption_pick)
                .map(|(&i, &c)| caches[i].text_embeddings[c].as_slice())
                .collect();
            let images: Vec<&[f64]> = batch.iter().map(|&i| caches[i].image_embedding.as_slice()).collect();
            (t.constant(Mat::from_rows(&texts)), t.constant(Mat::from_rows(&images)))
        };
        let inv_tau = log_tau.map(|id| {
            let lt = t.param(&store, id);
            let neg = t.scale(lt, -1.0);
            t.exp(neg)
        });
        let tau_now = log_tau.map_or(cfg.loss.tau, |id| store.get(id).item().exp());
        let align = alignment_tape(&mut t, z_scene, z_text, z_image, &cfg.loss, inv_tau);
        let text = align.text.map_or(0.0, |v| t.value(v).item());
        let image = align.image.map_or(0.0, |v| t.value(v).item());
        let breakdown = LossBreakdown {
            total: det + cfg.loss.alpha * text + cfg.loss.beta * image,
            det,
            text,
            image,
        };
        if !breakdown.total.is_finite() {
            return Err(Error::Divergence {
                iteration,
                last_finite: format!(
                    "L_pre={} L_det={} L_text={} L_image={}",
                    last_finite.total, last_finite.det, last_finite.text, last_finite.image
                ),
            });
        }
        last_finite = breakdown;
        log.push(LogRecord {
            iteration,
            l_pre: breakdown.total,
            l_det: breakdown.det,
            l_text: breakdown.text,
            l_image: breakdown.image,
            tau: tau_now,
        });

        let (dz, outer) = match align.weighted {
            Some(w) => {
                let g = t.backward(w);
                let dz = g.get(z_scene).cloned().unwrap_or_else(|| Mat::zeros(b, d));
                (dz, Some(g))
            }
            None => (Mat::zeros(b, d), None),
        };
        let per_scene: Vec<ParamGrads> = passes
            .par_iter()
            .enumerate()
            .map(|(k, p)| {
                let mut seeds = vec![(p.embedding, Mat::row_vector(dz.row(k)))];
                if cfg.use_det_loss {
                    seeds.push((p.det_total, Mat::scalar(1.0 / b as f64)));
                }
                let mut pg = ParamGrads::new();
                pg.accumulate(&p.tape.backward_seeded(&seeds));
                pg
            })
            .collect();
        let mut grads = ParamGrads::new();
        for g in &per_scene {
            grads.merge(g);
        }
        let mut enc_grads = ParamGrads::new();
        if let Some(g) = &outer {
            if let Some(id) = log_tau {
                if let Some(m) = g.param(id) {
                    grads.add(id, m);
                }
            }
            if cfg.train_encoders {
                enc_grads.accumulate(g);
            }
        }
        if !grads.all_finite() || !enc_grads.all_finite() {
            return Err(Error::Divergence {
                iteration,
                last_finite: format!("non-finite gradients after L_pre={}", breakdown.total),
            });
        }
        opt.step(&mut store, &grads, cfg.optimizer.learning_rate);
        if cfg.train_encoders {
            enc_opt.step(&mut dual.store, &enc_grads, cfg.optimizer.learning_rate);
        }
        if cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0 && iteration + 1 < cfg.iterations {
            intermediate.push((iteration + 1, pretrain_checkpoint(&store, &dual, model, cfg, iteration + 1)));
        }
    }

    Ok(PretrainOutput {
        checkpoint: pretrain_checkpoint(&store, &dual, model, cfg, cfg.iterations),
        log,
        intermediate,
        view_poses,
    })
}

fn pretrain_checkpoint(
    store: &ParamStore,
    dual: &DualEncoder,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    iterations: usize,
) -> Checkpoint {
    let metadata = serde_json::json!({
        "model": model,
        "pretrain": cfg,
        "iterations": iterations,
        "vocabulary": dual.vocab.tokens(),
    });
    let mut ck = Checkpoint::from_store(PRETRAIN_KIND, model.scene_fingerprint(), metadata, store, &[]);
    ck.tensors.extend(dual.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())));
    ck
}

/// Restores a scene encoder from a pre-training checkpoint after checking
/// that it was trained with `config`.
pub fn load_scene_encoder(checkpoint: &Checkpoint, config: &SceneEncoderConfig) -> Result<(ParamStore, SceneEncoder)> {
    checkpoint
        .verify(PRETRAIN_KIND, &fingerprint(config))
        .map_err(|e| Error::Load(e.to_string()))?;
    let mut store = ParamStore::new();
    let enc = SceneEncoder::new(&mut store, "scene", config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint.load_into(&mut store, "scene.")?;
    Ok((store, enc))
}

/// Restores the text/image encoders saved with a pre-training checkpoint.
pub fn load_encoders(checkpoint: &Checkpoint, config: &DualEncoderConfig) -> Result<DualEncoder> {
    let tokens: Vec<String> = checkpoint
        .metadata
        .get("vocabulary")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Load("checkpoint has no vocabulary".into()))?;
    let mut enc = DualEncoder::new(Vocabulary::from_tokens(tokens)?, *config, 0);
    checkpoint.load_into(&mut enc.store, "text.")?;
    checkpoint.load_into(&mut enc.store, "image.")?;
    Ok(enc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub scene_id: String,
    pub scene_type: String,
    pub vector: Vec<f64>,
}

/// `Z_scene` for every scene, in dataset order.
pub fn export_embeddings(dataset: &Dataset, checkpoint: &Checkpoint, config: &SceneEncoderConfig) -> Result<Vec<EmbeddingRow>> {
    let (store, enc) = load_scene_encoder(checkpoint, config)?;
    embed_scenes(dataset, &store, &enc)
}

pub fn embed_scenes(dataset: &Dataset, store: &ParamStore, enc: &SceneEncoder) -> Result<Vec<EmbeddingRow>> {
    dataset
        .scenes
        .par_iter()
        .map(|s| {
            Ok(EmbeddingRow {
                scene_id: s.scene_id.clone(),
                scene_type: s.scene_type.clone(),
                vector: enc.encode(store, &s.cloud)?.vector,
            })
        })
        .collect()
}

/// Tab-separated `scene_id, scene_type, v_1 .. v_d`, one scene per line.
pub fn embedding_table_to_tsv(rows: &[EmbeddingRow]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&r.scene_id);
        s.push('\t');
        s.push_str(&r.scene_type);
        for v in &r.vector {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn embedding_table_from_tsv(text: &str) -> Result<Vec<EmbeddingRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.split('\t');
            let (Some(id), Some(ty)) = (parts.next(), parts.next()) else {
                return Err(Error::Load(format!("embedding table line {}: missing columns", i + 1)));
            };
            let vector = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Load(format!("embedding table line {}: {e}", i + 1)))?;
            Ok(EmbeddingRow {
                scene_id: id.into(),
                scene_type: ty.into(),
                vector,
            })
        })
        .collect()
}

pub fn write_embedding_table(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    std::fs::write(path, embedding_table_to_tsv(rows))?;
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

/// Mean cosine over pairs of distinct rows with the same scene type and
/// over pairs with different types. `None` when a group has no pairs.
pub fn intra_inter_cosine(rows: &[EmbeddingRow]) -> (Option<f64>, Option<f64>) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = cosine(&rows[i].vector, &rows[j].vector);
            if rows[i].scene_type == rows[j].scene_type {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    ((ni > 0).then(|| intra / ni as f64), (nx > 0).then(|| inter / nx as f64))
}

/// Fraction of scenes whose most similar caption embedding (by dot
/// product, ties to the lower index) carries the scene's own caption text.
pub fn scene_to_text_retrieval(scenes: &[Vec<f64>], captions: &[(String, Vec<f64>)], own: &[String]) -> f64 {
    let hits = scenes
        .iter()
        .zip(own)
        .filter(|(z, own)| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (k, (_, e)) in captions.iter().enumerate() {
                let v: f64 = z.iter().zip(e).map(|(a, b)| a * b).sum();
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            &captions[best].0 == *own
        })
        .count();
    hits as f64 / scenes.len().max(1) as f64
}

/// Mean-centered projection onto the top two principal directions. Each
/// direction's sign makes its largest-magnitude component positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Projection("need at least two rows".into()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Projection("rows must share a positive dimension".into()));
    }
    let mut x = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[(i, j)] = rows[i][j] - mean;
        }
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale <= 1e-12 {
        return Err(Error::Projection("all rows are identical (rank 0)".into()));
    }
    let gram = &x * x.transpose();
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let mut out = vec![[0.0; 2]; n];
    for (k, &idx) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[idx] <= top * 1e-12 {
            continue;
        }
        // Principal direction in feature space, proportional to Xᵀu.
        let mut v = x.transpose() * eig.eigenvectors.column(idx);
        v /= v.norm();
        let mut pivot = 0;
        for j in 1..d {
            if v[j].abs() > v[pivot].abs() + 1e-12 {
                pivot = j;
            }
        }
        if v[pivot] < 0.0 {
            v = -v;
        }
        let coords = &x * v;
        for i in 0..n {
            out[i][k] = coords[i];
        }
    }
    Ok(out)
}
