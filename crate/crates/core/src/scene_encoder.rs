//! The 3D scene encoder: per-point features, vote-and-group object
//! proposals with box heads, one transformer layer over the proposals with a
//! learnable global token, and a bias-free projection into the alignment
//! space. Also the detection loss that supervises the proposal heads.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Linear, Mlp};
use crate::scene_data::{dist, AxisAlignedBox, ObjectAnnotation, PointCloud, Vec3};
use crate::tensor::Mat;

/// Smallest predicted box extent, keeping sizes strictly positive.
pub const MIN_BOX_SIZE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneEncoderConfig {
    /// Hidden widths of the shared point network; its output is `feature_dim` wide.
    pub point_hidden: Vec<usize>,
    /// Neighborhood size for the point-feature max-pool (including the point itself).
    pub knn: usize,
    /// Number of proposals `M`.
    pub num_proposals: usize,
    /// Maximum number of points grouped around each vote.
    pub group_size: usize,
    /// Grouping radius in meters.
    pub radius: f64,
    pub feature_dim: usize,
    pub vote_hidden: usize,
    pub group_hidden: usize,
    pub head_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for SceneEncoderConfig {
    fn default() -> Self {
        Self {
            point_hidden: vec![64, 128],
            knn: 16,
            num_proposals: 32,
            group_size: 16,
            radius: 0.3,
            feature_dim: 128,
            vote_hidden: 64,
            group_hidden: 128,
            head_hidden: 128,
            layers: 1,
            heads: 4,
            ffn_dim: 256,
            embed_dim: 512,
            num_classes: 8,
        }
    }
}

impl SceneEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene encoder: {m}")));
        if self.num_proposals == 0 || self.knn == 0 || self.group_size == 0 {
            return bad("num_proposals, knn and group_size must be positive");
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return bad("feature_dim must be divisible by heads");
        }
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.num_classes == 0 || self.embed_dim == 0 {
            return bad("num_classes and embed_dim must be positive");
        }
        Ok(())
    }
}

/// Geometry-only preprocessing of a cloud: inputs, neighborhoods and seeds.
/// Independent of the weights, so it can be cached across training steps.
#[derive(Clone, Debug)]
pub struct SceneGeometry {
    /// `N × 6`: xyz and colors shifted to `[-0.5, 0.5]`.
    pub features: Mat,
    pub points: Vec<Vec3>,
    pub neighborhoods: Vec<Vec<usize>>,
    pub seeds: Vec<usize>,
}

/// Indices of the `k` nearest points to `q` (ties by lower index), filtered by `keep`.
fn nearest(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, q), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    let k = k.min(d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Farthest-point sampling of `m` indices. Starts from the point farthest
/// from the centroid; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], m: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n as f64;
        }
    }
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    };
    let from_centroid: Vec<f64> = points.iter().map(|p| dist2(p, &c)).collect();
    let mut chosen = vec![argmax(&from_centroid)];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < m {
        let next = argmax(&min_d);
        chosen.push(next);
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    chosen
}

impl SceneGeometry {
    pub fn new(cloud: &PointCloud, config: &SceneEncoderConfig) -> Result<Self> {
        if cloud.len() < config.num_proposals {
            return Err(Error::Proposal(format!(
                "cloud has {} points, fewer than the {} proposals",
                cloud.len(),
                config.num_proposals
            )));
        }
        let points = cloud.points().to_vec();
        let mut features = cloud.features();
        for r in 0..features.rows() {
            for v in &mut features.row_mut(r)[3..] {
                *v -= 0.5;
            }
        }
        let neighborhoods = points
            .iter()
            .map(|q| nearest(&points, q, config.knn).into_iter().map(|(_, i)| i).collect())
            .collect();
        let seeds = farthest_point_sample(&points, config.num_proposals);
        Ok(Self {
            features,
            points,
            neighborhoods,
            seeds,
        })
    }

    /// Up to `k` nearest points within `radius` of `q`; the single nearest
    /// point when none is inside.
    pub fn ball_group(&self, q: &Vec3, radius: f64, k: usize) -> Vec<usize> {
        let near = nearest(&self.points, q, k);
        let inside: Vec<usize> = near.iter().filter(|(d, _)| *d <= radius * radius).map(|(_, i)| *i).collect();
        if inside.is_empty() {
            vec![near[0].1]
        } else {
            inside
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal {
    pub feature: Vec<f64>,
    pub bbox: AxisAlignedBox,
    pub objectness_logit: f64,
    pub class_logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTokens {
    /// `M × feature_dim`.
    pub object_tokens: Mat,
    pub global_token: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEmbedding {
    pub vector: Vec<f64>,
}

/// Tape handles of one scene-encoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SceneForward {
    /// Pooled cluster features before the transformer, `M × feature_dim`.
    pub proposal_features: Var,
    pub centers: Var,
    pub sizes: Var,
    pub objectness: Var,
    pub class_logits: Var,
    /// Refined object tokens `C`, `M × feature_dim`.
    pub object_tokens: Var,
    pub global_token: Var,
    /// Unit-norm `1 × embed_dim`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub config: SceneEncoderConfig,
    pub point_net: Mlp,
    pub vote_net: Mlp,
    pub group_net: Mlp,
    pub head_net: Mlp,
    pub cls_token: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub proj: Linear,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: SceneEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let f = config.feature_dim;
        let mut point_dims = vec![6];
        point_dims.extend(&config.point_hidden);
        point_dims.push(f);
        Ok(Self {
            point_net: Mlp::new(store, &format!("{name}.point_net"), &point_dims, rng),
            vote_net: Mlp::new(store, &format!("{name}.vote_net"), &[f, config.vote_hidden, 3], rng),
            group_net: Mlp::new(store, &format!("{name}.group_net"), &[f + 3, config.group_hidden, f], rng),
            head_net: Mlp::new(
                store,
                &format!("{name}.head_net"),
                &[f, config.head_hidden, 7 + config.num_classes],
                rng,
            ),
            cls_token: store.register(format!("{name}.cls_token"), Mat::uniform(1, f, 0.1, rng)),
            layers: (0..config.layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), f, config.heads, config.ffn_dim, rng))
                .collect(),
            proj: Linear::new(store, &format!("{name}.proj"), f, config.embed_dim, false, rng),
            config,
        })
    }

    pub fn geometry(&self, cloud: &PointCloud) -> Result<SceneGeometry> {
        SceneGeometry::new(cloud, &self.config)
    }

    /// Proposal stage: point features, votes, grouping and box heads.
    /// Returns `(features, centers, sizes, objectness, class_logits)`.
    pub fn propose_tape(&self, t: &mut Tape, store: &ParamStore, geom: &SceneGeometry) -> (Var, Var, Var, Var, Var) {
        let cfg = &self.config;
        let input = t.constant(geom.features.clone());
        let h = self.point_net.forward(t, store, input);
        let h = t.relu(h);
        let h = t.group_max(h, &geom.neighborhoods);

        let seed_feat = t.gather_rows(h, &geom.seeds);
        let offsets = self.vote_net.forward(t, store, seed_feat);
        let seed_xyz = t.constant(Mat::from_rows(&geom.seeds.iter().map(|&i| geom.points[i]).collect::<Vec<_>>()));
        let votes = t.add(seed_xyz, offsets);

        let vote_vals = t.value(votes).clone();
        let mut flat = Vec::new();
        let mut owner = Vec::new();
        let mut groups = Vec::with_capacity(cfg.num_proposals);
        for m in 0..vote_vals.rows() {
            let v = [vote_vals[(m, 0)], vote_vals[(m, 1)], vote_vals[(m, 2)]];
            let members = geom.ball_group(&v, cfg.radius, cfg.group_size);
            groups.push((flat.len()..flat.len() + members.len()).collect::<Vec<_>>());
            owner.extend(std::iter::repeat(m).take(members.len()));
            flat.extend(members);
        }
        let member_feat = t.gather_rows(h, &flat);
        let member_xyz = t.constant(Mat::from_rows(&flat.iter().map(|&i| geom.points[i]).collect::<Vec<_>>()));
        let owner_vote = t.gather_rows(votes, &owner);
        let rel = t.sub(member_xyz, owner_vote);
        let rel = t.scale(rel, 1.0 / cfg.radius);
        let g = t.concat_cols(&[member_feat, rel]);
        let g = self.group_net.forward(t, store, g);
        let g = t.relu(g);
        let features = t.group_max(g, &groups);

        let heads = self.head_net.forward(t, store, features);
        let delta = t.slice_cols(heads, 0, 3);
        let centers = t.add(votes, delta);
        let raw_size = t.slice_cols(heads, 3, 3);
        let sizes = t.softplus(raw_size);
        let floor = t.constant(Mat::filled(cfg.num_proposals, 3, MIN_BOX_SIZE));
        let sizes = t.add(sizes, floor);
        let objectness = t.slice_cols(heads, 6, 1);
        let class_logits = t.slice_cols(heads, 7, cfg.num_classes);
        (features, centers, sizes, objectness, class_logits)
    }

    /// `[CLS; features]` through the transformer layers; returns
    /// `(object tokens M×f, global token 1×f)`.
    pub fn refine_tape(&self, t: &mut Tape, store: &ParamStore, features: Var) -> (Var, Var) {
        let m = t.shape(features).0;
        let cls = t.param(store, self.cls_token);
        let mut x = t.concat_rows(&[cls, features]);
        for layer in &self.layers {
            x = layer.forward(t, store, x, None);
        }
        (t.slice_rows(x, 1, m), t.slice_rows(x, 0, 1))
    }

    pub fn project_tape(&self, t: &mut Tape, store: &ParamStore, global: Var) -> Var {
        let z = self.proj.forward(t, store, global);
        t.l2_normalize_rows(z, 1e-12)
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, geom: &SceneGeometry) -> SceneForward {
        let (features, centers, sizes, objectness, class_logits) = self.propose_tape(t, store, geom);
        let (object_tokens, global_token) = self.refine_tape(t, store, features);
        let embedding = self.project_tape(t, store, global_token);
        SceneForward {
            proposal_features: features,
            centers,
            sizes,
            objectness,
            class_logits,
            object_tokens,
            global_token,
            embedding,
        }
    }

    pub fn propose_objects(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Vec<ObjectProposal>> {
        let geom = self.geometry(cloud)?;
        let mut t = Tape::new();
        let (f, c, s, o, k) = self.propose_tape(&mut t, store, &geom);
        proposals_from_values(t.value(f), t.value(c), t.value(s), t.value(o), t.value(k))
    }

    pub fn refine_with_transformer(&self, store: &ParamStore, proposals: &[ObjectProposal]) -> SceneTokens {
        let rows: Vec<&[f64]> = proposals.iter().map(|p| p.feature.as_slice()).collect();
        let mut t = Tape::new();
        let f = t.constant(Mat::from_rows(&rows));
        let (o, g) = self.refine_tape(&mut t, store, f);
        SceneTokens {
            object_tokens: t.value(o).clone(),
            global_token: t.value(g).as_slice().to_vec(),
        }
    }

    pub fn project_to_clip_space(&self, store: &ParamStore, global_token: &[f64]) -> Result<SceneEmbedding> {
        let z = Mat::row_vector(global_token).matmul(store.get(self.proj.weight));
        let n = z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::DegenerateProjection);
        }
        Ok(SceneEmbedding {
            vector: z.as_slice().iter().map(|v| v / n).collect(),
        })
    }

    pub fn encode(&self, store: &ParamStore, cloud: &PointCloud) -> Result<SceneEmbedding> {
        let proposals = self.propose_objects(store, cloud)?;
        let tokens = self.refine_with_transformer(store, &proposals);
        self.project_to_clip_space(store, &tokens.global_token)
    }
}

pub fn proposals_from_values(
    features: &Mat,
    centers: &Mat,
    sizes: &Mat,
    objectness: &Mat,
    class_logits: &Mat,
) -> Result<Vec<ObjectProposal>> {
    (0..features.rows())
        .map(|m| {
            let c = centers.row(m);
            let s = sizes.row(m);
            Ok(ObjectProposal {
                feature: features.row(m).to_vec(),
                bbox: AxisAlignedBox::new([c[0], c[1], c[2]], [s[0], s[1], s[2]])
                    .map_err(|e| Error::Proposal(format!("proposal {m}: {e}")))?,
                objectness_logit: objectness[(m, 0)],
                class_logits: class_logits.row(m).to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionLossConfig {
    /// Matched distance below which a proposal is positive (meters).
    pub positive_radius: f64,
    /// Matched distance beyond which a proposal is negative (meters).
    pub negative_radius: f64,
    /// Smooth-L1 transition point.
    pub smooth_l1_delta: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            positive_radius: 0.3,
            negative_radius: 0.6,
            smooth_l1_delta: 0.1,
        }
    }
}

/// Per-term detection loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub total: f64,
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub class: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLossVars {
    pub total: Var,
    pub objectness: Var,
    pub center: Var,
    pub size: Var,
    pub class: Var,
}

impl DetectionLossVars {
    pub fn values(&self, t: &Tape) -> DetectionLoss {
        DetectionLoss {
            total: t.value(self.total).item(),
            objectness: t.value(self.objectness).item(),
            center: t.value(self.center).item(),
            size: t.value(self.size).item(),
            class: t.value(self.class).item(),
        }
    }
}

/// Nearest annotation (by center distance) for each predicted center;
/// `None` when there are no annotations. Ties go to the earlier annotation.
pub fn match_proposals(centers: &Mat, annotations: &[ObjectAnnotation]) -> Vec<Option<(usize, f64)>> {
    (0..centers.rows())
        .map(|m| {
            let c = [centers[(m, 0)], centers[(m, 1)], centers[(m, 2)]];
            let mut best: Option<(usize, f64)> = None;
            for (j, a) in annotations.iter().enumerate() {
                let d = dist(&c, &a.bbox.center);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best
        })
        .collect()
}

/// `L_det = L_objness + L_center + L_size + L_cls` with distance-threshold
/// matching of predicted centers to annotation centers.
pub fn detection_loss_tape(
    t: &mut Tape,
    centers: Var,
    sizes: Var,
    objectness: Var,
    class_logits: Var,
    annotations: &[ObjectAnnotation],
    config: &DetectionLossConfig,
) -> DetectionLossVars {
    let m = t.shape(centers).0;
    let matches = match_proposals(t.value(centers), annotations);
    let mut obj_targets = Vec::with_capacity(m);
    let mut positive = vec![false; m];
    let mut center_target = Mat::zeros(m, 3);
    let mut size_target = Mat::zeros(m, 3);
    let mut class_targets = vec![None; m];
    for (i, mt) in matches.iter().enumerate() {
        match mt {
            Some((j, d)) if *d < config.positive_radius => {
                let a = &annotations[*j];
                positive[i] = true;
                obj_targets.push(Some(1.0));
                center_target.row_mut(i).copy_from_slice(&a.bbox.center);
                size_target.row_mut(i).copy_from_slice(&a.bbox.size);
                class_targets[i] = Some(a.class_id);
            }
            Some((_, d)) if *d <= config.negative_radius => obj_targets.push(None),
            _ => obj_targets.push(Some(0.0)),
        }
    }
    let obj = t.bce_with_logits(objectness, &obj_targets);
    let center = t.smooth_l1_rows(centers, &center_target, &positive, config.smooth_l1_delta);
    let size = t.smooth_l1_rows(sizes, &size_target, &positive, config.smooth_l1_delta);
    let class = t.cross_entropy_rows(class_logits, &class_targets);
    let s1 = t.add(obj, center);
    let s2 = t.add(s1, size);
    let total = t.add(s2, class);
    DetectionLossVars {
        total,
        objectness: obj,
        center,
        size,
        class,
    }
}

pub fn detection_loss(
    proposals: &[ObjectProposal],
    annotations: &[ObjectAnnotation],
    config: &DetectionLossConfig,
) -> DetectionLoss {
    let mut t = Tape::new();
    let c = t.constant(Mat::from_rows(&proposals.iter().map(|p| p.bbox.center).collect::<Vec<_>>()));
    let s = t.constant(Mat::from_rows(&proposals.iter().map(|p| p.bbox.size).collect::<Vec<_>>()));
    let o = t.constant(Mat::from_vec(
        proposals.len(),
        1,
        proposals.iter().map(|p| p.objectness_logit).collect(),
    ));
    let k = t.constant(Mat::from_rows(
        &proposals.iter().map(|p| p.class_logits.as_slice()).collect::<Vec<_>>(),
    ));
    detection_loss_tape(&mut t, c, s, o, k, annotations, config).values(&t)
}
