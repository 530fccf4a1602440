//! Text and image encoders playing the role of CLIP: a word-level tokenizer,
//! a small causal transformer over words, a small patch transformer over
//! rendered views, multi-view fusion, and an adapter for embeddings computed
//! elsewhere.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoidal_positions, EncoderLayer, LayerNorm, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::pretrain::contrastive_loss_tape;
use crate::renderer::ViewImage;
use crate::tensor::Mat;

pub const UNK: &str = "<unk>";
pub const EOT: &str = "<eot>";
pub const UNK_ID: usize = 0;
pub const EOT_ID: usize = 1;
pub const DEFAULT_MAX_LEN: usize = 77;

/// Lowercased alphanumeric runs; every other character separates words and
/// is dropped.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eot_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word vocabulary with `<unk>` at id 0 and `<eot>` at id 1, followed by
/// corpus words in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = corpus.into_iter().flat_map(split_words).collect();
        words.sort();
        words.dedup();
        let mut tokens = vec![UNK.to_string(), EOT.to_string()];
        tokens.extend(words);
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[UNK_ID] != UNK || tokens[EOT_ID] != EOT {
            return Err(Error::Load("vocabulary must start with <unk>, <eot>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Load(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Words beyond `max_len - 1` are truncated so `<eot>` always fits.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        assert!(max_len >= 2, "max_len must leave room for one word and <eot>");
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::Tokenization(format!("no words in {text:?}")));
        }
        let mut ids: Vec<usize> = words.iter().take(max_len - 1).map(|w| self.id(w)).collect();
        ids.push(EOT_ID);
        Ok(TokenSequence {
            eot_index: ids.len() - 1,
            ids,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabularyFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabularyFile = serde_json::from_str(s).map_err(|e| Error::Load(format!("vocabulary: {e}")))?;
        Self::from_tokens(f.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Width of the per-word output states.
    pub word_dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            word_dim: 512,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            patch: 16,
            image_width: 224,
            image_height: 224,
        }
    }
}

impl ImageEncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_width / self.patch) * (self.image_height / self.patch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    /// `N_q × word_dim`.
    pub word_embeddings: Mat,
    /// Unit-norm sentence embedding in the alignment space.
    pub pooled: Vec<f64>,
    pub eot_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    pub embedding: Vec<f64>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub word_proj: Linear,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        embed_dim: usize,
        config: TextEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = config.width;
        let token_embedding = store.register(format!("{name}.token_embedding"), Mat::uniform(vocab_size, w, 0.1, rng));
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), w, config.heads, config.ffn_dim, rng))
            .collect();
        Self {
            config,
            token_embedding,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), w),
            word_proj: Linear::new(store, &format!("{name}.word_proj"), w, config.word_dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), config.word_dim, embed_dim, false, rng),
        }
    }

    /// Returns `(word states N×word_dim, pooled 1×d unit row)`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, tokens: &TokenSequence) -> (Var, Var) {
        let n = tokens.len();
        let emb = t.param(store, self.token_embedding);
        let x = t.gather_rows(emb, &tokens.ids);
        let pos = t.constant(sinusoidal_positions(n, self.config.width));
        let mut x = t.add(x, pos);
        let mask = t.constant(causal_mask(n));
        for layer in &self.layers {
            x = layer.forward(t, store, x, Some(mask));
        }
        let x = self.final_norm.forward(t, store, x);
        let words = self.word_proj.forward(t, store, x);
        let eot = t.slice_rows(words, tokens.eot_index, 1);
        let pooled = self.proj.forward(t, store, eot);
        let pooled = t.l2_normalize_rows(pooled, NORM_EPS);
        (words, pooled)
    }

    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence) -> TextEncoding {
        let mut t = Tape::new();
        let (w, p) = self.forward(&mut t, store, tokens);
        TextEncoding {
            word_embeddings: t.value(w).clone(),
            pooled: t.value(p).as_slice().to_vec(),
            eot_index: tokens.eot_index,
        }
    }
}

/// Non-overlapping `patch × patch` tiles in row-major tile order, each
/// flattened as `(y, x, channel)` and shifted to `[-0.5, 0.5]`.
pub fn patchify(image: &ViewImage, patch: usize) -> Mat {
    let (gw, gh) = (image.width / patch, image.height / patch);
    let dim = patch * patch * 3;
    let mut m = Mat::zeros(gw * gh, dim);
    for ty in 0..gh {
        for tx in 0..gw {
            let row = m.row_mut(ty * gw + tx);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let o = ((ty * patch + y) * image.width + tx * patch + x) * 3;
                    for c in 0..3 {
                        row[k] = image.pixels[o + c] - 0.5;
                        k += 1;
                    }
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        config: ImageEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = config.width;
        let p = config.num_patches();
        Self {
            config,
            patch_embed: Linear::new(store, &format!("{name}.patch_embed"), config.patch * config.patch * 3, w, true, rng),
            cls: store.register(format!("{name}.cls"), Mat::uniform(1, w, 0.1, rng)),
            positions: store.register(format!("{name}.positions"), Mat::uniform(p + 1, w, 0.1, rng)),
            layers: (0..config.layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), w, config.heads, config.ffn_dim, rng))
                .collect(),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), w),
            proj: Linear::new(store, &format!("{name}.proj"), w, embed_dim, false, rng),
        }
    }

    pub fn check_shape(&self, image: &ViewImage) -> Result<()> {
        if image.width != self.config.image_width || image.height != self.config.image_height {
            return Err(Error::Input(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.width, image.height, self.config.image_width, self.config.image_height
            )));
        }
        Ok(())
    }

    /// Unit-norm `1×d` embedding of one view.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, image: &ViewImage) -> Result<Var> {
        self.check_shape(image)?;
        let patches = t.constant(patchify(image, self.config.patch));
        let x = self.patch_embed.forward(t, store, patches);
        let cls = t.param(store, self.cls);
        let x = t.concat_rows(&[cls, x]);
        let pos = t.param(store, self.positions);
        let mut x = t.add(x, pos);
        for layer in &self.layers {
            x = layer.forward(t, store, x, None);
        }
        let c = t.slice_rows(x, 0, 1);
        let c = self.final_norm.forward(t, store, c);
        let e = self.proj.forward(t, store, c);
        Ok(t.l2_normalize_rows(e, NORM_EPS))
    }

    pub fn encode(&self, store: &ParamStore, image: &ViewImage) -> Result<ImageEncoding> {
        let mut t = Tape::new();
        let e = self.forward(&mut t, store, image)?;
        Ok(ImageEncoding {
            embedding: t.value(e).as_slice().to_vec(),
        })
    }
}

/// Component-wise mean of the view embeddings, renormalized to unit length.
pub fn fuse_multiview(embeddings: &[ImageEncoding]) -> Result<ImageEncoding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Input("fuse_multiview needs at least one embedding".into()))?;
    let d = first.embedding.len();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        if e.embedding.len() != d {
            return Err(Error::Input("view embeddings differ in dimension".into()));
        }
        for (m, v) in mean.iter_mut().zip(&e.embedding) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= embeddings.len() as f64;
    }
    let n = l2_norm(&mean);
    if !(n > 1e-12) {
        return Err(Error::DegenerateFusion);
    }
    Ok(ImageEncoding {
        embedding: mean.into_iter().map(|v| v / n).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualEncoderConfig {
    pub embed_dim: usize,
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            text: TextEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
        }
    }
}

/// The reference text/image pair with its own parameter store.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl DualEncoder {
    pub fn new(vocab: Vocabulary, config: DualEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, "text", vocab.len(), config.embed_dim, config.text, &mut rng);
        let image = ImageEncoder::new(&mut store, "image", config.embed_dim, config.image, &mut rng);
        Self {
            config,
            vocab,
            store,
            text,
            image,
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(text, self.config.text.max_len)
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEncoding> {
        Ok(self.text.encode(&self.store, &self.tokenize(text)?))
    }

    pub fn encode_image(&self, image: &ViewImage) -> Result<ImageEncoding> {
        self.image.encode(&self.store, image)
    }

    pub fn encode_views(&self, views: &[ViewImage]) -> Result<ImageEncoding> {
        let encs = views
            .iter()
            .map(|v| self.encode_image(v))
            .collect::<Result<Vec<_>>>()?;
        fuse_multiview(&encs)
    }

    /// One contrastive step on (captions, views) pairs with the fused image
    /// embedding as anchor and caption `step mod len` as positive. Returns
    /// the loss.
    pub fn warmup_step(
        &mut self,
        pairs: &[(Vec<TokenSequence>, Vec<ViewImage>)],
        step: usize,
        tau: f64,
        opt: &mut Adam,
        lr: f64,
    ) -> Result<f64> {
        if pairs.iter().any(|(c, _)| c.is_empty()) {
            return Err(Error::Input("warm-up pair without captions".into()));
        }
        let mut t = Tape::new();
        let mut anchors = Vec::with_capacity(pairs.len());
        let mut positives = Vec::with_capacity(pairs.len());
        for (captions, views) in pairs {
            let tokens = &captions[step % captions.len()];
            let rows = views
                .iter()
                .map(|v| self.image.forward(&mut t, &self.store, v))
                .collect::<Result<Vec<_>>>()?;
            let stacked = t.concat_rows(&rows);
            let mean = t.mean_rows(stacked);
            anchors.push(t.l2_normalize_rows(mean, NORM_EPS));
            positives.push(self.text.forward(&mut t, &self.store, tokens).1);
        }
        let a = t.concat_rows(&anchors);
        let p = t.concat_rows(&positives);
        let loss = contrastive_loss_tape(&mut t, a, p, tau);
        let value = t.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite warm-up loss".into()));
        }
        let grads = t.backward(loss);
        opt.step(&mut self.store, &grads, lr);
        Ok(value)
    }

    /// Runs `steps` warm-up steps over all pairs with Adam at `lr`, cycling
    /// through each scene's captions.
    pub fn warmup(&mut self, pairs: &[(Vec<TokenSequence>, Vec<ViewImage>)], steps: usize, tau: f64, lr: f64) -> Result<Vec<f64>> {
        let mut opt = Adam::new(AdamConfig::new(lr, 0.0));
        (0..steps).map(|k| self.warmup_step(pairs, k, tau, &mut opt, lr)).collect()
    }
}

/// Embeddings produced outside this crate for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecomputedEmbedding {
    pub text: Vec<f64>,
    pub views: Vec<Vec<f64>>,
}

/// Adapter file: a JSON object mapping scene ids to [`PrecomputedEmbedding`].
/// Vectors are renormalized on load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingAdapter {
    pub dim: usize,
    pub scenes: BTreeMap<String, PrecomputedEmbedding>,
}

impl EmbeddingAdapter {
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: BTreeMap<String, PrecomputedEmbedding> =
            serde_json::from_str(s).map_err(|e| Error::Load(format!("embedding adapter: {e}")))?;
        let mut dim = None;
        let mut scenes = BTreeMap::new();
        for (id, rec) in raw {
            let bad = |m: &str| Error::Validation {
                record: format!("embedding {id}"),
                message: m.into(),
            };
            if rec.views.is_empty() {
                return Err(bad("no view embeddings"));
            }
            let d = *dim.get_or_insert(rec.text.len());
            let norm = |v: &[f64]| -> Result<Vec<f64>> {
                if v.len() != d {
                    return Err(bad("dimension mismatch"));
                }
                let n = l2_norm(v);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(bad("zero or non-finite vector"));
                }
                Ok(v.iter().map(|x| x / n).collect())
            };
            let text = norm(&rec.text)?;
            let views = rec.views.iter().map(|v| norm(v)).collect::<Result<_>>()?;
            scenes.insert(id, PrecomputedEmbedding { text, views });
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            scenes,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.scenes).expect("embeddings serialize")
    }

    /// Text embedding and fused view embedding for a scene.
    pub fn get(&self, scene_id: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let rec = self
            .scenes
            .get(scene_id)
            .ok_or_else(|| Error::Load(format!("no precomputed embedding for scene {scene_id}")))?;
        let views: Vec<ImageEncoding> = rec
            .views
            .iter()
            .map(|v| ImageEncoding { embedding: v.clone() })
            .collect();
        Ok((rec.text.clone(), fuse_multiview(&views)?.embedding))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient;
    use crate::renderer::CameraPose;

    fn tiny_config(res: usize) -> DualEncoderConfig {
        DualEncoderConfig {
            embed_dim: 16,
            text: TextEncoderConfig {
                width: 16,
                layers: 2,
                heads: 2,
                ffn_dim: 32,
                word_dim: 24,
                max_len: 77,
            },
            image: ImageEncoderConfig {
                width: 16,
                layers: 2,
                heads: 2,
                ffn_dim: 32,
                patch: 8,
                image_width: res,
                image_height: res,
            },
        }
    }

    fn pose() -> CameraPose {
        CameraPose {
            azimuth: 0.0,
            elevation: 0.0,
            distance: 1.0,
            look_at: [0.0; 3],
        }
    }

    fn solid(res: usize, v: f64) -> ViewImage {
        let mut img = ViewImage::blank(res, res, pose());
        img.pixels.iter_mut().for_each(|p| *p = v);
        img
    }

    #[test]
    fn tokenizer_follows_the_stated_rules() {
        let v = Vocabulary::build(["a red box", "the blue cylinder"]);
        let t = v.tokenize("Red box.", 77).unwrap();
        assert_eq!(t.ids, vec![v.id("red"), v.id("box"), EOT_ID]);
        assert_eq!(t.eot_index, 2);
        let t = v.tokenize("red giraffe", 77).unwrap();
        assert_eq!(t.ids[1], UNK_ID);
        let long = vec!["box"; 100].join(" ");
        let t = v.tokenize(&long, 77).unwrap();
        assert_eq!(t.len(), 77);
        assert_eq!(*t.ids.last().unwrap(), EOT_ID);
        assert!(matches!(v.tokenize(" ?! ", 77), Err(Error::Tokenization(_))));
    }

    #[test]
    fn vocabulary_round_trips_through_json() {
        let v = Vocabulary::build(["one two", "three"]);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocabulary::from_json(r#"{"tokens": ["a", "b"]}"#).is_err());
    }

    #[test]
    fn text_encoding_shapes_and_norm() {
        let vocab = Vocabulary::build(["a red box near a blue cylinder"]);
        let enc = DualEncoder::new(vocab, tiny_config(16), 1);
        let e = enc.encode_text("a red box near a cylinder").unwrap();
        assert_eq!(e.word_embeddings.shape(), (7, 24));
        assert!((l2_norm(&e.pooled) - 1.0).abs() < 1e-9);
        assert_eq!(enc.encode_text("a red box near a cylinder").unwrap(), e);
    }

    #[test]
    fn full_size_text_words_are_512_wide() {
        let vocab = Vocabulary::build(["a red box"]);
        let mut cfg = DualEncoderConfig::default();
        cfg.image = tiny_config(16).image;
        let enc = DualEncoder::new(vocab, cfg, 0);
        assert_eq!(enc.encode_text("a red box").unwrap().word_embeddings.shape(), (4, 512));
    }

    #[test]
    fn image_encoding_norm_and_patch_count() {
        let cfg = ImageEncoderConfig::default();
        assert_eq!(cfg.num_patches(), 196);
        let vocab = Vocabulary::build(["x"]);
        let enc = DualEncoder::new(vocab, tiny_config(32), 2);
        let e = enc.encode_image(&solid(32, 0.3)).unwrap();
        assert!((l2_norm(&e.embedding) - 1.0).abs() < 1e-9);
        assert!(matches!(enc.encode_image(&solid(16, 0.3)), Err(Error::Input(_))));
        assert_eq!(patchify(&solid(32, 0.3), 8).shape(), (16, 192));
    }

    #[test]
    fn white_and_black_images_separate_after_training() {
        let vocab = Vocabulary::build(["white", "black"]);
        let mut enc = DualEncoder::new(vocab, tiny_config(16), 3);
        let pairs = vec![
            (vec![enc.tokenize("white").unwrap()], vec![solid(16, 1.0)]),
            (vec![enc.tokenize("black").unwrap()], vec![solid(16, 0.0)]),
        ];
        let losses = enc.warmup(&pairs, 10, 0.07, 1e-3).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        let w = enc.encode_image(&solid(16, 1.0)).unwrap().embedding;
        let b = enc.encode_image(&solid(16, 0.0)).unwrap().embedding;
        let cos: f64 = w.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.999, "cosine {cos}");
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn fusion_rules() {
        let e = ImageEncoding {
            embedding: vec![0.6, 0.8, 0.0],
        };
        let fused = fuse_multiview(&[e.clone(), e.clone(), e.clone()]).unwrap();
        for (a, b) in fused.embedding.iter().zip(&e.embedding) {
            assert!((a - b).abs() < 1e-12);
        }
        let neg = ImageEncoding {
            embedding: e.embedding.iter().map(|v| -v).collect(),
        };
        assert!(matches!(fuse_multiview(&[e.clone(), neg]), Err(Error::DegenerateFusion)));
        let f = ImageEncoding {
            embedding: vec![0.0, 0.0, 1.0],
        };
        let g = ImageEncoding {
            embedding: vec![1.0, 0.0, 0.0],
        };
        let a = fuse_multiview(&[e.clone(), f.clone(), g.clone()]).unwrap();
        let b = fuse_multiview(&[g, e, f]).unwrap();
        for (x, y) in a.embedding.iter().zip(&b.embedding) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(fuse_multiview(&[]).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let vocab = Vocabulary::build(["a red box"]);
        let enc = DualEncoder::new(vocab, tiny_config(16), 4);
        let tokens = enc.tokenize("a red box").unwrap();
        let probe_text = |t: &mut Tape, s: &ParamStore| {
            let (_, p) = enc.text.forward(t, s, &tokens);
            t.sum_all(p)
        };
        for id in [enc.text.token_embedding, enc.text.layers[0].attn.q.weight, enc.text.proj.weight] {
            let r = check_param_gradient(&enc.store, id, 1e-6, probe_text);
            assert!(r.max_rel_error < 1e-4, "text {r:?}");
        }
        let mut img = solid(16, 0.2);
        img.pixels.iter_mut().enumerate().for_each(|(i, p)| *p = (i % 7) as f64 / 7.0);
        let probe_image = |t: &mut Tape, s: &ParamStore| {
            let e = enc.image.forward(t, s, &img).unwrap();
            t.sum_all(e)
        };
        for id in [enc.image.patch_embed.weight, enc.image.cls, enc.image.layers[1].ffn.up.weight] {
            let r = check_param_gradient(&enc.store, id, 1e-5, probe_image);
            assert!(r.max_rel_error < 1e-4, "image {r:?}");
        }
    }

    #[test]
    fn adapter_file_is_validated_and_fused() {
        let json = r#"{"s0": {"text": [3.0, 4.0], "views": [[1.0, 0.0], [0.0, 2.0]]}}"#;
        let a = EmbeddingAdapter::from_json(json).unwrap();
        assert_eq!(a.dim, 2);
        let (t, v) = a.get("s0").unwrap();
        assert_eq!(t, vec![0.6, 0.8]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0] - s).abs() < 1e-12 && (v[1] - s).abs() < 1e-12);
        assert!(a.get("s1").is_err());
        assert!(EmbeddingAdapter::from_json(r#"{"s0": {"text": [1.0], "views": [[1.0, 0.0]]}}"#).is_err());
        assert_eq!(EmbeddingAdapter::from_json(&a.to_json()).unwrap(), a);
    }
}
