//! Evaluation metrics: exact match, box IoU and localization accuracy, and
//! the sentence metrics BLEU-n, ROUGE-L and CIDEr.
//!
//! Sentences are tokenized by the answer normalization (lowercase, trimmed,
//! collapsed whitespace) followed by a whitespace split.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_data::{normalize_answer, AxisAlignedBox};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;

pub fn tokenize(s: &str) -> Vec<String> {
    normalize_answer(s).split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
}

/// 1 when the normalized prediction equals any normalized ground truth.
pub fn em_at_1(predicted: &str, ground_truths: &[String]) -> f64 {
    let p = normalize_answer(predicted);
    if ground_truths.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

pub fn box_iou(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let inter: f64 = (0..3)
        .map(|k| (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0))
        .product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of pairs whose IoU is strictly above `threshold`.
pub fn acc_at_iou(predicted: &[AxisAlignedBox], ground_truth: &[AxisAlignedBox], threshold: f64) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::Input(format!(
            "{} predicted boxes for {} ground-truth boxes",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted
        .iter()
        .zip(ground_truth)
        .filter(|(p, g)| box_iou(p, g) > threshold)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights over 1..=n, clipped counts, brevity
/// penalty against the closest reference length (shorter on ties), and
/// add-one smoothing of zero match counts for orders 2 and up.
pub fn bleu_n(candidate: &str, references: &[String], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Input(format!("BLEU order {n} outside 1..=4")));
    }
    let cand = tokenize(candidate);
    if cand.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let counts = ngram_counts(&cand, k);
        let total: usize = counts.values().sum();
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            if k == 1 {
                return Ok(0.0);
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("at least one reference");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// `F_β = (1 + β²)·P·R / (R + β²·P)` from LCS precision and recall.
pub fn rouge_f(precision: f64, recall: f64, beta: f64) -> f64 {
    if precision == 0.0 || recall == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * precision * recall / (recall + b2 * precision)
}

/// ROUGE-L F-measure (β = 1.2), maximized over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = tokenize(r);
            if r.is_empty() {
                return 0.0;
            }
            let l = lcs(&cand, &r) as f64;
            rouge_f(l / cand.len() as f64, l / r.len() as f64, ROUGE_BETA)
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of reference n-grams, computed once per corpus.
pub struct CiderCorpus {
    num_items: usize,
    df: BTreeMap<Vec<String>, usize>,
}

impl CiderCorpus {
    pub fn new(references: &[Vec<String>]) -> Result<Self> {
        if references.is_empty() || references.iter().all(|r| r.is_empty()) {
            return Err(Error::Input("CIDEr needs a non-empty reference corpus".into()));
        }
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
            for r in refs {
                let toks = tokenize(r);
                for n in 1..=CIDER_MAX_N {
                    for g in ngram_counts(&toks, n).into_keys() {
                        seen.insert(g.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self {
            num_items: references.len(),
            df,
        })
    }

    /// TF-IDF vector of one order; n-grams absent from every reference get
    /// the document frequency 1.
    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> BTreeMap<&'a [String], f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let df = self.df.get(g).copied().unwrap_or(0).max(1);
                (g, c as f64 / total as f64 * (self.num_items as f64 / df as f64).ln())
            })
            .collect()
    }

    /// `10 · (1/4) Σ_n mean_j cos(g_n(c), g_n(s_j))`.
    pub fn score(&self, candidate: &str, references: &[String]) -> f64 {
        let cand = tokenize(candidate);
        if references.is_empty() {
            return 0.0;
        }
        let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
        let mut total = 0.0;
        for n in 1..=CIDER_MAX_N {
            let vc = self.vector(&cand, n);
            let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut sum = 0.0;
            for r in &refs {
                let vr = self.vector(r, n);
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().filter_map(|(g, a)| vr.get(g).map(|b| a * b)).sum();
                    sum += dot / (nc * nr);
                }
            }
            total += sum / refs.len() as f64;
        }
        10.0 * total / CIDER_MAX_N as f64
    }
}

/// Corpus CIDEr: the mean per-item score, with document frequencies taken
/// from `references`.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let corpus = CiderCorpus::new(references)?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| corpus.score(c, r))
        .sum::<f64>()
        / candidates.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em_at_1: f64,
    /// Localization accuracies; absent for tasks without boxes.
    pub acc_at_025: Option<f64>,
    pub acc_at_05: Option<f64>,
    pub bleu_1: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub num_questions: usize,
    pub num_boxes: usize,
}

/// One scored prediction: the decoded answer, the ground-truth answers and
/// optionally a predicted/ground-truth box pair.
#[derive(Clone, Debug)]
pub struct ScoredItem {
    pub answer: String,
    pub ground_truths: Vec<String>,
    pub boxes: Option<(AxisAlignedBox, AxisAlignedBox)>,
}

pub fn evaluate(items: &[ScoredItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Ok(EvalReport::default());
    }
    if items.iter().any(|i| i.ground_truths.is_empty()) {
        return Err(Error::Input("every question needs at least one ground-truth answer".into()));
    }
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&ScoredItem) -> Result<f64>| -> Result<f64> {
        let mut s = 0.0;
        for i in items {
            s += f(i)?;
        }
        Ok(s / n)
    };
    let (pred, gt): (Vec<AxisAlignedBox>, Vec<AxisAlignedBox>) = items.iter().filter_map(|i| i.boxes).unzip();
    let answers: Vec<String> = items.iter().map(|i| i.answer.clone()).collect();
    let refs: Vec<Vec<String>> = items.iter().map(|i| i.ground_truths.clone()).collect();
    Ok(EvalReport {
        em_at_1: mean(&|i| Ok(em_at_1(&i.answer, &i.ground_truths)))?,
        acc_at_025: (!pred.is_empty()).then(|| acc_at_iou(&pred, &gt, 0.25)).transpose()?,
        acc_at_05: (!pred.is_empty()).then(|| acc_at_iou(&pred, &gt, 0.5)).transpose()?,
        bleu_1: mean(&|i| bleu_n(&i.answer, &i.ground_truths, 1))?,
        bleu_4: mean(&|i| bleu_n(&i.answer, &i.ground_truths, 4))?,
        rouge_l: mean(&|i| Ok(rouge_l(&i.answer, &i.ground_truths)))?,
        cider: cider(&answers, &refs)?,
        num_questions: items.len(),
        num_boxes: pred.len(),
    })
}
