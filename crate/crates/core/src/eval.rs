//! Evaluation protocols over frozen embeddings.
//!
//! Unsupervised similarity scoring (cosine of the two sentence embeddings
//! against graded gold scores, compared by Spearman's rank correlation),
//! binary pair classification by a dev-tuned cosine threshold, and a
//! k-fold cross-validated logistic-regression probe that treats embeddings
//! as fixed features.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::data::SentencePair;
use crate::encoder::{DualEncoderModel, EncoderError, Tokenizer};
use crate::graph::stable_sigmoid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("rank correlation is undefined for a constant sequence")]
    ConstantInput,
    #[error("the dev split is empty; cannot tune a threshold")]
    EmptyDevSplit,
    #[error("fold count must satisfy 2 <= folds <= samples, got {folds} for {samples}")]
    BadFolds { folds: usize, samples: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("pair set mixes graded scores and binary labels")]
    MixedGold,
    #[error("empty evaluation set")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Cosine similarity in `[-1, 1]`; a degenerate (near-zero-norm) operand
/// yields 0 with a warning rather than NaN.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(EvalError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        log::warn!("cosine of a degenerate embedding (norms {nu:.3e}, {nv:.3e}); reporting 0");
        return Ok(0.0);
    }
    Ok(dot / (nu * nv))
}

/// Ranks with ties sharing their average rank (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFew {
            need: 2,
            got: xs.len(),
        });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Confusion counts plus the derived rates. Undefined rates (zero
/// denominators) are reported as 0 with their flag cleared.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

pub fn classification_metrics(predicted: &[bool], gold: &[bool]) -> Result<Metrics> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: predicted.len(),
            right: gold.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    Ok(Metrics {
        tp,
        fp,
        fn_,
        tn,
        accuracy: (tp + tn) as f64 / predicted.len() as f64,
        precision: if precision_defined {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        },
        recall: if recall_defined {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        },
        precision_defined,
        recall_defined,
    })
}

/// Gold signal attached to an evaluation pair set.
#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    /// Graded relatedness scores (e.g. 0 to 5).
    Scores(Vec<f64>),
    /// Binary similar/dissimilar labels.
    Labels(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPairSet {
    pub pairs: Vec<SentencePair>,
    pub gold: Gold,
}

impl ScoredPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Option<&[bool]> {
        match &self.gold {
            Gold::Labels(l) => Some(l),
            Gold::Scores(_) => None,
        }
    }

    pub fn scores(&self) -> Option<&[f64]> {
        match &self.gold {
            Gold::Scores(s) => Some(s),
            Gold::Labels(_) => None,
        }
    }
}

/// Load evaluation pairs: JSONL with `premise`/`hypothesis` plus either a
/// numeric `score` or a 0/1 `label`, consistently across the file.
pub fn load_scored_jsonl(path: &Path) -> Result<ScoredPairSet> {
    #[derive(Deserialize)]
    struct Record {
        premise: String,
        hypothesis: String,
        #[serde(default)]
        score: Option<f64>,
        #[serde(default)]
        label: Option<u8>,
    }

    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        match (rec.score, rec.label) {
            (Some(s), None) if s.is_finite() => scores.push(s),
            (None, Some(l @ (0 | 1))) => labels.push(l == 1),
            _ => {
                return Err(EvalError::Parse {
                    line: line_no,
                    msg: "need exactly one of a finite \"score\" or a 0/1 \"label\"".into(),
                })
            }
        }
        pairs.push(SentencePair::new(rec.premise, rec.hypothesis));
    }
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let gold = match (scores.is_empty(), labels.is_empty()) {
        (false, true) => Gold::Scores(scores),
        (true, false) => Gold::Labels(labels),
        _ => return Err(EvalError::MixedGold),
    };
    Ok(ScoredPairSet { pairs, gold })
}

/// Cosine similarity of the two sentence embeddings for every pair.
pub fn pair_cosines(
    model: &DualEncoderModel,
    tokenizer: &Tokenizer,
    pairs: &[SentencePair],
) -> Result<Vec<f64>> {
    let premises: Vec<&str> = pairs.iter().map(|p| p.premise.as_str()).collect();
    let hyps: Vec<&str> = pairs.iter().map(|p| p.hypothesis.as_str()).collect();
    let us = model.encode_batch(tokenizer, &premises)?;
    let vs = model.encode_batch(tokenizer, &hyps)?;
    us.iter()
        .zip(&vs)
        .map(|(u, v)| cosine_similarity(u.values(), v.values()))
        .collect()
}

/// Spearman correlation between pair cosines and graded gold scores.
pub fn similarity_spearman(
    model: &DualEncoderModel,
    tokenizer: &Tokenizer,
    pairs: &[SentencePair],
    gold_scores: &[f64],
) -> Result<f64> {
    let sims = pair_cosines(model, tokenizer, pairs)?;
    spearman(&sims, gold_scores)
}

/// Accuracy of argmax class predictions over pair scores.
pub fn argmax_accuracy(
    model: &DualEncoderModel,
    tokenizer: &Tokenizer,
    pairs: &[SentencePair],
    gold_classes: &[usize],
) -> Result<f64> {
    if pairs.len() != gold_classes.len() {
        return Err(EvalError::LengthMismatch {
            left: pairs.len(),
            right: gold_classes.len(),
        });
    }
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let c = model.classes();
    let mut correct = 0usize;
    for chunk_start in (0..pairs.len()).step_by(256) {
        let chunk = &pairs[chunk_start..(chunk_start + 256).min(pairs.len())];
        let refs: Vec<(&str, &str)> = chunk
            .iter()
            .map(|p| (p.premise.as_str(), p.hypothesis.as_str()))
            .collect();
        let scores = model.score_pairs(tokenizer, &refs)?;
        for (row, gold) in gold_classes[chunk_start..chunk_start + chunk.len()]
            .iter()
            .enumerate()
        {
            let row_scores = &scores.data()[row * c..(row + 1) * c];
            let predicted = row_scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                .map(|(i, _)| i)
                .expect("at least one class");
            if predicted == *gold {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Pick the accuracy-maximizing threshold on a grid of step 0.01 over
/// `[0, 1]`, boundaries included; ties prefer the lowest threshold.
pub fn tune_threshold(similarities: &[f64], gold: &[bool]) -> Result<f64> {
    if similarities.is_empty() {
        return Err(EvalError::EmptyDevSplit);
    }
    if similarities.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: similarities.len(),
            right: gold.len(),
        });
    }
    let mut best = (0.0, -1.0);
    for i in 0..=100 {
        let threshold = i as f64 / 100.0;
        let predicted: Vec<bool> = similarities.iter().map(|&s| s >= threshold).collect();
        let acc = classification_metrics(&predicted, gold)?.accuracy;
        if acc > best.1 {
            best = (threshold, acc);
        }
    }
    Ok(best.0)
}

/// Classify pairs as similar when their embedding cosine reaches the
/// threshold, and score against binary gold labels.
pub fn similarity_threshold_eval(
    model: &DualEncoderModel,
    tokenizer: &Tokenizer,
    pairs: &[SentencePair],
    gold: &[bool],
    threshold: f64,
) -> Result<Metrics> {
    let sims = pair_cosines(model, tokenizer, pairs)?;
    if sims.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: sims.len(),
            right: gold.len(),
        });
    }
    let predicted: Vec<bool> = sims.iter().map(|&s| s >= threshold).collect();
    classification_metrics(&predicted, gold)
}

/// Per-fold accuracies of the probe; skipped folds carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub fold_accuracies: Vec<Option<f64>>,
    pub mean_accuracy: f64,
    pub folds: usize,
}

const PROBE_L2: f64 = 1e-4;
const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 10_000;

/// Fit L2-regularized logistic regression by full-batch gradient descent.
///
/// Returns weights with the intercept last. The step size is the inverse of
/// a Lipschitz bound on the gradient, so descent is monotone.
fn fit_logreg(features: &[&[f64]], labels: &[bool]) -> Vec<f64> {
    let n = features.len();
    let d = features[0].len();
    let mut w = vec![0.0; d + 1];
    let lipschitz = 0.25
        * (features
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0)
            .sum::<f64>()
            / n as f64)
        + PROBE_L2;
    let lr = 1.0 / lipschitz;
    for _ in 0..PROBE_MAX_ITERS {
        let mut grad = vec![0.0; d + 1];
        for (x, &y) in features.iter().zip(labels) {
            let z = x.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let err = stable_sigmoid(z) - f64::from(y);
            for j in 0..d {
                grad[j] += err * x[j];
            }
            grad[d] += err;
        }
        for g in grad.iter_mut() {
            *g /= n as f64;
        }
        // Weight decay on the weights, not the intercept.
        for j in 0..d {
            grad[j] += PROBE_L2 * w[j];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= lr * gj;
        }
        if norm < PROBE_TOL {
            break;
        }
    }
    w
}

/// K-fold cross-validated logistic-regression probe over fixed features.
///
/// Folds are assigned deterministically by index stride (`i % folds`).
/// A fold whose training portion is single-class is skipped with a flag.
pub fn logreg_probe(features: &[Vec<f64>], labels: &[bool], folds: usize) -> Result<ProbeReport> {
    let n = features.len();
    if n != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if folds < 2 || folds > n {
        return Err(EvalError::BadFolds { folds, samples: n });
    }
    let d = features.first().map_or(0, Vec::len);
    for f in features {
        if f.len() != d {
            return Err(EvalError::DimMismatch {
                left: d,
                right: f.len(),
            });
        }
    }

    let mut fold_accuracies = Vec::with_capacity(folds);
    for fold in 0..folds {
        let mut train_x: Vec<&[f64]> = Vec::new();
        let mut train_y = Vec::new();
        let mut test_idx = Vec::new();
        for i in 0..n {
            if i % folds == fold {
                test_idx.push(i);
            } else {
                train_x.push(features[i].as_slice());
                train_y.push(labels[i]);
            }
        }
        let single_class = train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y);
        if train_y.is_empty() || single_class || test_idx.is_empty() {
            log::warn!("fold {fold}: single-class or empty split, skipping");
            fold_accuracies.push(None);
            continue;
        }
        let w = fit_logreg(&train_x, &train_y);
        let correct = test_idx
            .iter()
            .filter(|&&i| {
                let z = features[i]
                    .iter()
                    .zip(&w[..d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + w[d];
                (z >= 0.0) == labels[i]
            })
            .count();
        fold_accuracies.push(Some(correct as f64 / test_idx.len() as f64));
    }

    let kept: Vec<f64> = fold_accuracies.iter().filter_map(|a| *a).collect();
    if kept.is_empty() {
        return Err(EvalError::ConstantInput);
    }
    Ok(ProbeReport {
        mean_accuracy: kept.iter().sum::<f64>() / kept.len() as f64,
        fold_accuracies,
        folds,
    })
}
