//! Datasets of partially labeled sentence pairs.
//!
//! A dataset is a partition: C labeled subsets, one per class, plus the
//! unlabeled pool. Ingestion reads JSONL records of the form
//! `{"premise": ..., "hypothesis": ..., "label": <string or null>}`.
//! Mini-batches are drawn from every subset in proportion to subset sizes
//! (largest-remainder rounding), clamped so no nonempty labeled subset is
//! ever allocated zero slots — the risk estimators downstream need at least
//! one positive per class and one unlabeled sample.
//!
//! The seeded synthetic generator doubles as a brute-force oracle: it keeps
//! the true label of every generated pair, which makes exact population
//! risks computable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{sigmoid_loss, ClassPriors, Sign};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("line {line}: unknown label {label:?} not present in the label map")]
    UnknownLabel { line: usize, label: String },
    #[error("dataset has labels nowhere and no label map was provided")]
    NoLabels,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
}

type Result<T> = std::result::Result<T, DataError>;

/// One premise/hypothesis pair. Empty strings are permitted (and warned
/// about at tokenization time).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub premise: String,
    pub hypothesis: String,
}

impl SentencePair {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        Self {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
        }
    }
}

/// Which supervised objective the labels support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// Mutually exclusive classes, cross-entropy supervision.
    MonoLabel,
    /// Independent binary labels, binary cross-entropy supervision.
    MultiLabel,
    /// Single class with no negatives; no supervised term at all.
    PuOnly,
}

/// Sentence pairs partitioned into per-class labeled subsets and the
/// unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PUDataset {
    labeled: Vec<Vec<SentencePair>>,
    unlabeled: Vec<SentencePair>,
    label_names: Vec<String>,
    mode: DatasetMode,
}

impl PUDataset {
    pub fn new(
        labeled: Vec<Vec<SentencePair>>,
        unlabeled: Vec<SentencePair>,
        label_names: Vec<String>,
        mode: DatasetMode,
    ) -> Result<Self> {
        if labeled.is_empty() {
            return Err(DataError::Config("class count must be >= 1".into()));
        }
        if labeled.len() != label_names.len() {
            return Err(DataError::Config(format!(
                "{} labeled subsets but {} label names",
                labeled.len(),
                label_names.len()
            )));
        }
        if labeled.iter().all(Vec::is_empty) && unlabeled.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Ok(Self {
            labeled,
            unlabeled,
            label_names,
            mode,
        })
    }

    pub fn class_count(&self) -> usize {
        self.labeled.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn mode(&self) -> DatasetMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: DatasetMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn labeled(&self, class: usize) -> &[SentencePair] {
        &self.labeled[class]
    }

    pub fn unlabeled(&self) -> &[SentencePair] {
        &self.unlabeled
    }

    pub fn n_labeled_class(&self, class: usize) -> usize {
        self.labeled[class].len()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.iter().map(Vec::len).sum()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// Total pair count; the subsets partition it exactly.
    pub fn len(&self) -> usize {
        self.n_labeled() + self.n_unlabeled()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read a JSONL dataset. Labels map to class indices in first-seen order
/// unless an explicit label map fixes the order up front.
pub fn load_jsonl(path: &Path, label_map: Option<&[String]>) -> Result<PUDataset> {
    #[derive(Deserialize)]
    struct Record {
        premise: String,
        hypothesis: String,
        label: Option<String>,
    }

    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut names: Vec<String> = label_map.map(<[String]>::to_vec).unwrap_or_default();
    let mut labeled: Vec<Vec<SentencePair>> = names.iter().map(|_| Vec::new()).collect();
    let mut unlabeled = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let pair = SentencePair::new(rec.premise, rec.hypothesis);
        match rec.label {
            None => unlabeled.push(pair),
            Some(label) => {
                let class = match names.iter().position(|n| *n == label) {
                    Some(c) => c,
                    None if label_map.is_some() => {
                        return Err(DataError::UnknownLabel {
                            line: line_no,
                            label,
                        })
                    }
                    None => {
                        names.push(label);
                        labeled.push(Vec::new());
                        names.len() - 1
                    }
                };
                labeled[class].push(pair);
            }
        }
    }

    if labeled.iter().map(Vec::len).sum::<usize>() + unlabeled.len() == 0 {
        return Err(DataError::EmptyDataset);
    }
    if names.is_empty() {
        return Err(DataError::NoLabels);
    }
    let mode = if names.len() == 1 {
        DatasetMode::PuOnly
    } else {
        DatasetMode::MonoLabel
    };
    let counts: Vec<usize> = labeled.iter().map(Vec::len).collect();
    log::info!(
        "loaded {} pairs: labeled per class {:?} ({:?}), unlabeled {}",
        labeled.iter().map(Vec::len).sum::<usize>() + unlabeled.len(),
        counts,
        names,
        unlabeled.len()
    );
    PUDataset::new(labeled, unlabeled, names, mode)
}

/// One training mini-batch, keeping the per-class structure.
#[derive(Debug, Clone)]
pub struct Batch {
    pub per_class: Vec<Vec<SentencePair>>,
    pub unlabeled: Vec<SentencePair>,
    /// Global step index this batch was drawn for.
    pub step: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum::<usize>() + self.unlabeled.len()
    }
}

/// Apportion `total` slots across subsets proportionally to `sizes`.
///
/// Floor the exact quotas, then hand the leftover slots to the largest
/// fractional remainders (ties: larger subset first, then lower index).
/// Always sums exactly to `total`; a zero-sized subset always gets zero.
pub fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc = Vec::with_capacity(sizes.len());
    let mut fractions = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let quota = (total as f64) * (size as f64) / (sum as f64);
        let floor = quota.floor() as usize;
        alloc.push(floor);
        fractions.push((quota - floor as f64, size, i));
    }
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        fractions[b]
            .0
            .partial_cmp(&fractions[a].0)
            .expect("fractions are finite")
            .then(fractions[b].1.cmp(&fractions[a].1))
            .then(fractions[a].2.cmp(&fractions[b].2))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Raise every nonempty subset to at least one slot, taking from the
/// largest allocations.
fn clamp_nonempty(alloc: &mut [usize], sizes: &[usize]) {
    loop {
        let Some(starved) = (0..alloc.len()).find(|&i| sizes[i] > 0 && alloc[i] == 0) else {
            return;
        };
        let donor = (0..alloc.len())
            .filter(|&i| alloc[i] >= 2)
            .max_by_key(|&i| alloc[i])
            .expect("batch size >= subsets guarantees a donor");
        alloc[donor] -= 1;
        alloc[starved] += 1;
    }
}

fn draw<'a>(
    pairs: &'a [SentencePair],
    amount: usize,
    rng: &mut impl Rng,
) -> Vec<SentencePair> {
    if amount == 0 || pairs.is_empty() {
        return Vec::new();
    }
    if amount <= pairs.len() {
        rand::seq::index::sample(rng, pairs.len(), amount)
            .iter()
            .map(|i| pairs[i].clone())
            .collect()
    } else {
        // Subset smaller than its allocation: draw with replacement.
        (0..amount)
            .map(|_| pairs[rng.gen_range(0..pairs.len())].clone())
            .collect()
    }
}

/// Draw one batch reflecting the composition of the whole dataset.
///
/// Subset allocations are proportional to subset sizes, then clamped so that
/// every nonempty labeled subset and the unlabeled pool keep at least one
/// slot. Within a subset, sampling is uniform without replacement (with
/// replacement only when the subset is smaller than its allocation).
pub fn sample_batch(
    dataset: &PUDataset,
    batch_size: usize,
    rng: &mut impl Rng,
    step: usize,
) -> Result<Batch> {
    let c = dataset.class_count();
    if batch_size < c + 1 {
        return Err(DataError::Config(format!(
            "batch size {batch_size} leaves no room for {c} labeled classes plus unlabeled; need at least {}",
            c + 1
        )));
    }
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut sizes: Vec<usize> = (0..c).map(|i| dataset.n_labeled_class(i)).collect();
    sizes.push(dataset.n_unlabeled());

    let mut alloc = largest_remainder(&sizes, batch_size);
    clamp_nonempty(&mut alloc, &sizes);

    let per_class = (0..c)
        .map(|i| draw(dataset.labeled(i), alloc[i], rng))
        .collect();
    let unlabeled = draw(dataset.unlabeled(), alloc[c], rng);
    Ok(Batch {
        per_class,
        unlabeled,
        step,
    })
}

/// Class priors: explicit overrides win; otherwise default to the labeled
/// fraction of the whole dataset, clamped away from the boundaries.
///
/// The default is biased low whenever labels were subsampled — the labeled
/// count underestimates the true positive mass — so the choice is logged
/// prominently and real runs should override it with task knowledge.
pub fn resolve_priors(dataset: &PUDataset, overrides: Option<&[f64]>) -> Result<ClassPriors> {
    let c = dataset.class_count();
    if let Some(values) = overrides {
        if values.len() != c {
            return Err(DataError::Config(format!(
                "{} prior overrides for {c} classes",
                values.len()
            )));
        }
        return ClassPriors::new(values.to_vec())
            .map_err(|e| DataError::Config(format!("prior override: {e}")));
    }
    let total = dataset.len() as f64;
    let defaults: Vec<f64> = (0..c)
        .map(|i| (dataset.n_labeled_class(i) as f64 / total).clamp(1e-3, 1.0 - 1e-3))
        .collect();
    log::warn!(
        "class priors defaulted to labeled fractions {defaults:?}; \
         these underestimate the true positive mass when labels are subsampled — \
         pass explicit priors if the task rates are known"
    );
    ClassPriors::new(defaults).map_err(|e| DataError::Config(format!("default priors: {e}")))
}

// ── synthetic data ──────────────────────────────────────────────────

/// Generator parameters; this is the `[synth]` config-file section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub clusters: usize,
    pub vocab: usize,
    pub sent_len: usize,
    pub pairs: usize,
    pub label_fraction: f64,
    pub seed: u64,
}

/// What the generated classes mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Two classes: same-cluster pairs vs cross-cluster pairs.
    Binary,
    /// `classes` relation buckets by cluster offset; bucket 0 is same-cluster.
    MultiClass { classes: usize },
    /// Single labeled class (same-cluster); everything else stays unlabeled.
    PositiveOnly,
}

/// One generated pair with its ground truth and the label the dataset kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRecord {
    pub pair: SentencePair,
    /// Index into the population's true class names.
    pub true_class: usize,
    /// Index into the dataset's label names, for pairs that kept a label.
    pub observed: Option<usize>,
}

/// Every generated pair with its true label, for exact oracle computations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub records: Vec<PopulationRecord>,
    pub true_names: Vec<String>,
    pub dataset_names: Vec<String>,
    pub seed: u64,
}

/// Exact finite-population expectations of the sigmoid loss for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRisks {
    /// Mean loss of true positives against +1.
    pub r_p_plus: f64,
    /// Mean loss of true positives against -1.
    pub r_p_minus: f64,
    /// Mean loss of true negatives against -1 (0 when there are none).
    pub r_n_minus: f64,
    /// Mean loss of the whole population against -1.
    pub r_u_minus: f64,
    /// Exact positive fraction of the population.
    pub prior: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Compensated accumulator so population identities hold to near machine
/// precision even over large populations.
#[derive(Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn mean(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.sum / n as f64
        }
    }
}

impl SyntheticPopulation {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn true_count(&self, class: usize) -> usize {
        self.records.iter().filter(|r| r.true_class == class).count()
    }

    pub fn true_fraction(&self, class: usize) -> f64 {
        self.true_count(class) as f64 / self.len() as f64
    }

    /// Exact population risks for `class`, given one score per record
    /// (the model's output at that class column).
    pub fn oracle_risks(&self, class: usize, scores: &[f64]) -> Result<PopulationRisks> {
        if scores.len() != self.records.len() {
            return Err(DataError::Config(format!(
                "{} scores for {} records",
                scores.len(),
                self.records.len()
            )));
        }
        if self.records.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut pos_plus = Kahan::default();
        let mut pos_minus = Kahan::default();
        let mut neg_minus = Kahan::default();
        let mut all_minus = Kahan::default();
        let mut n_pos = 0usize;
        for (rec, &score) in self.records.iter().zip(scores) {
            let l_minus = sigmoid_loss(score, Sign::Minus);
            all_minus.add(l_minus);
            if rec.true_class == class {
                n_pos += 1;
                pos_plus.add(sigmoid_loss(score, Sign::Plus));
                pos_minus.add(l_minus);
            } else {
                neg_minus.add(l_minus);
            }
        }
        let n = self.records.len();
        let n_neg = n - n_pos;
        Ok(PopulationRisks {
            r_p_plus: pos_plus.mean(n_pos),
            r_p_minus: pos_minus.mean(n_pos),
            r_n_minus: neg_minus.mean(n_neg),
            r_u_minus: all_minus.mean(n),
            prior: n_pos as f64 / n as f64,
            n_pos,
            n_neg,
        })
    }

    /// Rebuild the PU dataset view of this population.
    pub fn dataset(&self, mode: DatasetMode) -> Result<PUDataset> {
        let mut labeled: Vec<Vec<SentencePair>> =
            self.dataset_names.iter().map(|_| Vec::new()).collect();
        let mut unlabeled = Vec::new();
        for rec in &self.records {
            match rec.observed {
                Some(c) => labeled[c].push(rec.pair.clone()),
                None => unlabeled.push(rec.pair.clone()),
            }
        }
        PUDataset::new(labeled, unlabeled, self.dataset_names.clone(), mode)
    }
}

/// Ceiling that forgives float dust: values within 1e-9 of an integer are
/// treated as that integer before rounding up.
fn ceil_fraction(fraction: f64, count: usize) -> usize {
    let x = fraction * count as f64;
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Generate a clustered synthetic PU dataset plus its fully labeled
/// population.
///
/// Sentences are bags of words drawn from disjoint per-cluster inventories;
/// a pair is `(sentence from cluster i, sentence from cluster j)` with the
/// same-cluster case drawn half the time. Exactly `ceil(fraction * pairs)`
/// pairs keep labels (apportioned across classes by true class sizes,
/// uniform within each class); the rest become the unlabeled pool.
pub fn synth_generate(
    spec: &SynthSpec,
    kind: SynthKind,
) -> Result<(PUDataset, SyntheticPopulation)> {
    use rand::SeedableRng;

    if spec.clusters == 0 || spec.sent_len == 0 || spec.pairs == 0 {
        return Err(DataError::Infeasible(
            "clusters, sent_len and pairs must be positive".into(),
        ));
    }
    if spec.vocab < spec.clusters {
        return Err(DataError::Infeasible(format!(
            "vocabulary of {} words cannot cover {} clusters",
            spec.vocab, spec.clusters
        )));
    }
    if !(0.0..=1.0).contains(&spec.label_fraction) {
        return Err(DataError::Infeasible(format!(
            "label fraction {} outside [0, 1]",
            spec.label_fraction
        )));
    }
    match kind {
        SynthKind::Binary | SynthKind::PositiveOnly => {
            if spec.clusters < 2 {
                return Err(DataError::Infeasible(
                    "binary similarity needs at least two clusters".into(),
                ));
            }
        }
        SynthKind::MultiClass { classes } => {
            if classes == 0 || classes > spec.clusters {
                return Err(DataError::Infeasible(format!(
                    "{classes} relation classes need at least that many clusters"
                )));
            }
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    // Disjoint word inventories, one per cluster.
    let base = spec.vocab / spec.clusters;
    let extra = spec.vocab % spec.clusters;
    let mut inventories = Vec::with_capacity(spec.clusters);
    let mut next_word = 0usize;
    for c in 0..spec.clusters {
        let size = base + usize::from(c < extra);
        inventories.push((next_word, size));
        next_word += size;
    }
    let sentence = |cluster: usize, rng: &mut ChaCha20Rng| {
        let (start, size) = inventories[cluster];
        (0..spec.sent_len)
            .map(|_| format!("w{}", start + rng.gen_range(0..size)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let (true_names, dataset_names): (Vec<String>, Vec<String>) = match kind {
        SynthKind::Binary => (
            vec!["similar".into(), "dissimilar".into()],
            vec!["similar".into(), "dissimilar".into()],
        ),
        SynthKind::PositiveOnly => (
            vec!["similar".into(), "dissimilar".into()],
            vec!["similar".into()],
        ),
        SynthKind::MultiClass { classes } => {
            let names: Vec<String> = (0..classes).map(|k| format!("rel{k}")).collect();
            (names.clone(), names)
        }
    };

    let mut pairs = Vec::with_capacity(spec.pairs);
    let mut true_classes = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let i = rng.gen_range(0..spec.clusters);
        let (j, class) = match kind {
            SynthKind::Binary | SynthKind::PositiveOnly => {
                if rng.gen_bool(0.5) {
                    (i, 0)
                } else {
                    let mut j = rng.gen_range(0..spec.clusters - 1);
                    if j >= i {
                        j += 1;
                    }
                    (j, 1)
                }
            }
            SynthKind::MultiClass { classes } => {
                let offset = rng.gen_range(0..classes);
                ((i + offset) % spec.clusters, offset)
            }
        };
        let premise = sentence(i, &mut rng);
        let hypothesis = sentence(j, &mut rng);
        pairs.push(SentencePair::new(premise, hypothesis));
        true_classes.push(class);
    }

    // Which true classes may carry observable labels.
    let labelable: Vec<usize> = match kind {
        SynthKind::PositiveOnly => vec![0],
        SynthKind::Binary => vec![0, 1],
        SynthKind::MultiClass { classes } => (0..classes).collect(),
    };
    let class_members: Vec<Vec<usize>> = labelable
        .iter()
        .map(|&c| {
            (0..spec.pairs)
                .filter(|&i| true_classes[i] == c)
                .collect::<Vec<usize>>()
        })
        .collect();

    let budget = ceil_fraction(spec.label_fraction, spec.pairs);
    let member_counts: Vec<usize> = class_members.iter().map(Vec::len).collect();
    let mut per_class = largest_remainder(&member_counts, budget);
    // A class can never label more pairs than it has; any excess is dropped
    // (only reachable in positive-only mode, where negatives soak up budget).
    for (take, &have) in per_class.iter_mut().zip(&member_counts) {
        *take = (*take).min(have);
    }

    if matches!(kind, SynthKind::PositiveOnly) && per_class[0] == 0 {
        return Err(DataError::Infeasible(
            "positive-unlabeled generation requires some labeled positives; \
             raise label_fraction"
                .into(),
        ));
    }

    let mut observed: Vec<Option<usize>> = vec![None; spec.pairs];
    for (slot, members) in class_members.iter().enumerate() {
        let take = per_class[slot];
        if take == 0 {
            continue;
        }
        for pick in rand::seq::index::sample(&mut rng, members.len(), take).iter() {
            observed[members[pick]] = Some(slot);
        }
    }

    let records: Vec<PopulationRecord> = pairs
        .into_iter()
        .zip(true_classes)
        .zip(observed)
        .map(|((pair, true_class), observed)| PopulationRecord {
            pair,
            true_class,
            observed,
        })
        .collect();

    let population = SyntheticPopulation {
        records,
        true_names,
        dataset_names,
        seed: spec.seed,
    };
    let mode = match kind {
        SynthKind::PositiveOnly => DatasetMode::PuOnly,
        _ => DatasetMode::MonoLabel,
    };
    let dataset = population.dataset(mode)?;
    Ok((dataset, population))
}

/// Write the PU view: kept labels by name, everything else null.
pub fn write_dataset_jsonl(population: &SyntheticPopulation, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        premise: &'a str,
        hypothesis: &'a str,
        label: Option<&'a str>,
    }
    let mut out = BufWriter::new(File::create(path)?);
    for rec in &population.records {
        let record = Record {
            premise: &rec.pair.premise,
            hypothesis: &rec.pair.hypothesis,
            label: rec.observed.map(|c| population.dataset_names[c].as_str()),
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| DataError::Config(format!("serialize: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Write the fully labeled population, one true label per line.
pub fn write_truth_jsonl(population: &SyntheticPopulation, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        premise: &'a str,
        hypothesis: &'a str,
        label: &'a str,
    }
    let mut out = BufWriter::new(File::create(path)?);
    for rec in &population.records {
        let record = Record {
            premise: &rec.pair.premise,
            hypothesis: &rec.pair.hypothesis,
            label: &population.true_names[rec.true_class],
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| DataError::Config(format!("serialize: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_jsonl_counts_single_class() {
        let f = write_lines(&[
            r#"{"premise": "a", "hypothesis": "b", "label": "entailment"}"#,
            r#"{"premise": "c", "hypothesis": "d", "label": null}"#,
            r#"{"premise": "e", "hypothesis": "f", "label": "entailment"}"#,
        ]);
        let ds = load_jsonl(f.path(), None).unwrap();
        assert_eq!(ds.class_count(), 1);
        assert_eq!(ds.n_labeled(), 2);
        assert_eq!(ds.n_unlabeled(), 1);
        assert_eq!(ds.mode(), DatasetMode::PuOnly);
    }

    #[test]
    fn load_jsonl_rejects_empty_file() {
        let f = write_lines(&[]);
        assert!(matches!(
            load_jsonl(f.path(), None),
            Err(DataError::EmptyDataset)
        ));
    }

    #[test]
    fn load_jsonl_two_label_file_is_mono_label() {
        let f = write_lines(&[
            r#"{"premise": "a", "hypothesis": "b", "label": "similar"}"#,
            r#"{"premise": "c", "hypothesis": "d", "label": "dissimilar"}"#,
            r#"{"premise": "e", "hypothesis": "f", "label": null}"#,
            r#"{"premise": "g", "hypothesis": "h", "label": "similar"}"#,
        ]);
        let ds = load_jsonl(f.path(), None).unwrap();
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.label_names(), &["similar", "dissimilar"]);
        assert_eq!(ds.mode(), DatasetMode::MonoLabel);
        assert_eq!(ds.n_labeled_class(0), 2);
        assert_eq!(ds.n_labeled_class(1), 1);
    }

    #[test]
    fn load_jsonl_reports_bad_line_numbers() {
        let f = write_lines(&[
            r#"{"premise": "a", "hypothesis": "b", "label": null}"#,
            r#"{"premise": 3}"#,
        ]);
        match load_jsonl(f.path(), None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_jsonl_honors_label_map() {
        let f = write_lines(&[r#"{"premise": "a", "hypothesis": "b", "label": "oops"}"#]);
        let map = vec!["similar".to_string(), "dissimilar".to_string()];
        assert!(matches!(
            load_jsonl(f.path(), Some(&map)),
            Err(DataError::UnknownLabel { line: 1, .. })
        ));
    }

    #[test]
    fn largest_remainder_sums_and_orders() {
        // Hand arithmetic: quotas 6.4 / 6.4 / 115.2, floors 6/6/115, one
        // leftover slot goes to the larger fraction (.4 beats .2), lowest
        // index breaking the tie.
        let alloc = largest_remainder(&[500, 500, 9000], 128);
        assert_eq!(alloc.iter().sum::<usize>(), 128);
        assert_eq!(alloc, vec![7, 6, 115]);

        assert_eq!(largest_remainder(&[0, 10], 3), vec![0, 3]);
        assert_eq!(largest_remainder(&[], 5), Vec::<usize>::new());
        assert_eq!(largest_remainder(&[1, 1], 0), vec![0, 0]);
    }

    #[test]
    fn largest_remainder_stays_within_one_of_quota() {
        let sizes = [37, 911, 4, 260, 1];
        let total = 97;
        let alloc = largest_remainder(&sizes, total);
        assert_eq!(alloc.iter().sum::<usize>(), total);
        let sum: usize = sizes.iter().sum();
        for (a, &s) in alloc.iter().zip(&sizes) {
            let quota = total as f64 * s as f64 / sum as f64;
            assert!((*a as f64) >= quota.floor());
            assert!((*a as f64) <= quota.ceil());
        }
    }

    fn toy_dataset(sizes: &[usize], unlabeled: usize) -> PUDataset {
        let labeled = sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                (0..n)
                    .map(|i| SentencePair::new(format!("p{c}_{i}"), format!("h{c}_{i}")))
                    .collect()
            })
            .collect();
        let unl = (0..unlabeled)
            .map(|i| SentencePair::new(format!("u{i}"), format!("v{i}")))
            .collect();
        let names = (0..sizes.len()).map(|c| format!("class{c}")).collect();
        PUDataset::new(labeled, unl, names, DatasetMode::MonoLabel).unwrap()
    }

    #[test]
    fn sample_batch_clamps_tiny_classes() {
        let ds = toy_dataset(&[1, 1], 1_000_000);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for step in 0..50 {
            let batch = sample_batch(&ds, 128, &mut rng, step).unwrap();
            assert_eq!(batch.size(), 128);
            assert!(batch.per_class[0].len() >= 1);
            assert!(batch.per_class[1].len() >= 1);
            assert_eq!(batch.unlabeled.len(), 126);
        }
    }

    #[test]
    fn sample_batch_rejects_undersized_batches() {
        let ds = toy_dataset(&[5, 5, 5], 100);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            sample_batch(&ds, 3, &mut rng, 0),
            Err(DataError::Config(_))
        ));
        assert!(sample_batch(&ds, 4, &mut rng, 0).is_ok());
    }

    #[test]
    fn sample_batch_composition_tracks_dataset_proportions() {
        let ds = toy_dataset(&[500, 500], 9000);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let trials = 2000usize;
        let mut totals = [0usize; 3];
        for step in 0..trials {
            let b = sample_batch(&ds, 128, &mut rng, step).unwrap();
            totals[0] += b.per_class[0].len();
            totals[1] += b.per_class[1].len();
            totals[2] += b.unlabeled.len();
        }
        let denom = (trials * 128) as f64;
        assert!((totals[0] as f64 / denom - 0.05).abs() < 0.01);
        assert!((totals[1] as f64 / denom - 0.05).abs() < 0.01);
        assert!((totals[2] as f64 / denom - 0.90).abs() < 0.01);
    }

    #[test]
    fn priors_default_to_labeled_fractions() {
        let ds = toy_dataset(&[100, 100], 800);
        let priors = resolve_priors(&ds, None).unwrap();
        assert_eq!(priors.values(), &[0.1, 0.1]);
    }

    #[test]
    fn priors_overrides_win_and_are_validated() {
        let ds = toy_dataset(&[100, 100], 800);
        let priors = resolve_priors(&ds, Some(&[0.3, 0.2])).unwrap();
        assert_eq!(priors.values(), &[0.3, 0.2]);
        assert!(resolve_priors(&ds, Some(&[0.3])).is_err());
        assert!(resolve_priors(&ds, Some(&[0.3, 1.2])).is_err());
    }

    #[test]
    fn default_prior_is_biased_low_against_the_population() {
        // True similar fraction is ~0.5 by construction; with only 30% of
        // pairs keeping labels the defaulted prior lands near 0.15.
        let spec = SynthSpec {
            clusters: 4,
            vocab: 40,
            sent_len: 4,
            pairs: 2000,
            label_fraction: 0.3,
            seed: 5,
        };
        let (ds, pop) = synth_generate(&spec, SynthKind::Binary).unwrap();
        let true_frac = pop.true_fraction(0);
        assert!(true_frac > 0.4 && true_frac < 0.6);
        let defaults = resolve_priors(&ds, None).unwrap();
        assert!(
            defaults.pi_p(0) < true_frac - 0.2,
            "default {} vs true {}",
            defaults.pi_p(0),
            true_frac
        );
    }

    fn tiny_spec(fraction: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            clusters: 3,
            vocab: 30,
            sent_len: 5,
            pairs: 200,
            label_fraction: fraction,
            seed,
        }
    }

    #[test]
    fn synth_full_labels_leave_nothing_unlabeled() {
        let (ds, _) = synth_generate(&tiny_spec(1.0, 9), SynthKind::Binary).unwrap();
        assert_eq!(ds.n_unlabeled(), 0);
        assert_eq!(ds.n_labeled(), 200);
    }

    #[test]
    fn synth_positive_only_with_zero_fraction_errors() {
        let err = synth_generate(&tiny_spec(0.0, 9), SynthKind::PositiveOnly).unwrap_err();
        assert!(matches!(err, DataError::Infeasible(_)));
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let (ds_a, pop_a) = synth_generate(&tiny_spec(0.25, 7), SynthKind::Binary).unwrap();
        let (ds_b, pop_b) = synth_generate(&tiny_spec(0.25, 7), SynthKind::Binary).unwrap();
        assert_eq!(ds_a, ds_b);
        assert_eq!(pop_a, pop_b);
        let (ds_c, _) = synth_generate(&tiny_spec(0.25, 8), SynthKind::Binary).unwrap();
        assert_ne!(ds_a, ds_c);
    }

    #[test]
    fn synth_label_budget_is_exact() {
        for pairs in [200usize, 1000, 999] {
            let spec = SynthSpec {
                pairs,
                ..tiny_spec(0.05, 3)
            };
            let (ds, _) = synth_generate(&spec, SynthKind::Binary).unwrap();
            let expected = (0.05 * pairs as f64).ceil() as usize;
            // 0.05 * 1000 carries float dust; the intended value is 50.
            let expected = if pairs == 1000 { 50 } else { expected };
            assert_eq!(ds.n_labeled(), expected, "pairs={pairs}");
        }
    }

    #[test]
    fn synth_partition_is_exact() {
        let (ds, pop) = synth_generate(&tiny_spec(0.4, 13), SynthKind::Binary).unwrap();
        assert_eq!(ds.len(), pop.len());
        assert_eq!(
            ds.n_labeled(),
            pop.records.iter().filter(|r| r.observed.is_some()).count()
        );
    }

    #[test]
    fn synth_rejects_infeasible_specs() {
        let mut spec = tiny_spec(0.5, 1);
        spec.vocab = 2;
        assert!(matches!(
            synth_generate(&spec, SynthKind::Binary),
            Err(DataError::Infeasible(_))
        ));
    }

    #[test]
    fn oracle_risks_at_zero_scores_are_half() {
        let (_, pop) = synth_generate(&tiny_spec(0.5, 21), SynthKind::Binary).unwrap();
        let scores = vec![0.0; pop.len()];
        let risks = pop.oracle_risks(0, &scores).unwrap();
        assert_eq!(risks.r_p_plus, 0.5);
        assert_eq!(risks.r_p_minus, 0.5);
        assert_eq!(risks.r_n_minus, 0.5);
        assert_eq!(risks.r_u_minus, 0.5);
    }

    #[test]
    fn oracle_total_expectation_identity() {
        use rand::Rng;
        let (_, pop) = synth_generate(&tiny_spec(0.5, 22), SynthKind::Binary).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..pop.len()).map(|_| rng.gen_range(-4.0..4.0)).collect();
        for class in 0..2 {
            let r = pop.oracle_risks(class, &scores).unwrap();
            let recomposed = r.prior * r.r_p_minus + (1.0 - r.prior) * r.r_n_minus;
            assert!(
                (r.r_u_minus - recomposed).abs() < 1e-12,
                "class {class}: {} vs {recomposed}",
                r.r_u_minus
            );
        }
    }

    #[test]
    fn oracle_single_positive_population() {
        let pop = SyntheticPopulation {
            records: vec![PopulationRecord {
                pair: SentencePair::new("a", "b"),
                true_class: 0,
                observed: Some(0),
            }],
            true_names: vec!["similar".into(), "dissimilar".into()],
            dataset_names: vec!["similar".into()],
            seed: 0,
        };
        let risks = pop.oracle_risks(0, &[1.7]).unwrap();
        assert_eq!(risks.r_u_minus, risks.r_p_minus);
        assert_eq!(risks.n_neg, 0);
        assert_eq!(risks.prior, 1.0);
    }

    #[test]
    fn jsonl_round_trip_through_writers() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, pop) = synth_generate(&tiny_spec(0.3, 31), SynthKind::Binary).unwrap();
        let data_path = dir.path().join("data.jsonl");
        let truth_path = dir.path().join("truth.jsonl");
        write_dataset_jsonl(&pop, &data_path).unwrap();
        write_truth_jsonl(&pop, &truth_path).unwrap();

        let reloaded = load_jsonl(&data_path, Some(&pop.dataset_names)).unwrap();
        assert_eq!(reloaded.n_labeled(), ds.n_labeled());
        assert_eq!(reloaded.n_unlabeled(), ds.n_unlabeled());

        let truth = load_jsonl(&truth_path, Some(&pop.true_names)).unwrap();
        assert_eq!(truth.n_labeled(), pop.len());
        assert_eq!(truth.n_unlabeled(), 0);
    }
}
