//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use puembed_core::data::{
    self, load_jsonl, resolve_priors, synth_generate, DatasetMode, SynthKind,
};
use puembed_core::eval::{
    load_scored_jsonl, logreg_probe, pair_cosines, similarity_spearman,
    similarity_threshold_eval, tune_threshold, Metrics,
};
use puembed_core::trainer::{self, load_checkpoint, save_checkpoint, TrainState, MANIFEST_FILE};

use crate::config::{self, Echo, FileConfig};

pub fn synth(spec_path: &Path, out: &Path, truth: &Path) -> Result<()> {
    let file = config::load(spec_path)?;
    let spec = file
        .synth
        .ok_or_else(|| anyhow!("config {} has no [synth] section", spec_path.display()))?;
    let (dataset, population) = synth_generate(&spec, SynthKind::Binary)?;
    data::write_dataset_jsonl(&population, out)
        .with_context(|| format!("writing {}", out.display()))?;
    data::write_truth_jsonl(&population, truth)
        .with_context(|| format!("writing {}", truth.display()))?;
    println!(
        "wrote {} pairs to {} ({} labeled, {} unlabeled) and the population to {}",
        population.len(),
        out.display(),
        dataset.n_labeled(),
        dataset.n_unlabeled(),
        truth.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub priors: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub mode: Option<String>,
    pub no_pu: bool,
    pub no_anneal: bool,
}

fn parse_mode(s: &str) -> Result<DatasetMode> {
    match s {
        "mono-label" | "mono" => Ok(DatasetMode::MonoLabel),
        "multi-label" | "multi" => Ok(DatasetMode::MultiLabel),
        "pu-only" | "pu" => Ok(DatasetMode::PuOnly),
        other => bail!("unknown mode {other:?}; use mono-label, multi-label or pu-only"),
    }
}

fn parse_priors(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad prior value {p:?}"))
        })
        .collect()
}

pub fn train(args: TrainArgs) -> Result<()> {
    // Validate every input before touching the output directory, so a bad
    // invocation leaves nothing behind.
    if !args.data.is_file() {
        bail!("data file {} does not exist", args.data.display());
    }
    let mut file: FileConfig = match &args.config {
        Some(path) => config::load(path)?,
        None => FileConfig::default(),
    };

    if let Some(seed) = args.seed {
        file.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        file.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        file.train.batch_size = batch;
    }
    if let Some(lr) = args.learning_rate {
        file.train.learning_rate = lr;
    }
    if let Some(alpha) = args.alpha {
        file.train.alpha = alpha;
    }
    if let Some(mode) = &args.mode {
        file.train.mode = Some(parse_mode(mode)?);
    }
    if args.no_pu {
        file.train.use_pu = false;
    }
    if args.no_anneal {
        file.train.anneal = false;
    }

    let dataset = load_jsonl(&args.data, None)?;
    let override_values = args.priors.as_deref().map(parse_priors).transpose()?;
    let priors = resolve_priors(&dataset, override_values.as_deref())?;
    // The dataset decides the class count; the [model] section sizes the rest.
    file.model.classes = dataset.class_count();

    let run = trainer::train(&dataset, priors.clone(), &file.model, &file.train)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_checkpoint(&run.state, &args.out.join("checkpoint"))?;
    trainer::write_history(&args.out.join("history.csv"), &run.history)?;
    let echo = Echo {
        data: args.data.display().to_string(),
        label_names: &run.state.label_names,
        priors: priors.values(),
        train: &run.state.config,
        model: &file.model,
    };
    fs::write(
        args.out.join("config.toml"),
        toml::to_string_pretty(&echo).context("serializing resolved config")?,
    )?;

    let last = run.history.last();
    println!(
        "trained {} steps; final ce {:.6}, pu {:.6}; artifacts in {}",
        run.state.step,
        last.map_or(0.0, |r| r.ce_loss),
        last.map_or(0.0, |r| r.pu_loss),
        args.out.display()
    );
    Ok(())
}

/// Accept either the training output directory or the checkpoint directory
/// inside it.
fn find_checkpoint(dir: &Path) -> Result<PathBuf> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(dir.to_path_buf());
    }
    let nested = dir.join("checkpoint");
    if nested.join(MANIFEST_FILE).is_file() {
        return Ok(nested);
    }
    bail!(
        "no checkpoint manifest under {} (looked for {MANIFEST_FILE} and checkpoint/{MANIFEST_FILE})",
        dir.display()
    )
}

fn load_model(dir: &Path) -> Result<TrainState> {
    let checkpoint = find_checkpoint(dir)?;
    Ok(load_checkpoint(&checkpoint)?)
}

pub fn embed(
    model_dir: &Path,
    input: &Path,
    output: &Path,
    text_output: Option<&Path>,
) -> Result<()> {
    let state = load_model(model_dir)?;
    let model = &state.model;
    let tokenizer = model.tokenizer();
    let text = fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.is_empty() {
        log::warn!("input {} is empty; writing an empty embedding file", input.display());
    }

    let mut binary = fs::File::create(output)
        .with_context(|| format!("creating {}", output.display()))?;
    let mut tsv = text_output
        .map(|p| fs::File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()?;

    let mut rows = 0usize;
    for chunk in lines.chunks(256.max(1)) {
        let embeddings = model.encode_batch(&tokenizer, chunk)?;
        for emb in &embeddings {
            let mut bytes = Vec::with_capacity(emb.dim() * 4);
            for &v in emb.values() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            binary.write_all(&bytes)?;
            if let Some(f) = tsv.as_mut() {
                let line = emb
                    .values()
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join("\t");
                writeln!(f, "{line}")?;
            }
            rows += 1;
        }
    }
    binary.flush()?;
    println!(
        "embedded {rows} sentences at {} dims into {}",
        model.config().d_enc,
        output.display()
    );
    Ok(())
}

fn print_metrics(metrics: &Metrics) {
    println!(
        "accuracy {:.4}, precision {:.4}{}, recall {:.4}{}  (tp {} fp {} fn {} tn {})",
        metrics.accuracy,
        metrics.precision,
        if metrics.precision_defined { "" } else { " (no positive predictions)" },
        metrics.recall,
        if metrics.recall_defined { "" } else { " (no gold positives)" },
        metrics.tp,
        metrics.fp,
        metrics.fn_,
        metrics.tn
    );
    println!("metric,value");
    println!("accuracy,{}", metrics.accuracy);
    println!("precision,{}", metrics.precision);
    println!("recall,{}", metrics.recall);
}

pub fn eval_sts(model_dir: &Path, data: &Path) -> Result<()> {
    let state = load_model(model_dir)?;
    let set = load_scored_jsonl(data)?;
    let Some(scores) = set.scores() else {
        bail!("sts task needs graded \"score\" fields, but {} has labels", data.display());
    };
    let tokenizer = state.model.tokenizer();
    let rho = similarity_spearman(&state.model, &tokenizer, &set.pairs, scores)?;
    println!("sts evaluation on {} pairs", set.len());
    println!("spearman rank correlation {rho:.6}");
    println!("metric,value");
    println!("spearman_rho,{rho}");
    Ok(())
}

pub fn eval_cls(model_dir: &Path, data: &Path, threshold: Option<f64>) -> Result<()> {
    let state = load_model(model_dir)?;
    let set = load_scored_jsonl(data)?;
    let Some(labels) = set.labels() else {
        bail!("cls task needs 0/1 \"label\" fields, but {} has scores", data.display());
    };
    let tokenizer = state.model.tokenizer();

    let metrics = match threshold {
        Some(t) => {
            println!("cls evaluation on {} pairs at fixed threshold {t}", set.len());
            similarity_threshold_eval(&state.model, &tokenizer, &set.pairs, labels, t)?
        }
        None => {
            // Deterministic dev/test split by index parity.
            let dev: Vec<usize> = (0..set.len()).filter(|i| i % 2 == 0).collect();
            let test: Vec<usize> = (0..set.len()).filter(|i| i % 2 == 1).collect();
            let sims = pair_cosines(&state.model, &tokenizer, &set.pairs)?;
            let dev_sims: Vec<f64> = dev.iter().map(|&i| sims[i]).collect();
            let dev_gold: Vec<bool> = dev.iter().map(|&i| labels[i]).collect();
            let t = tune_threshold(&dev_sims, &dev_gold)?;
            let test_pairs: Vec<_> = test.iter().map(|&i| set.pairs[i].clone()).collect();
            let test_gold: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
            println!(
                "cls evaluation: tuned threshold {t} on {} dev pairs, scoring {} test pairs",
                dev.len(),
                test.len()
            );
            similarity_threshold_eval(&state.model, &tokenizer, &test_pairs, &test_gold, t)?
        }
    };
    print_metrics(&metrics);
    Ok(())
}

pub fn eval_probe(model_dir: &Path, data: &Path, folds: usize) -> Result<()> {
    let state = load_model(model_dir)?;
    let set = load_scored_jsonl(data)?;
    let Some(labels) = set.labels() else {
        bail!("probe task needs 0/1 \"label\" fields, but {} has scores", data.display());
    };
    let tokenizer = state.model.tokenizer();

    // Pair representation: the matching-feature vector over the two
    // sentence embeddings.
    let premises: Vec<&str> = set.pairs.iter().map(|p| p.premise.as_str()).collect();
    let hyps: Vec<&str> = set.pairs.iter().map(|p| p.hypothesis.as_str()).collect();
    let us = state.model.encode_batch(&tokenizer, &premises)?;
    let vs = state.model.encode_batch(&tokenizer, &hyps)?;
    let features: Vec<Vec<f64>> = us
        .iter()
        .zip(&vs)
        .map(|(u, v)| puembed_core::encoder::match_features(u.values(), v.values()))
        .collect::<Result<_, _>>()?;

    let report = logreg_probe(&features, labels, folds)?;
    println!(
        "probe evaluation on {} pairs, {} folds",
        set.len(),
        report.folds
    );
    for (i, acc) in report.fold_accuracies.iter().enumerate() {
        match acc {
            Some(a) => println!("fold {i}: accuracy {a:.4}"),
            None => println!("fold {i}: skipped (single-class training split)"),
        }
    }
    println!("mean accuracy {:.4}", report.mean_accuracy);
    println!("metric,value");
    println!("mean_accuracy,{}", report.mean_accuracy);
    for (i, acc) in report.fold_accuracies.iter().enumerate() {
        if let Some(a) = acc {
            println!("fold{i}_accuracy,{a}");
        }
    }
    Ok(())
}
