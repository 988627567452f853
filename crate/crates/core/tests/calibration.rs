//! Scratch sweep for picking the synthetic experiment configuration.
//! Run manually: cargo test -p puembed-core --test calibration -- --ignored --nocapture

use puembed_core::data::{synth_generate, SynthKind, SynthSpec};
use puembed_core::encoder::ModelConfig;
use puembed_core::eval::argmax_accuracy;
use puembed_core::losses::ClassPriors;
use puembed_core::trainer::{train, TrainConfig};

fn accuracy_of(
    model: &puembed_core::encoder::DualEncoderModel,
    test_spec: &SynthSpec,
) -> f64 {
    let (_, test_pop) = synth_generate(test_spec, SynthKind::Binary).unwrap();
    let pairs: Vec<_> = test_pop.records.iter().map(|r| r.pair.clone()).collect();
    let gold: Vec<usize> = test_pop.records.iter().map(|r| r.true_class).collect();
    let tokenizer = model.tokenizer();
    argmax_accuracy(model, &tokenizer, &pairs, &gold).unwrap()
}

fn run_arm(
    spec: &SynthSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    label_fraction: f64,
    use_pu: bool,
    anneal: bool,
    test_spec: &SynthSpec,
) -> f64 {
    let spec = SynthSpec {
        label_fraction,
        ..spec.clone()
    };
    let (ds, _) = synth_generate(&spec, SynthKind::Binary).unwrap();
    let cfg = TrainConfig {
        use_pu,
        anneal,
        ..train_cfg.clone()
    };
    let priors = ClassPriors::new(vec![0.5, 0.5]).unwrap();
    let run = train(&ds, priors, model_cfg, &cfg).unwrap();
    accuracy_of(run.model(), test_spec)
}

#[test]
#[ignore]
fn sweep() {
    let configs = [
        // (clusters, vocab, sent_len, buckets, d, lr, epochs, batch)
        (50usize, 8000usize, 5usize, 16384usize, 32usize, 3e-3, 4usize, 128usize),
        (50, 4000, 5, 8192, 32, 3e-3, 4, 128),
        (100, 8000, 5, 16384, 32, 3e-3, 4, 128),
    ];
    for (ci, (clusters, vocab, sent_len, buckets, d, lr, epochs, batch)) in
        configs.iter().enumerate()
    {
        let spec = SynthSpec {
            clusters: *clusters,
            vocab: *vocab,
            sent_len: *sent_len,
            pairs: 20_000,
            label_fraction: 0.1,
            seed: 0,
        };
        let model_cfg = ModelConfig {
            buckets: *buckets,
            d_emb: *d,
            d_enc: *d,
            classes: 2,
            lowercase: true,
        };
        let train_cfg = TrainConfig {
            learning_rate: *lr,
            batch_size: *batch,
            epochs: *epochs,
            alpha: 3.0,
            ..TrainConfig::default()
        };
        println!("config {ci}: {spec:?} d={d} buckets={buckets} lr={lr} epochs={epochs}");
        for seed in [1u64, 2, 3] {
            let start = std::time::Instant::now();
            let train_spec = SynthSpec { seed, ..spec.clone() };
            let test_spec = SynthSpec {
                seed: seed + 1000,
                pairs: 4000,
                ..spec.clone()
            };
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let pu = run_arm(&train_spec, &model_cfg, &cfg, 0.1, true, true, &test_spec);
            let base = run_arm(&train_spec, &model_cfg, &cfg, 0.1, false, true, &test_spec);
            let upper = run_arm(&train_spec, &model_cfg, &cfg, 1.0, false, true, &test_spec);
            println!(
                "  seed {seed}: pu {pu:.4} baseline {base:.4} upper {upper:.4}  (pu-base {:+.1} pts, upper-pu {:+.1} pts) [{:.1}s]",
                (pu - base) * 100.0,
                (upper - pu) * 100.0,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

#[test]
#[ignore]
fn anneal_variance() {
    let spec = SynthSpec {
        clusters: 50,
        vocab: 8000,
        sent_len: 5,
        pairs: 20_000,
        label_fraction: 0.1,
        seed: 0,
    };
    let model_cfg = ModelConfig {
        buckets: 16384,
        d_emb: 32,
        d_enc: 32,
        classes: 2,
        lowercase: true,
    };
    let train_cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 128,
        epochs: 4,
        alpha: 3.0,
        ..TrainConfig::default()
    };
    for anneal in [true, false] {
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3, 4, 5] {
            let train_spec = SynthSpec { seed, ..spec.clone() };
            let test_spec = SynthSpec {
                seed: seed + 1000,
                pairs: 4000,
                ..spec.clone()
            };
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let acc = run_arm(&train_spec, &model_cfg, &cfg, 0.1, true, anneal, &test_spec);
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        println!("anneal={anneal}: accs {accs:?} mean {mean:.4} var {var:.6}");
    }
}
