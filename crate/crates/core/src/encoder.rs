//! Weight-shared dual encoder over sentence pairs.
//!
//! Sentences are tokenized by a hashed vocabulary, pooled by averaging token
//! embedding rows, and passed through a two-layer MLP to produce the sentence
//! embedding g(x). A pair is scored by combining the two embeddings through
//! three matching features — concatenation, absolute element-wise difference
//! and element-wise product — followed by a 128-way fully connected layer
//! with ELU activation and a final C-way linear layer. Both branches read the
//! same parameter tensors, so there is exactly one encoder.
//!
//! The encoder is deliberately small: mean pooling over a hashed
//! bag-of-embeddings ignores word order, so two sentences with the same token
//! multiset embed identically. The pair-matching and risk machinery sitting
//! on top does not depend on the encoder family.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

/// Width of the fully connected matching layer.
pub const HEAD_WIDTH: usize = 128;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("matching features need equal dims, got {left} and {right}")]
    DimMismatch { left: usize, right: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Result<T> = std::result::Result<T, EncoderError>;

// ── tokenizer ───────────────────────────────────────────────────────

/// Splits text on non-alphanumeric characters and hashes each token into a
/// fixed-size bucket space with 64-bit FNV-1a, so ids are stable across runs
/// and platforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    buckets: usize,
    lowercase: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

impl Tokenizer {
    pub fn new(buckets: usize, lowercase: bool) -> Result<Self> {
        if buckets == 0 {
            return Err(EncoderError::Config("bucket count must be positive".into()));
        }
        Ok(Self { buckets, lowercase })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    /// Token ids for a sentence; empty text yields an empty list.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let owned;
        let text = if self.lowercase {
            owned = text.to_lowercase();
            &owned
        } else {
            text
        };
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| (fnv1a64(t.as_bytes()) % self.buckets as u64) as usize)
            .collect()
    }
}

// ── model ───────────────────────────────────────────────────────────

/// Model dimensions; the head width is fixed at [`HEAD_WIDTH`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hashed vocabulary size.
    pub buckets: usize,
    /// Token embedding width.
    pub d_emb: usize,
    /// Sentence embedding width.
    pub d_enc: usize,
    /// Output classes; 1 for positive-only binary data.
    pub classes: usize,
    pub lowercase: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            buckets: 4096,
            d_emb: 64,
            d_enc: 64,
            classes: 2,
            lowercase: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 || self.d_emb == 0 || self.d_enc == 0 {
            return Err(EncoderError::Config(
                "buckets, d_emb and d_enc must be positive".into(),
            ));
        }
        if self.classes == 0 {
            return Err(EncoderError::Config("class count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.buckets, self.lowercase).expect("validated buckets")
    }
}

/// Fixed-size sentence embedding g(x).
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(pub Vec<f64>);

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub const PARAM_NAMES: [&str; 9] = [
    "embedding", "enc_w1", "enc_b1", "enc_w2", "enc_b2", "head_w1", "head_b1", "head_w2",
    "head_b2",
];

/// Parameter names and shapes implied by a config, in name order. This is
/// the shape chain d_enc -> 4 d_enc -> 128 -> C plus the encoder itself.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("embedding".into(), vec![config.buckets, config.d_emb]),
        ("enc_w1".into(), vec![config.d_emb, config.d_enc]),
        ("enc_b1".into(), vec![1, config.d_enc]),
        ("enc_w2".into(), vec![config.d_enc, config.d_enc]),
        ("enc_b2".into(), vec![1, config.d_enc]),
        ("head_w1".into(), vec![4 * config.d_enc, HEAD_WIDTH]),
        ("head_b1".into(), vec![1, HEAD_WIDTH]),
        ("head_w2".into(), vec![HEAD_WIDTH, config.classes]),
        ("head_b2".into(), vec![1, config.classes]),
    ]
}

/// The one parameter set serving both encoder branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Graph leaf ids for one registration of the model parameters.
pub struct ModelNodes {
    pub embedding: NodeId,
    pub enc_w1: NodeId,
    pub enc_b1: NodeId,
    pub enc_w2: NodeId,
    pub enc_b2: NodeId,
    pub head_w1: NodeId,
    pub head_b1: NodeId,
    pub head_w2: NodeId,
    pub head_b2: NodeId,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

impl DualEncoderModel {
    /// Fresh model with Glorot-uniform weight draws and zero biases.
    ///
    /// The draw order is fixed, so one seeded generator always produces the
    /// same parameters.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        params.insert(
            "embedding".into(),
            glorot(rng, config.buckets, config.d_emb),
        );
        params.insert("enc_w1".into(), glorot(rng, config.d_emb, config.d_enc));
        params.insert("enc_b1".into(), Tensor::zeros(vec![1, config.d_enc]));
        params.insert("enc_w2".into(), glorot(rng, config.d_enc, config.d_enc));
        params.insert("enc_b2".into(), Tensor::zeros(vec![1, config.d_enc]));
        params.insert(
            "head_w1".into(),
            glorot(rng, 4 * config.d_enc, HEAD_WIDTH),
        );
        params.insert("head_b1".into(), Tensor::zeros(vec![1, HEAD_WIDTH]));
        params.insert("head_w2".into(), glorot(rng, HEAD_WIDTH, config.classes));
        params.insert("head_b2".into(), Tensor::zeros(vec![1, config.classes]));
        let model = Self { config, params };
        model.check_shapes()?;
        Ok(model)
    }

    /// Rebuild a model from existing parameter tensors (checkpoint load).
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let expect = param_shapes(&self.config);
        if self.params.len() != expect.len() {
            return Err(EncoderError::Config(format!(
                "expected {} parameters, got {}",
                expect.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expect {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| EncoderError::Config(format!("missing parameter {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(EncoderError::Config(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.config.tokenizer()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| EncoderError::Config(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(EncoderError::Config(format!(
                "parameter {name:?}: shape {:?} != {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Register every parameter as a trainable graph leaf.
    pub fn register(&self, g: &mut Graph) -> Result<ModelNodes> {
        let mut get = |name: &str| g.param(name, self.params[name].clone());
        Ok(ModelNodes {
            embedding: get("embedding")?,
            enc_w1: get("enc_w1")?,
            enc_b1: get("enc_b1")?,
            enc_w2: get("enc_w2")?,
            enc_b2: get("enc_b2")?,
            head_w1: get("head_w1")?,
            head_b1: get("head_b1")?,
            head_w2: get("head_w2")?,
            head_b2: get("head_b2")?,
        })
    }

    /// Sentence embeddings for a batch of token id lists: rows of g(x).
    pub fn sentence_nodes(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        ids: Vec<Vec<usize>>,
    ) -> Result<NodeId> {
        let pooled = g.embed_mean(nodes.embedding, ids)?;
        let h = g.matmul(pooled, nodes.enc_w1)?;
        let h = g.add(h, nodes.enc_b1)?;
        let h = g.elu(h)?;
        let out = g.matmul(h, nodes.enc_w2)?;
        Ok(g.add(out, nodes.enc_b2)?)
    }

    /// Batch scores f(x) of shape `[pairs, classes]`.
    ///
    /// Both sentence batches run through the same parameter leaves; the
    /// matching block is `[u ; v ; |u - v| ; u * v]` in that order.
    pub fn pair_scores(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        premise_ids: Vec<Vec<usize>>,
        hypothesis_ids: Vec<Vec<usize>>,
    ) -> Result<NodeId> {
        let u = self.sentence_nodes(g, nodes, premise_ids)?;
        let v = self.sentence_nodes(g, nodes, hypothesis_ids)?;
        let diff = g.sub(u, v)?;
        let abs_diff = g.abs(diff)?;
        let prod = g.mul(u, v)?;
        let feats = g.concat(&[u, v, abs_diff, prod])?;
        let h = g.matmul(feats, nodes.head_w1)?;
        let h = g.add(h, nodes.head_b1)?;
        let h = g.elu(h)?;
        let scores = g.matmul(h, nodes.head_w2)?;
        Ok(g.add(scores, nodes.head_b2)?)
    }

    /// Embed one sentence. An empty sentence pools to the zero vector and is
    /// reported as a data warning, never an error.
    pub fn encode(&self, tokenizer: &Tokenizer, text: &str) -> Result<SentenceEmbedding> {
        Ok(self.encode_batch(tokenizer, &[text])?.pop().expect("one row"))
    }

    /// Embed a batch of sentences in one graph.
    pub fn encode_batch(
        &self,
        tokenizer: &Tokenizer,
        texts: &[&str],
    ) -> Result<Vec<SentenceEmbedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| tokenizer.tokenize(t)).collect();
        for (i, list) in ids.iter().enumerate() {
            if list.is_empty() {
                log::warn!("sentence {i} tokenizes to nothing; pooling to the zero vector");
            }
        }
        let mut g = Graph::new();
        let nodes = self.register(&mut g)?;
        let emb = self.sentence_nodes(&mut g, &nodes, ids)?;
        let value = g.value(emb);
        let d = self.config.d_enc;
        Ok((0..texts.len())
            .map(|i| SentenceEmbedding(value.data()[i * d..(i + 1) * d].to_vec()))
            .collect())
    }

    /// Scores for raw sentence pairs, outside any training graph.
    pub fn score_pairs(
        &self,
        tokenizer: &Tokenizer,
        pairs: &[(&str, &str)],
    ) -> Result<Tensor> {
        if pairs.is_empty() {
            return Ok(Tensor::zeros(vec![0, self.config.classes]));
        }
        let premise_ids = pairs.iter().map(|(p, _)| tokenizer.tokenize(p)).collect();
        let hyp_ids = pairs.iter().map(|(_, h)| tokenizer.tokenize(h)).collect();
        let mut g = Graph::new();
        let nodes = self.register(&mut g)?;
        let scores = self.pair_scores(&mut g, &nodes, premise_ids, hyp_ids)?;
        Ok(g.value(scores).clone())
    }
}

/// Plain matching-feature vector `[u ; v ; |u - v| ; u * v]`.
pub fn match_features(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(EncoderError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let mut out = Vec::with_capacity(4 * u.len());
    out.extend_from_slice(u);
    out.extend_from_slice(v);
    out.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
    out.extend(u.iter().zip(v).map(|(a, b)| a * b));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            buckets: 32,
            d_emb: 6,
            d_enc: 5,
            classes: 3,
            lowercase: true,
        }
    }

    fn small_model(seed: u64) -> DualEncoderModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DualEncoderModel::new(small_config(), &mut rng).unwrap()
    }

    #[test]
    fn tokenize_empty_text_is_empty() {
        let tok = Tokenizer::new(64, true).unwrap();
        assert!(tok.tokenize("").is_empty());
        assert!(tok.tokenize("  ,.;  ").is_empty());
    }

    #[test]
    fn tokenize_folds_case_when_configured() {
        let tok = Tokenizer::new(64, true).unwrap();
        let ids = tok.tokenize("Hello hello");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);

        let cased = Tokenizer::new(64, false).unwrap();
        let ids = cased.tokenize("Hello hello");
        assert_ne!(ids[0], ids[1]);
    }

    #[test]
    fn tokenize_golden_ids_are_stable() {
        // Reference FNV-1a values computed independently of the tokenizer:
        // hash("data") = 0xf1b59086d9827991, hash("centers") = 0xd8f1qq... is
        // recomputed below rather than trusted from a constant.
        fn reference_fnv(token: &str) -> u64 {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in token.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h
        }
        let tok = Tokenizer::new(1024, true).unwrap();
        let ids = tok.tokenize("data centers");
        assert_eq!(
            ids,
            vec![
                (reference_fnv("data") % 1024) as usize,
                (reference_fnv("centers") % 1024) as usize
            ]
        );
        // Frozen golden values for cross-run stability.
        assert_eq!(ids, vec![517, 245]);
    }

    #[test]
    fn single_token_sentence_is_mlp_of_its_row() {
        let model = small_model(7);
        let tok = model.tokenizer();
        let ids = tok.tokenize("word");
        assert_eq!(ids.len(), 1);
        let row = ids[0];

        let emb = model.encode(&tok, "word").unwrap();

        // By hand: h = elu(row * W1 + b1); out = h * W2 + b2
        let d_emb = model.config().d_emb;
        let d_enc = model.config().d_enc;
        let table = model.param("embedding");
        let x: Vec<f64> = table.data()[row * d_emb..(row + 1) * d_emb].to_vec();
        let w1 = model.param("enc_w1");
        let b1 = model.param("enc_b1");
        let mut h = vec![0.0; d_enc];
        for j in 0..d_enc {
            let mut s = b1.data()[j];
            for i in 0..d_emb {
                s += x[i] * w1.data()[i * d_enc + j];
            }
            h[j] = if s > 0.0 { s } else { s.exp_m1() };
        }
        let w2 = model.param("enc_w2");
        let b2 = model.param("enc_b2");
        for j in 0..d_enc {
            let mut s = b2.data()[j];
            for i in 0..d_enc {
                s += h[i] * w2.data()[i * d_enc + j];
            }
            assert!((emb.values()[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn token_multiset_determines_the_embedding() {
        let model = small_model(3);
        let tok = model.tokenizer();
        let a = model.encode(&tok, "alpha beta gamma").unwrap();
        let b = model.encode(&tok, "gamma alpha beta").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn both_branches_share_one_parameter_set() {
        let model = small_model(11);
        let tok = model.tokenizer();
        let text = "premise words here";
        let ids = tok.tokenize(text);

        let mut g = Graph::new();
        let nodes = model.register(&mut g).unwrap();
        let left = model
            .sentence_nodes(&mut g, &nodes, vec![ids.clone()])
            .unwrap();
        let right = model.sentence_nodes(&mut g, &nodes, vec![ids]).unwrap();
        assert_eq!(g.value(left).data(), g.value(right).data());
        assert_eq!(g.param_names().len(), PARAM_NAMES.len());
    }

    #[test]
    fn match_features_order_and_identities() {
        let u = [1.0, 0.0];
        let v = [0.0, 1.0];
        assert_eq!(
            match_features(&u, &v).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]
        );

        let w = [0.5, -2.0, 3.0];
        let same = match_features(&w, &w).unwrap();
        assert_eq!(&same[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(&same[9..12], &[0.25, 4.0, 9.0]);

        assert!(match_features(&u, &w).is_err());
    }

    #[test]
    fn match_feature_dim_is_four_times_embedding_dim() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for d in [1usize, 3, 17] {
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(match_features(&u, &v).unwrap().len(), 4 * d);
        }
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let mut model = small_model(2);
        let c = model.classes();
        model
            .set_param("head_w2", Tensor::zeros(vec![HEAD_WIDTH, c]))
            .unwrap();
        model.set_param("head_b2", Tensor::zeros(vec![1, c])).unwrap();
        let tok = model.tokenizer();
        let scores = model
            .score_pairs(&tok, &[("some words", "other words")])
            .unwrap();
        assert!(scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_the_pair_changes_the_scores() {
        let model = small_model(19);
        let tok = model.tokenizer();
        let fwd = model.score_pairs(&tok, &[("red green", "blue")]).unwrap();
        let rev = model.score_pairs(&tok, &[("blue", "red green")]).unwrap();
        assert_ne!(fwd.data(), rev.data());
    }

    #[test]
    fn models_from_equal_seeds_are_identical() {
        let a = small_model(123);
        let b = small_model(123);
        assert_eq!(a, b);
        let c = small_model(124);
        assert_ne!(a, c);
    }

    #[test]
    fn construction_rejects_broken_shape_chain() {
        let model = small_model(1);
        let mut params = model.params().clone();
        params.insert("head_w1".into(), Tensor::zeros(vec![3, HEAD_WIDTH]));
        assert!(DualEncoderModel::from_params(small_config(), params).is_err());
    }

    #[test]
    fn empty_sentence_pools_to_zero_then_biases() {
        let model = small_model(8);
        let tok = model.tokenizer();
        let emb = model.encode(&tok, "").unwrap();
        // Zero pooled vector still passes through the MLP biases.
        let via_zero = {
            let d_enc = model.config().d_enc;
            let b1 = model.param("enc_b1");
            let w2 = model.param("enc_w2");
            let b2 = model.param("enc_b2");
            let h: Vec<f64> = (0..d_enc)
                .map(|j| {
                    let s = b1.data()[j];
                    if s > 0.0 {
                        s
                    } else {
                        s.exp_m1()
                    }
                })
                .collect();
            (0..d_enc)
                .map(|j| {
                    let mut s = b2.data()[j];
                    for i in 0..d_enc {
                        s += h[i] * w2.data()[i * d_enc + j];
                    }
                    s
                })
                .collect::<Vec<f64>>()
        };
        for (a, b) in emb.values().iter().zip(&via_zero) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_embedding_through_both_branches() {
        // With a head made symmetric in u and v (weights on the u block equal
        // to weights on the v block, zero elsewhere) and the encoder biased
        // into the linear region of its activation — so both branches share
        // one Jacobian — a token appearing in both sentences moves the output
        // exactly twice as fast as a token appearing in one. Finite
        // differences confirm the factor.
        let mut model = small_model(21);
        let d_enc = model.config().d_enc;
        let c = model.classes();

        let mut w1 = vec![vec![0.0; HEAD_WIDTH]; 4 * d_enc];
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        use rand::Rng;
        for i in 0..d_enc {
            for j in 0..HEAD_WIDTH {
                let w = rng.gen_range(-0.4..0.4);
                w1[i][j] = w; // u block
                w1[d_enc + i][j] = w; // v block, same weights
            }
        }
        model
            .set_param("head_w1", Tensor::matrix(&w1).unwrap())
            .unwrap();
        // Pre-activations stay positive for Glorot-sized pooled vectors.
        model
            .set_param(
                "enc_b1",
                Tensor::new(vec![1, d_enc], vec![5.0; d_enc]).unwrap(),
            )
            .unwrap();

        let tok = model.tokenizer();
        // "aa" appears on both sides, "bb"/"cc" on one side each; all
        // sentences have two tokens so pooling coefficients match.
        let premise = "aa bb";
        let hypothesis = "aa cc";
        let shared = tok.tokenize("aa")[0];
        let one_sided = tok.tokenize("bb")[0];
        assert_ne!(shared, one_sided);

        let score = |m: &DualEncoderModel| {
            m.score_pairs(&tok, &[(premise, hypothesis)]).unwrap().data()[0]
        };

        let fd = |token: usize| {
            let eps = 1e-6;
            let mut plus = model.clone();
            let mut table = plus.param("embedding").clone();
            table.data_mut()[token * plus.config().d_emb] += eps;
            plus.set_param("embedding", table).unwrap();

            let mut minus = model.clone();
            let mut table = minus.param("embedding").clone();
            table.data_mut()[token * minus.config().d_emb] -= eps;
            minus.set_param("embedding", table).unwrap();

            (score(&plus) - score(&minus)) / (2.0 * eps)
        };

        let d_shared = fd(shared);
        let d_single = fd(one_sided);
        assert!(d_single.abs() > 1e-8, "degenerate probe direction");
        let ratio = d_shared / d_single;
        assert!(
            (ratio - 2.0).abs() < 1e-3,
            "shared-token sensitivity ratio {ratio}"
        );
        let _ = c;
    }
}
