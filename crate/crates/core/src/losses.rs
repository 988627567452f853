//! Training objectives.
//!
//! Supervised cross-entropy (mono-label) and binary cross-entropy
//! (multi-label) over the labeled pairs; a per-class risk estimate built from
//! labeled positives and the unlabeled pool with a class prior, clamped
//! non-negative by optimizing the reversed negative-risk term when it dips
//! below zero; the class-averaged unlabeled-risk loss; and the annealed
//! combination of the two.
//!
//! Every loss is built as graph nodes so gradients flow through the exact
//! branch that produced the value. The correction branch is chosen on the
//! current batch values and frozen into the graph; the selected branch
//! defines the gradient. An exact tie (negative risk equal to zero) takes the
//! uncorrected branch, where both branches agree anyway.

use thiserror::Error;

use crate::graph::{stable_sigmoid, Graph, GraphError, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sign label must be +1 or -1, got {0}")]
    BadSignLabel(i64),
    #[error("class {class}: {which} score list is empty; the risk estimator is undefined")]
    EmptyScores { class: usize, which: &'static str },
    #[error("class prior must lie strictly inside (0, 1), got {0}")]
    PriorOutOfRange(f64),
    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("label entry at row {row} must be 0 or 1, got {value}")]
    NotBinary { row: usize, value: f64 },
    #[error("scores have shape {scores:?} but labels have shape {labels:?}")]
    LabelShapeMismatch {
        scores: Vec<usize>,
        labels: Vec<usize>,
    },
    #[error("scores must be a rank-2 tensor with at least one row, got shape {0:?}")]
    BadScores(Vec<usize>),
    #[error("step {t} outside schedule range 1..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("annealing exponent must be >= 2, got {0}")]
    AlphaTooSmall(f64),
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("at least one class risk is required")]
    NoClasses,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Binary target of the sigmoid loss, restricted to the two legal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl TryFrom<i64> for Sign {
    type Error = LossError;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(LossError::BadSignLabel(other)),
        }
    }
}

/// Per-class positive prior `pi_p`; the negative prior is always derived.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriors {
    pi_p: Vec<f64>,
}

impl ClassPriors {
    pub fn new(pi_p: Vec<f64>) -> Result<Self> {
        for &p in &pi_p {
            if !(p > 0.0 && p < 1.0) {
                return Err(LossError::PriorOutOfRange(p));
            }
        }
        Ok(Self { pi_p })
    }

    pub fn len(&self) -> usize {
        self.pi_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi_p.is_empty()
    }

    pub fn pi_p(&self, class: usize) -> f64 {
        self.pi_p[class]
    }

    pub fn pi_n(&self, class: usize) -> f64 {
        1.0 - self.pi_p[class]
    }

    pub fn values(&self) -> &[f64] {
        &self.pi_p
    }
}

/// Sigmoid loss `(1 + e^{ab})^{-1}`, computed as the stable logistic of `-ab`.
///
/// Value lies in `(0, 1)` and saturates to exactly 0 or 1 only where the true
/// value underflows f64.
pub fn sigmoid_loss(score: f64, label: Sign) -> f64 {
    stable_sigmoid(-(score * label.value()))
}

/// One class's risk estimate and how it was assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskBreakdown {
    /// Mean sigmoid loss of labeled positives against +1.
    pub r_p_plus: f64,
    /// Mean sigmoid loss of labeled positives against -1.
    pub r_p_minus: f64,
    /// Mean sigmoid loss of unlabeled samples against -1.
    pub r_u_minus: f64,
    /// `r_u_minus - pi_p * r_p_minus`.
    pub negative_risk: f64,
    /// Final per-class risk; never negative when the correction is enabled.
    pub corrected_risk: f64,
    pub correction_applied: bool,
}

/// Graph nodes for one class risk plus the recorded breakdown.
pub struct ClassRisk {
    pub risk: NodeId,
    pub breakdown: RiskBreakdown,
}

fn check_scores_vector(g: &Graph, id: NodeId, class: usize, which: &'static str) -> Result<()> {
    let v = g.value(id);
    if v.rank() != 1 {
        return Err(LossError::BadScores(v.shape().to_vec()));
    }
    if v.numel() == 0 {
        return Err(LossError::EmptyScores { class, which });
    }
    Ok(())
}

fn risk_terms(
    g: &mut Graph,
    pos_scores: NodeId,
    unl_scores: NodeId,
    prior: f64,
    class: usize,
) -> Result<(NodeId, NodeId, RiskBreakdown)> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(LossError::PriorOutOfRange(prior));
    }
    check_scores_vector(g, pos_scores, class, "positive")?;
    check_scores_vector(g, unl_scores, class, "unlabeled")?;

    // l(a,+1) = sigmoid(-a), l(a,-1) = sigmoid(a)
    let neg_pos = g.neg(pos_scores)?;
    let l_plus = g.sigmoid(neg_pos)?;
    let r_p_plus = g.mean(l_plus)?;

    let l_minus_pos = g.sigmoid(pos_scores)?;
    let r_p_minus = g.mean(l_minus_pos)?;

    let l_minus_unl = g.sigmoid(unl_scores)?;
    let r_u_minus = g.mean(l_minus_unl)?;

    let scaled_p_minus = g.scale(r_p_minus, prior)?;
    let negative_risk = g.sub(r_u_minus, scaled_p_minus)?;

    let breakdown = RiskBreakdown {
        r_p_plus: g.scalar_value(r_p_plus)?,
        r_p_minus: g.scalar_value(r_p_minus)?,
        r_u_minus: g.scalar_value(r_u_minus)?,
        negative_risk: g.scalar_value(negative_risk)?,
        corrected_risk: 0.0,
        correction_applied: false,
    };
    Ok((r_p_plus, negative_risk, breakdown))
}

/// Non-negative per-class risk from positive and unlabeled scores at one
/// class column.
///
/// When the negative-risk term is non-negative the estimate is
/// `prior * r_p_plus + negative_risk`; otherwise the positive-risk term is
/// dropped and the negated negative risk is optimized instead.
pub fn class_risk(
    g: &mut Graph,
    pos_scores: NodeId,
    unl_scores: NodeId,
    prior: f64,
) -> Result<ClassRisk> {
    class_risk_for(g, pos_scores, unl_scores, prior, 0)
}

/// [`class_risk`] with the class index threaded through for error reporting.
pub fn class_risk_for(
    g: &mut Graph,
    pos_scores: NodeId,
    unl_scores: NodeId,
    prior: f64,
    class: usize,
) -> Result<ClassRisk> {
    let (r_p_plus, negative_risk, mut breakdown) =
        risk_terms(g, pos_scores, unl_scores, prior, class)?;
    let risk = if breakdown.negative_risk >= 0.0 {
        let pos_term = g.scale(r_p_plus, prior)?;
        g.add(pos_term, negative_risk)?
    } else {
        breakdown.correction_applied = true;
        g.neg(negative_risk)?
    };
    breakdown.corrected_risk = g.scalar_value(risk)?;
    Ok(ClassRisk { risk, breakdown })
}

/// Uncorrected (possibly negative) per-class risk; diagnostic mode only.
pub fn class_risk_uncorrected(
    g: &mut Graph,
    pos_scores: NodeId,
    unl_scores: NodeId,
    prior: f64,
    class: usize,
) -> Result<ClassRisk> {
    let (r_p_plus, negative_risk, mut breakdown) =
        risk_terms(g, pos_scores, unl_scores, prior, class)?;
    let pos_term = g.scale(r_p_plus, prior)?;
    let risk = g.add(pos_term, negative_risk)?;
    breakdown.corrected_risk = g.scalar_value(risk)?;
    Ok(ClassRisk { risk, breakdown })
}

/// Class-averaged risk: the mean of the per-class corrected risks.
pub fn pu_loss(g: &mut Graph, risks: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = risks.split_first() else {
        return Err(LossError::NoClasses);
    };
    let mut acc = first;
    for &r in rest {
        acc = g.add(acc, r)?;
    }
    Ok(g.scale(acc, 1.0 / risks.len() as f64)?)
}

fn check_label_matrix(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = scores
        .dims2()
        .ok_or_else(|| LossError::BadScores(scores.shape().to_vec()))?;
    if n == 0 {
        return Err(LossError::BadScores(scores.shape().to_vec()));
    }
    if labels.shape() != scores.shape() {
        return Err(LossError::LabelShapeMismatch {
            scores: scores.shape().to_vec(),
            labels: labels.shape().to_vec(),
        });
    }
    Ok((n, c))
}

/// Mono-label cross entropy over one-hot rows.
///
/// Normalized by both the row count and the class count, so the value is
/// exactly the negated mean of the masked log-softmax matrix.
pub fn ce_loss(g: &mut Graph, scores: NodeId, labels: &Tensor) -> Result<NodeId> {
    let (n, c) = check_label_matrix(g.value(scores), labels)?;
    for row in 0..n {
        let mut ones = 0usize;
        for col in 0..c {
            let v = labels.data()[row * c + col];
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(LossError::NotOneHot { row });
            }
        }
        if ones != 1 {
            return Err(LossError::NotOneHot { row });
        }
    }
    let log_probs = g.log_softmax(scores)?;
    let mask = g.constant(labels.clone())?;
    let masked = g.mul(log_probs, mask)?;
    let mean = g.mean(masked)?;
    Ok(g.neg(mean)?)
}

/// Multi-label binary cross entropy; only active labels contribute.
pub fn bce_loss(g: &mut Graph, scores: NodeId, labels: &Tensor) -> Result<NodeId> {
    let (n, c) = check_label_matrix(g.value(scores), labels)?;
    for row in 0..n {
        for col in 0..c {
            let v = labels.data()[row * c + col];
            if v != 0.0 && v != 1.0 {
                return Err(LossError::NotBinary { row, value: v });
            }
        }
    }
    let log_probs = g.log_sigmoid(scores)?;
    let mask = g.constant(labels.clone())?;
    let masked = g.mul(log_probs, mask)?;
    let mean = g.mean(masked)?;
    Ok(g.neg(mean)?)
}

/// Polynomial ramp for the unlabeled-risk term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    total_steps: usize,
    alpha: f64,
}

impl AnnealSchedule {
    pub fn new(total_steps: usize, alpha: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(LossError::EmptySchedule);
        }
        if alpha < 2.0 {
            return Err(LossError::AlphaTooSmall(alpha));
        }
        Ok(Self { total_steps, alpha })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(t / T)^alpha` for `1 <= t <= T`.
    pub fn weight(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.total_steps {
            return Err(LossError::StepOutOfRange {
                t,
                total: self.total_steps,
            });
        }
        let ratio = t as f64 / self.total_steps as f64;
        // Integral exponents take the exact repeated-multiplication path.
        if self.alpha.fract() == 0.0 && self.alpha <= i32::MAX as f64 {
            Ok(ratio.powi(self.alpha as i32))
        } else {
            Ok(ratio.powf(self.alpha))
        }
    }
}

/// Annealed joint objective.
///
/// With a supervised term present the result is `ce + (t/T)^alpha * pu`.
/// Without one (single-class data with no negative labels) the loss falls
/// back to the unlabeled-risk term alone, un-annealed unless
/// `anneal_fallback` is set.
pub fn total_loss(
    g: &mut Graph,
    ce: Option<NodeId>,
    pu: NodeId,
    t: usize,
    schedule: &AnnealSchedule,
    anneal_fallback: bool,
) -> Result<NodeId> {
    match ce {
        Some(ce) => {
            let w = schedule.weight(t)?;
            let weighted = g.scale(pu, w)?;
            Ok(g.add(ce, weighted)?)
        }
        None if anneal_fallback => {
            let w = schedule.weight(t)?;
            Ok(g.scale(pu, w)?)
        }
        None => Ok(pu),
    }
}
