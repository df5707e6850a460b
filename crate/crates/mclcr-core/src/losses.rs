//! Supervised contrastive loss, binary cross-entropy, their weighted
//! combination, and the evaluation metrics (accuracy, ROC-AUC).
//!
//! The contrastive denominator sums over negatives only — samples of the
//! other class — which is the form the rest of the training stack is
//! calibrated against. `SupconDenominator::All` switches to the variant
//! that sums over every non-anchor sample for side-by-side comparison.

use thiserror::Error;

use crate::dataset::Split;
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("degenerate contrastive batch: {0}")]
    DegenerateBatch(String),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("temperature {0} must be positive")]
    BadTemperature(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("metric needs both classes present")]
    SingleClass,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which samples appear in the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupconDenominator {
    /// Only different-class samples (the implemented equation).
    #[default]
    Negatives,
    /// Every non-anchor sample.
    All,
}

/// Per-sample fake probabilities with ground-truth labels.
#[derive(Debug, Clone)]
pub struct EvalScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EvalScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        assert_eq!(scores.len(), labels.len());
        debug_assert!(scores.iter().all(|v| v.is_finite()));
        Self { scores, labels }
    }
}

/// Supervised contrastive loss over L2-normalized projections `z: [b, p]`.
///
/// For each anchor i with positives P(i) (same class, anchor excluded) and
/// negatives N(i):
///
///   L = Σ_i (−1/|P(i)|) Σ_{p∈P(i)} log( exp(z_i·z_p/τ) / Σ_{n∈N(i)} exp(z_i·z_n/τ) )
///
/// built from graph primitives so it is differentiable; the log-sum-exp is
/// stabilized with a detached per-row max.
pub fn supcon_loss(
    g: &mut Graph,
    z: NodeId,
    labels: &[u8],
    tau: f64,
    denominator: SupconDenominator,
) -> Result<NodeId, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let b = labels.len();
    if b < 2 || g.shape(z)[0] != b {
        return Err(LossError::DegenerateBatch(format!(
            "batch of {b} rows vs z shape {:?}",
            g.shape(z)
        )));
    }
    for (i, &li) in labels.iter().enumerate() {
        let positives = labels
            .iter()
            .enumerate()
            .filter(|&(j, &lj)| j != i && lj == li)
            .count();
        let negatives = labels.iter().filter(|&&lj| lj != li).count();
        if positives == 0 {
            return Err(LossError::DegenerateBatch(format!(
                "anchor {i} has no positives"
            )));
        }
        if negatives == 0 {
            return Err(LossError::DegenerateBatch(format!(
                "anchor {i} has no negatives"
            )));
        }
    }

    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let st = g.scale(sim, 1.0 / tau);

    // Constant masks: positive weights 1/|P(i)| and the denominator set.
    let mut pos_w = vec![0.0; b * b];
    let mut den_mask = vec![0.0; b * b];
    for i in 0..b {
        let p_count = labels
            .iter()
            .enumerate()
            .filter(|&(j, &lj)| j != i && lj == labels[i])
            .count() as f64;
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[j] == labels[i] {
                pos_w[i * b + j] = 1.0 / p_count;
            }
            let in_denominator = match denominator {
                SupconDenominator::Negatives => labels[j] != labels[i],
                SupconDenominator::All => true,
            };
            if in_denominator {
                den_mask[i * b + j] = 1.0;
            }
        }
    }

    // Detached row-wise maxima over the denominator set stabilize the
    // log-sum-exp without changing its value or gradient.
    let st_vals = g.data(st).to_vec();
    let mut row_max = vec![f64::NEG_INFINITY; b];
    for i in 0..b {
        for j in 0..b {
            if den_mask[i * b + j] > 0.0 {
                row_max[i] = row_max[i].max(st_vals[i * b + j]);
            }
        }
    }
    let shift_mat: Vec<f64> = (0..b * b).map(|k| row_max[k / b]).collect();

    let shift = g.constant(&[b, b], shift_mat)?;
    let shifted = g.sub(st, shift)?;
    let exped = g.exp(shifted);
    let den_mask_n = g.constant(&[b, b], den_mask)?;
    let masked = g.mul(exped, den_mask_n)?;
    let row_sums = g.row_sum(masked)?;
    let log_sums = g.ln(row_sums);
    let max_vec = g.constant(&[b], row_max)?;
    let lse = g.add(log_sums, max_vec)?;

    let pos_w_n = g.constant(&[b, b], pos_w)?;
    let weighted = g.mul(st, pos_w_n)?;
    let mean_pos = g.row_sum(weighted)?;

    let per_anchor = g.sub(lse, mean_pos)?;
    Ok(g.sum(per_anchor))
}

/// Binary cross-entropy over probabilities `yhat: [b]`, clipped to
/// [1e-7, 1 − 1e-7].
pub fn ce_loss(g: &mut Graph, yhat: NodeId, labels: &[u8]) -> Result<NodeId, LossError> {
    let b = labels.len();
    if b == 0 {
        return Err(LossError::EmptyInput);
    }
    let clipped = g.clamp(yhat, 1e-7, 1.0 - 1e-7);
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let inv_y: Vec<f64> = y.iter().map(|&v| 1.0 - v).collect();
    let ones = g.constant(&[b], vec![1.0; b])?;
    let y_n = g.constant(&[b], y)?;
    let inv_y_n = g.constant(&[b], inv_y)?;
    let log_p = g.ln(clipped);
    let one_minus = g.sub(ones, clipped)?;
    let log_q = g.ln(one_minus);
    let pos_term = g.mul(y_n, log_p)?;
    let neg_term = g.mul(inv_y_n, log_q)?;
    let total = g.add(pos_term, neg_term)?;
    let s = g.sum(total);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// L = α·L_sc + (1−α)·L_ce.
pub fn combined_loss(
    g: &mut Graph,
    l_sc: NodeId,
    l_ce: NodeId,
    alpha: f64,
) -> Result<NodeId, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::AlphaOutOfRange(alpha));
    }
    let a = g.scale(l_sc, alpha);
    let c = g.scale(l_ce, 1.0 - alpha);
    Ok(g.add(a, c)?)
}

/// Fraction of samples where (score >= threshold) agrees with the label;
/// a score exactly at the threshold counts as a fake prediction.
pub fn accuracy(scores: &EvalScores, threshold: f64) -> Result<f64, LossError> {
    if scores.scores.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let correct = scores
        .scores
        .iter()
        .zip(&scores.labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.scores.len() as f64)
}

/// ROC-AUC as the Mann–Whitney statistic, computed from tie-averaged ranks:
/// the probability a random fake outscores a random real, ties at half.
pub fn auc(scores: &EvalScores) -> Result<f64, LossError> {
    let n = scores.scores.len();
    let n_fake = scores.labels.iter().filter(|&&l| l == 1).count();
    let n_real = n - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(LossError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]));
    let mut rank_sum_fake = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores.scores[idx[j + 1]] == scores.scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank over the tie run.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if scores.labels[k] == 1 {
                rank_sum_fake += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_fake - (n_fake * (n_fake + 1)) as f64 / 2.0;
    Ok(u / (n_fake as f64 * n_real as f64))
}

pub const METRICS_CSV_HEADER: &str = "epoch,split,loss,ce,sc,acc,auc";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub ce: f64,
    pub sc: f64,
    pub acc: f64,
    pub auc: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, self.loss, self.ce, self.sc, self.acc, self.auc
        )
    }
}
