//! Training objectives: the variational style/content bounds, the
//! reconstruction and insertion losses, and their weighted combination.
//!
//! Sign conventions: `l1_hat` and `l2_hat` are mutual-information
//! estimates in nats; `total_loss` *maximizes* the lower bound (so it
//! enters negated) and *minimizes* the upper bound. The auxiliary
//! classifier Q is trained separately by `q_loss` with the encoder
//! frozen; inside the main losses Q is a constant.

use crate::corpus::{GapSample, InsertLabel, MaskedSample};
use crate::error::{Result, RlmError};
use crate::model::ModelForward;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamSet, TensorId};
use crate::vocab::{StyleId, TokenId, Vocab};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Auxiliary style classifier `Q(s | c)`: a single affine layer with
/// softmax over styles, read from a content embedding.
#[derive(Debug, Clone)]
pub struct QClassifier<T> {
    pub dim: usize,
    pub n_styles: usize,
    pub set: ParamSet<T>,
}

impl<T: Scalar> QClassifier<T> {
    pub fn init(dim: usize, n_styles: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let w: Vec<T> = (0..dim * n_styles)
            .map(|_| T::from_f64(rng.gen_range(-0.02..0.02)))
            .collect();
        set.add("q.w", dim, n_styles, w);
        set.add("q.b", 1, n_styles, vec![T::zero(); n_styles]);
        QClassifier { dim, n_styles, set }
    }

    pub fn cast<U: Scalar>(&self) -> QClassifier<U> {
        QClassifier {
            dim: self.dim,
            n_styles: self.n_styles,
            set: self.set.cast(),
        }
    }

    /// Tape-free `log Q(. | c)`.
    pub fn log_probs(&self, c: &[T]) -> Vec<T> {
        let w = self.set.get("q.w");
        let b = self.set.get("q.b");
        let mut logits = b.data.clone();
        for (i, &x) in c.iter().enumerate() {
            for s in 0..self.n_styles {
                logits[s] += x * w.data[i * self.n_styles + s];
            }
        }
        let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = logits
            .iter()
            .map(|&l| (l - max).exp())
            .fold(T::zero(), |a, b| a + b)
            .ln()
            + max;
        logits.iter().map(|&l| l - lse).collect()
    }
}

/// `1 x S` log-probabilities of Q on the graph, from a `1 x d` content
/// row and Q's weight / bias leaves (constants in the main loss, trainable
/// leaves in `q_loss`).
pub fn q_log_probs_row<T: Scalar>(
    g: &Graph<T>,
    qw: TensorId,
    qb: TensorId,
    c_row: TensorId,
) -> TensorId {
    let logits = g.add_row_broadcast(g.matmul(c_row, qw), qb);
    g.log_softmax_rows(logits)
}

/// Content rows (masked-position embeddings) for a batch of samples.
pub fn content_rows<T: Scalar>(
    fwd: &ModelForward<'_, T>,
    samples: &[MaskedSample],
) -> Result<Vec<TensorId>> {
    samples
        .iter()
        .map(|s| {
            let (contents, pos) = fwd.encode_content(s.prefix(), s.suffix())?;
            Ok(fwd.g.slice_rows(contents, pos, 1))
        })
        .collect()
}

/// Lower bound on `I(s; c)` (Barber–Agakov with uniform style prior):
/// `mean_u log Q(s_u | c_u) + ln S`.
pub fn l1_hat<T: Scalar>(
    g: &Graph<T>,
    qw: TensorId,
    qb: TensorId,
    rows: &[TensorId],
    styles: &[StyleId],
    n_styles: usize,
) -> Result<TensorId> {
    if rows.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "lower-bound estimator needs at least one sample".into(),
        ));
    }
    assert_eq!(rows.len(), styles.len());
    let terms: Vec<TensorId> = rows
        .iter()
        .zip(styles)
        .map(|(&r, &s)| {
            let lp = q_log_probs_row(g, qw, qb, r);
            g.select(lp, 0, s)
        })
        .collect();
    let mean = g.mean_scalars(&terms);
    let ln_s = g.scalar(T::from_f64((n_styles as f64).ln()));
    Ok(g.add(mean, ln_s))
}

/// Contrastive upper bound on `I(s; c)`:
/// `(1/U^2) sum_u sum_v [log Q(s_u | c_u) - log Q(s_v | c_u)]`.
///
/// Computed pairwise as `(t_uv + t_vu)` over `u < v`. When Q ignores its
/// content input the two terms are exact IEEE negations of each other, so
/// the estimate is exactly `0.0` — not merely small.
pub fn l2_hat<T: Scalar>(
    g: &Graph<T>,
    qw: TensorId,
    qb: TensorId,
    rows: &[TensorId],
    styles: &[StyleId],
) -> Result<TensorId> {
    if rows.len() < 2 {
        return Err(RlmError::BatchTooSmall(
            "contrastive upper bound needs at least two samples".into(),
        ));
    }
    assert_eq!(rows.len(), styles.len());
    let lps: Vec<TensorId> = rows
        .iter()
        .map(|&r| q_log_probs_row(g, qw, qb, r))
        .collect();
    let u = rows.len();
    let mut pair_terms = Vec::new();
    for a in 0..u {
        for b in a + 1..u {
            // t_ab = log Q(s_a|c_a) - log Q(s_b|c_a)
            let t_ab = g.sub(g.select(lps[a], 0, styles[a]), g.select(lps[a], 0, styles[b]));
            let t_ba = g.sub(g.select(lps[b], 0, styles[b]), g.select(lps[b], 0, styles[a]));
            pair_terms.push(g.add(t_ab, t_ba));
        }
    }
    let sum = g.sum_scalars(&pair_terms);
    Ok(g.scale(sum, 1.0 / (u * u) as f64))
}

/// Diagnostic variational log-likelihood: `mean_u log Q(s_u | c_u)`.
/// Tape-free, reported in training metrics but never optimized directly.
pub fn l3_hat<T: Scalar>(q: &QClassifier<T>, rows: &[Vec<T>], styles: &[StyleId]) -> Result<f64> {
    if rows.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "log-likelihood diagnostic needs at least one sample".into(),
        ));
    }
    let mut acc = 0.0;
    for (c, &s) in rows.iter().zip(styles) {
        acc += q.log_probs(c)[s].to_f64();
    }
    Ok(acc / rows.len() as f64)
}

/// Content token ids ranked by logit, descending; ties break toward the
/// lower id. Shared by the reconstruction loss and the decoder's
/// candidate pool.
pub fn top_k_content<T: Scalar>(logits: &[T], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (Vocab::RESERVED..logits.len()).collect();
    ids.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Training-time candidate pool: top-K by prediction logit, but with the
/// true target always present (displacing the last slot if it missed the
/// cut) so the identity span→token mapping is exercised every step.
pub fn recon_candidates<T: Scalar>(logits: &[T], k: usize, target: TokenId) -> Vec<TokenId> {
    let mut ids = top_k_content(logits, k);
    if !ids.contains(&target) {
        if let Some(last) = ids.last_mut() {
            *last = target;
        }
    }
    ids
}

/// Reconstruction loss: for each sample, take the top-K prediction
/// candidates (selection reads forward values only — no gradient flows
/// through the ranking) and average the reconstruction cross-entropy of
/// the original token given each candidate span.
///
/// Candidates are ranked under the *next* style, not the sample's own:
/// at decode time the pool is drawn from the prediction head conditioned
/// on the transfer target, so the spans the reconstruction head must
/// score are mostly cross-style. Ranking under the sample's own style
/// never shows it those spans and their probability collapses to the
/// floor, which walls off every genuine style swap.
pub fn recon_nll<T: Scalar>(
    fwd: &ModelForward<'_, T>,
    samples: &[MaskedSample],
    top_k: usize,
) -> Result<TensorId> {
    if samples.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "reconstruction loss needs at least one sample".into(),
        ));
    }
    let g = fwd.g;
    let n_styles = fwd.cfg().n_styles;
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let (contents, pos) = fwd.encode_content(s.prefix(), s.suffix())?;
        let cross = fwd.fuse((s.style + 1) % n_styles, contents, pos)?;
        let pred_logits = fwd.predict_logits(cross);
        let candidates = recon_candidates(&g.data(pred_logits), top_k, s.target);
        let mut ces = Vec::with_capacity(candidates.len() + 1);
        let mut identity = None;
        for y in candidates {
            let (rc, rpos) = fwd.encode_reconstruction(&[y], s.prefix(), s.suffix())?;
            let row = g.slice_rows(rc, rpos, 1);
            let logits = fwd.reconstruct_logits(row);
            let ce = g.cross_entropy_logits(logits, s.target);
            if y == s.target {
                identity = Some(ce);
            }
            ces.push(ce);
        }
        // The identity pair enters the mean twice: it is the only pair
        // teaching span copying, and single weight dilutes it K-fold
        // against the forgiving cross-style pairs until the decoder
        // starts editing content slots it should leave alone.
        ces.extend(identity);
        per_sample.push(g.mean_scalars(&ces));
    }
    Ok(g.mean_scalars(&per_sample))
}

/// Masked prediction loss: cross-entropy of the prediction head toward
/// the original token, in the sentence's own style. This is the plain MLM
/// signal that anchors the prediction head before the bounds reshape it.
pub fn pred_nll<T: Scalar>(
    fwd: &ModelForward<'_, T>,
    samples: &[MaskedSample],
) -> Result<TensorId> {
    if samples.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "prediction loss needs at least one sample".into(),
        ));
    }
    let g = fwd.g;
    let terms: Vec<TensorId> = samples
        .iter()
        .map(|s| {
            let (contents, pos) = fwd.encode_content(s.prefix(), s.suffix())?;
            let fused = fwd.fuse(s.style, contents, pos)?;
            let logits = fwd.predict_logits(fused);
            Ok(g.cross_entropy_logits(logits, s.target))
        })
        .collect::<Result<_>>()?;
    Ok(g.mean_scalars(&terms))
}

/// Insertion supervision over gap samples.
///
/// Width `k >= 1` gaps train the insertion head (`k >= 2` -> `[MASK]`,
/// `k == 1` -> `[PAD]`). Width `k == 0` (spurious mask) trains the
/// *prediction* head toward `[PAD]` — its deletion class — and also the
/// insertion head toward stop, because decode-time insertion queries run
/// against already-complete contexts. All terms enter one plain mean.
pub fn insert_loss<T: Scalar>(fwd: &ModelForward<'_, T>, gaps: &[GapSample]) -> Result<TensorId> {
    if gaps.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "insertion loss needs at least one gap sample".into(),
        ));
    }
    let g = fwd.g;
    let mut terms = Vec::new();
    for gap in gaps {
        let (contents, pos) = fwd.encode_content(&gap.prefix, &gap.suffix)?;
        let fused = fwd.fuse(gap.style, contents, pos)?;
        if gap.k == 0 {
            let logits = fwd.predict_logits(fused);
            terms.push(g.cross_entropy_logits(logits, Vocab::PAD));
            let ins = fwd.insert_logits(fused);
            terms.push(g.cross_entropy_logits(ins, 1));
        } else {
            let logits = fwd.insert_logits(fused);
            let target = match gap.label {
                InsertLabel::Mask => 0,
                InsertLabel::Pad => 1,
            };
            terms.push(g.cross_entropy_logits(logits, target));
        }
    }
    Ok(g.mean_scalars(&terms))
}

/// Q's own training loss: mean cross-entropy toward the true style, with
/// the encoder frozen (build the forward pass with `needs_grad = false`
/// for the model and trainable leaves for Q).
pub fn q_loss<T: Scalar>(
    g: &Graph<T>,
    qw: TensorId,
    qb: TensorId,
    rows: &[TensorId],
    styles: &[StyleId],
) -> Result<TensorId> {
    if rows.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "classifier loss needs at least one sample".into(),
        ));
    }
    let terms: Vec<TensorId> = rows
        .iter()
        .zip(styles)
        .map(|(&r, &s)| {
            let lp = q_log_probs_row(g, qw, qb, r);
            g.scale(g.select(lp, 0, s), -1.0)
        })
        .collect();
    Ok(g.mean_scalars(&terms))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight on the contrastive upper bound.
    pub beta: f64,
    pub w_pred: f64,
    pub w_recon: f64,
    pub w_insert: f64,
    pub top_k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            w_pred: 1.0,
            w_recon: 1.0,
            w_insert: 1.0,
            top_k: 5,
        }
    }
}

/// Per-term values of one combined loss evaluation.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub pred: f64,
    pub recon: f64,
    pub insert: f64,
    pub total: f64,
}

/// Combined objective:
/// `total = -l1 + beta * l2 + w_pred * pred + w_recon * recon + w_insert * insert`.
pub fn total_loss<T: Scalar>(
    fwd: &ModelForward<'_, T>,
    qw: TensorId,
    qb: TensorId,
    samples: &[MaskedSample],
    gaps: &[GapSample],
    weights: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let g = fwd.g;
    if samples.is_empty() {
        return Err(RlmError::BatchTooSmall(
            "combined loss needs at least one masked sample".into(),
        ));
    }
    let styles: Vec<StyleId> = samples.iter().map(|s| s.style).collect();
    let n_styles = fwd.cfg().n_styles;

    // One encoder pass per sample feeds the content row, the prediction
    // term, and the candidate ranking; only the K candidate
    // reconstructions need further passes.
    let mut rows = Vec::with_capacity(samples.len());
    let mut pred_ces = Vec::with_capacity(samples.len());
    let mut recon_means = Vec::with_capacity(samples.len());
    for s in samples {
        let (contents, pos) = fwd.encode_content(s.prefix(), s.suffix())?;
        rows.push(g.slice_rows(contents, pos, 1));
        let fused = fwd.fuse(s.style, contents, pos)?;
        let pred_logits = fwd.predict_logits(fused);
        pred_ces.push(g.cross_entropy_logits(pred_logits, s.target));
        // Candidate ranking under the next style mirrors decode-time
        // conditions; see `recon_nll` for why own-style ranking fails.
        let cross = fwd.fuse((s.style + 1) % n_styles, contents, pos)?;
        let cross_logits = fwd.predict_logits(cross);
        let candidates = recon_candidates(&g.data(cross_logits), weights.top_k, s.target);
        let mut ces = Vec::with_capacity(candidates.len() + 1);
        let mut identity = None;
        for y in candidates {
            let (rc, rpos) = fwd.encode_reconstruction(&[y], s.prefix(), s.suffix())?;
            let row = g.slice_rows(rc, rpos, 1);
            let ce = g.cross_entropy_logits(fwd.reconstruct_logits(row), s.target);
            if y == s.target {
                identity = Some(ce);
            }
            ces.push(ce);
        }
        // Double-weighted identity pair; see `recon_nll`.
        ces.extend(identity);
        recon_means.push(g.mean_scalars(&ces));
    }

    let l1 = l1_hat(g, qw, qb, &rows, &styles, n_styles)?;
    let l2 = l2_hat(g, qw, qb, &rows, &styles)?;
    let pred = g.mean_scalars(&pred_ces);
    let recon = g.mean_scalars(&recon_means);
    let insert = insert_loss(fwd, gaps)?;

    let mut total = g.scale(l1, -1.0);
    total = g.add(total, g.scale(l2, weights.beta));
    total = g.add(total, g.scale(pred, weights.w_pred));
    total = g.add(total, g.scale(recon, weights.w_recon));
    total = g.add(total, g.scale(insert, weights.w_insert));

    let breakdown = LossBreakdown {
        l1: g.value(l1).to_f64(),
        l2: g.value(l2).to_f64(),
        pred: g.value(pred).to_f64(),
        recon: g.value(recon).to_f64(),
        insert: g.value(insert).to_f64(),
        total: g.value(total).to_f64(),
    };
    if !breakdown.total.is_finite() {
        return Err(RlmError::NonFinite("combined loss".into()));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn const_rows(g: &Graph<f64>, rows: &[Vec<f64>]) -> Vec<TensorId> {
        rows.iter()
            .map(|r| g.constant(1, r.len(), r.clone()))
            .collect()
    }

    fn q_leaves(g: &Graph<f64>, q: &QClassifier<f64>) -> (TensorId, TensorId) {
        let w = q.set.get("q.w");
        let b = q.set.get("q.b");
        (
            g.constant(w.rows, w.cols, w.data.clone()),
            g.constant(b.rows, b.cols, b.data.clone()),
        )
    }

    #[test]
    fn l1_matches_hand_computation() {
        // d = 1, S = 2, w = [[1, -1]], b = [0, 0]
        let mut q = QClassifier::<f64>::init(1, 2, 0);
        q.set.params[0].data = vec![1.0, -1.0];
        q.set.params[1].data = vec![0.0, 0.0];
        let g = Graph::new();
        let (qw, qb) = q_leaves(&g, &q);
        // c = [2] -> logits (2, -2); log Q(0|c) = -ln(1 + e^-4)
        let rows = const_rows(&g, &[vec![2.0]]);
        let l1 = l1_hat(&g, qw, qb, &rows, &[0], 2).unwrap();
        let expect = -(1.0 + (-4.0f64).exp()).ln() + 2.0f64.ln();
        assert!((g.value(l1) - expect).abs() < 1e-12);
        // a perfect-certainty classifier on S = 2 approaches ln 2
        assert!(expect < 2.0f64.ln());
    }

    #[test]
    fn l2_matches_hand_computation() {
        let mut q = QClassifier::<f64>::init(1, 2, 0);
        q.set.params[0].data = vec![1.0, -1.0];
        q.set.params[1].data = vec![0.0, 0.0];
        let g = Graph::new();
        let (qw, qb) = q_leaves(&g, &q);
        // c_0 = [1] style 0, c_1 = [-1] style 1
        let rows = const_rows(&g, &[vec![1.0], vec![-1.0]]);
        let l2 = l2_hat(&g, qw, qb, &rows, &[0, 1]).unwrap();
        // log Q(0|c_0) - log Q(1|c_0) = 2, same for the mirrored pair
        // (1/4) * (2 + 2) = 1
        assert!((g.value(l2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_is_exactly_zero_for_content_blind_q() {
        let mut q = QClassifier::<f64>::init(3, 2, 7);
        // zero weights: Q depends only on its bias, never on content
        q.set.params[0].data = vec![0.0; 6];
        q.set.params[1].data = vec![0.3, -0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = Graph::new();
        let (qw, qb) = q_leaves(&g, &q);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let styles: Vec<StyleId> = (0..8).map(|i| i % 2).collect();
        let rows = const_rows(&g, &rows);
        let l2 = l2_hat(&g, qw, qb, &rows, &styles).unwrap();
        assert_eq!(g.value(l2).to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn estimators_reject_small_batches() {
        let q = QClassifier::<f64>::init(2, 2, 0);
        let g = Graph::new();
        let (qw, qb) = q_leaves(&g, &q);
        assert!(matches!(
            l1_hat(&g, qw, qb, &[], &[], 2),
            Err(RlmError::BatchTooSmall(_))
        ));
        let rows = const_rows(&g, &[vec![1.0, 0.0]]);
        assert!(matches!(
            l2_hat(&g, qw, qb, &rows, &[0]),
            Err(RlmError::BatchTooSmall(_))
        ));
        assert!(l3_hat(&q, &[], &[]).is_err());
    }

    #[test]
    fn l3_is_mean_log_likelihood() {
        let mut q = QClassifier::<f64>::init(1, 2, 0);
        q.set.params[0].data = vec![0.0, 0.0];
        q.set.params[1].data = vec![0.0, 0.0];
        // uniform Q: every term is -ln 2
        let v = l3_hat(&q, &[vec![0.4], vec![-1.0]], &[0, 1]).unwrap();
        assert!((v + 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn top_k_ranks_by_logit_and_breaks_ties_low() {
        // reserved ids 0..4 never appear
        let logits = vec![9.0, 9.0, 9.0, 9.0, 0.5, 2.0, 2.0, -1.0];
        assert_eq!(top_k_content(&logits, 3), vec![5, 6, 4]);
        assert_eq!(top_k_content(&logits, 10), vec![5, 6, 4, 7]);
    }

    fn tiny_setup() -> (ModelParams<f64>, QClassifier<f64>, Vec<MaskedSample>, Vec<GapSample>) {
        let cfg = ModelConfig::tiny(10, 2);
        let m = ModelParams::init(cfg, 3);
        let q = QClassifier::init(8, 2, 4);
        let samples = vec![
            MaskedSample {
                masked: vec![4, Vocab::MASK, 6],
                target: 5,
                style: 0,
                pos: 1,
            },
            MaskedSample {
                masked: vec![7, 8, Vocab::MASK],
                target: 9,
                style: 1,
                pos: 2,
            },
        ];
        let gaps = vec![
            GapSample {
                prefix: vec![4],
                suffix: vec![6],
                k: 2,
                label: InsertLabel::Mask,
                style: 0,
            },
            GapSample {
                prefix: vec![7],
                suffix: vec![8, 9],
                k: 1,
                label: InsertLabel::Pad,
                style: 1,
            },
            GapSample {
                prefix: vec![4, 5],
                suffix: vec![6],
                k: 0,
                label: InsertLabel::Pad,
                style: 0,
            },
        ];
        (m, q, samples, gaps)
    }

    #[test]
    fn insert_loss_on_zeroed_heads_is_closed_form() {
        let (mut m, _, _, gaps) = tiny_setup();
        for name in ["head_pred.w", "head_pred.b", "head_insert.w", "head_insert.b"] {
            let idx = m.set.index_of(name);
            for v in m.set.params[idx].data.iter_mut() {
                *v = 0.0;
            }
        }
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let loss = insert_loss(&fwd, &gaps).unwrap();
        // three uniform binary decisions (ln 2: the k=2, k=1, and k=0
        // insertion terms) and one uniform V=10 prediction term (ln 10)
        let expect = (3.0 * 2.0f64.ln() + 10.0f64.ln()) / 4.0;
        assert!((g.value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_the_stated_linear_combination() {
        let (m, q, samples, gaps) = tiny_setup();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let (qw, qb) = q_leaves(&g, &q);
        let weights = LossWeights {
            beta: 0.7,
            w_pred: 0.6,
            w_recon: 1.3,
            w_insert: 0.5,
            top_k: 3,
        };
        let (total, b) = total_loss(&fwd, qw, qb, &samples, &gaps, &weights).unwrap();
        let recombined = -b.l1 + 0.7 * b.l2 + 0.6 * b.pred + 1.3 * b.recon + 0.5 * b.insert;
        assert!((b.total - recombined).abs() < 1e-9);
        assert!((g.value(total) - b.total).abs() < 1e-12);
        assert!(b.pred > 0.0 && b.recon > 0.0 && b.insert > 0.0);
    }

    #[test]
    fn main_loss_gradients_skip_q() {
        // Q enters the main loss as constants; gradients reach the model
        // leaves but no gradient buffer exists for Q's tensors.
        let (m, q, samples, gaps) = tiny_setup();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, true);
        let (qw, qb) = q_leaves(&g, &q);
        let (total, _) = total_loss(&fwd, qw, qb, &samples, &gaps, &LossWeights::default()).unwrap();
        g.backward(total);
        let tok_grad = g.grad(fwd.leaf("tok_emb"));
        assert!(tok_grad.iter().any(|&v| v != 0.0));
        assert!(g.grad(qw).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q_loss_gradients_skip_model() {
        let (m, q, samples, _) = tiny_setup();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let w = q.set.get("q.w");
        let b = q.set.get("q.b");
        let qw = g.leaf(w.rows, w.cols, w.data.clone(), true);
        let qb = g.leaf(b.rows, b.cols, b.data.clone(), true);
        let rows = content_rows(&fwd, &samples).unwrap();
        let styles: Vec<StyleId> = samples.iter().map(|s| s.style).collect();
        let loss = q_loss(&g, qw, qb, &rows, &styles).unwrap();
        assert!(g.value(loss) > 0.0);
        g.backward(loss);
        assert!(g.grad(qw).iter().any(|&v| v != 0.0));
        assert!(g.grad(fwd.leaf("tok_emb")).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q_step_reduces_q_loss() {
        let (m, q, samples, _) = tiny_setup();
        let eval = |q: &QClassifier<f64>| {
            let g = Graph::new();
            let fwd = ModelForward::new(&g, &m, false);
            let w = q.set.get("q.w");
            let b = q.set.get("q.b");
            let qw = g.leaf(w.rows, w.cols, w.data.clone(), true);
            let qb = g.leaf(b.rows, b.cols, b.data.clone(), true);
            let rows = content_rows(&fwd, &samples).unwrap();
            let styles: Vec<StyleId> = samples.iter().map(|s| s.style).collect();
            let loss = q_loss(&g, qw, qb, &rows, &styles).unwrap();
            g.backward(loss);
            (g.value(loss), g.grad(qw), g.grad(qb))
        };
        let (before, gw, gb) = eval(&q);
        let mut stepped = q.clone();
        let wi = stepped.set.index_of("q.w");
        for (v, gr) in stepped.set.params[wi].data.iter_mut().zip(&gw) {
            *v -= 0.5 * gr;
        }
        let bi = stepped.set.index_of("q.b");
        for (v, gr) in stepped.set.params[bi].data.iter_mut().zip(&gb) {
            *v -= 0.5 * gr;
        }
        let (after, _, _) = eval(&stepped);
        assert!(after < before, "{after} !< {before}");
    }
}
