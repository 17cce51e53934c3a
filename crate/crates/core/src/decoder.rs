//! Greedy replacing decoder.
//!
//! Source tokens are rewritten left to right. At source position `i` the
//! decoder picks the span that maximizes prediction probability times
//! reconstruction probability, drawing token candidates from the top-K of
//! the prediction distribution over content tokens. With deletion enabled
//! the `[PAD]` token competes as a first candidate (empty span); with
//! insertion enabled the insertion head decides after each emitted token
//! whether the span continues, up to `max_insert` tokens.
//!
//! Score accounting (log domain, natural log):
//! - every emitted token contributes `ln p_pred + ln p_recon`;
//! - a deletion contributes the same two terms for the `[PAD]` candidate;
//! - each *continue* decision contributes `ln p(mask)`;
//! - a *stop* decision contributes `ln p(pad)` only for spans of length
//!   two or more that stopped short of the cap — single-token spans are
//!   the default shape and carry no insertion factor, and hitting the cap
//!   is a forced stop.
//!
//! All decision ties break deterministically: candidates toward the
//! lowest token id, the continue/stop decision toward stop.

use crate::error::{Result, RlmError};
use crate::model::ModelParams;
use crate::objectives::top_k_content;
use crate::scalar::PROB_FLOOR;
use crate::vocab::{StyleId, TokenId, Vocab};

/// Inference-time probability interface, always in `f64`. Implemented by
/// the trained model and by the oracle's stub tables so the decoder and
/// the exhaustive reference can be compared on identical numbers.
pub trait ScoringModel {
    fn vocab_size(&self) -> usize;
    /// `P(y | prefix, [MASK], suffix, style)` over the full vocabulary.
    fn prediction(&self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId)
        -> Result<Vec<f64>>;
    /// `P(x | span, x_prefix, [MASK], x_suffix)` over the full vocabulary.
    fn reconstruction(
        &self,
        span: &[TokenId],
        x_prefix: &[TokenId],
        x_suffix: &[TokenId],
    ) -> Result<Vec<f64>>;
    /// `[P(mask), P(pad)]`: continue vs. stop inserting.
    fn insertion(&self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId) -> Result<[f64; 2]>;
    /// Longest `prefix + suffix + specials` sequence the model can encode,
    /// if it has a limit. The decoder stops inserting before crossing it.
    fn max_len(&self) -> Option<usize> {
        None
    }
}

impl ScoringModel for ModelParams<f64> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }
    fn prediction(&self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId) -> Result<Vec<f64>> {
        self.prediction_dist(prefix, suffix, style)
    }
    fn reconstruction(
        &self,
        span: &[TokenId],
        x_prefix: &[TokenId],
        x_suffix: &[TokenId],
    ) -> Result<Vec<f64>> {
        self.reconstruction_dist(span, x_prefix, x_suffix)
    }
    fn insertion(&self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId) -> Result<[f64; 2]> {
        self.insertion_dist(prefix, suffix, style)
    }
    fn max_len(&self) -> Option<usize> {
        Some(self.cfg.l_max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeFlags {
    /// Candidate pool size, taken from the prediction distribution.
    pub top_k: usize,
    pub allow_delete: bool,
    pub allow_insert: bool,
    /// Hard cap on span length.
    pub max_insert: usize,
}

impl Default for DecodeFlags {
    fn default() -> Self {
        DecodeFlags {
            top_k: 5,
            allow_delete: true,
            allow_insert: true,
            max_insert: 4,
        }
    }
}

impl DecodeFlags {
    /// Equal-length rewriting: one output token per input token.
    pub fn equal_length(top_k: usize) -> Self {
        DecodeFlags {
            top_k,
            allow_delete: false,
            allow_insert: false,
            max_insert: 1,
        }
    }
}

/// One scored candidate at a decode micro-step.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub token: TokenId,
    pub log_pred: f64,
    pub log_recon: f64,
}

impl Candidate {
    pub fn log_score(&self) -> f64 {
        self.log_pred + self.log_recon
    }
}

/// Record of one source position.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub i: usize,
    pub y_len_before: usize,
    /// Emitted span; empty means the source token was deleted.
    pub span: Vec<TokenId>,
    /// Sum of `ln p_pred + ln p_recon` over the span (or the `[PAD]`
    /// candidate's two terms for a deletion).
    pub token_log_score: f64,
    /// Sum of insertion-head factors for this span.
    pub insert_log_factor: f64,
}

impl StepTrace {
    pub fn log_score(&self) -> f64 {
        self.token_log_score + self.insert_log_factor
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub y: Vec<TokenId>,
    /// `alignment[i]` is the output length after consuming `i` source
    /// tokens: `alignment[0] = 0`, `alignment[n] = y.len()`, monotone.
    pub alignment: Vec<usize>,
    pub log_score: f64,
    pub steps: Vec<StepTrace>,
}

fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_source(model: &impl ScoringModel, x: &[TokenId]) -> Result<()> {
    if x.is_empty() {
        return Err(RlmError::EmptySequence("transfer source".into()));
    }
    if let Some(m) = model.max_len() {
        // Worst no-insertion encode is the full source plus specials;
        // insertion growth beyond that is throttled inside decode_step.
        if x.len() + 4 > m {
            return Err(RlmError::SequenceTooLong {
                len: x.len() + 4,
                max: m,
            });
        }
    }
    for &t in x {
        if t < Vocab::RESERVED || t >= model.vocab_size() {
            return Err(RlmError::InvalidData(format!(
                "source token id {t} outside the content range"
            )));
        }
    }
    Ok(())
}

/// Score one candidate token as the next element of the span at source
/// position `i`. `y_and_span` is everything generated so far including
/// the current partial span.
pub fn score_candidate(
    model: &impl ScoringModel,
    x: &[TokenId],
    i: usize,
    y_and_span: &[TokenId],
    span_so_far: &[TokenId],
    token: TokenId,
    style: StyleId,
) -> Result<Candidate> {
    let pred = model.prediction(y_and_span, &x[i + 1..], style)?;
    let mut span = span_so_far.to_vec();
    span.push(token);
    let recon = model.reconstruction(&span, &x[..i], &x[i + 1..])?;
    Ok(Candidate {
        token,
        log_pred: ln_floor(pred[token]),
        log_recon: ln_floor(recon[x[i]]),
    })
}

/// Candidate pool at a micro-step: top-K content tokens by prediction
/// probability, plus `[PAD]` when a deletion is permitted here.
pub fn topk_candidates(
    model: &impl ScoringModel,
    x: &[TokenId],
    i: usize,
    y_and_span: &[TokenId],
    style: StyleId,
    top_k: usize,
    include_pad: bool,
) -> Result<Vec<TokenId>> {
    let pred = model.prediction(y_and_span, &x[i + 1..], style)?;
    let mut pool = top_k_content(&pred, top_k);
    if include_pad {
        pool.push(Vocab::PAD);
    }
    Ok(pool)
}

fn best_candidate(cands: &[Candidate]) -> &Candidate {
    let mut best = &cands[0];
    for c in &cands[1..] {
        let better = c.log_score() > best.log_score()
            || (c.log_score() == best.log_score() && c.token < best.token);
        if better {
            best = c;
        }
    }
    best
}

/// Decode one source position given the output built so far. Returns the
/// step trace; the caller extends `y` with `trace.span`.
pub fn decode_step(
    model: &impl ScoringModel,
    x: &[TokenId],
    i: usize,
    y: &[TokenId],
    style: StyleId,
    flags: &DecodeFlags,
) -> Result<StepTrace> {
    if i >= x.len() {
        return Err(RlmError::DecodeComplete);
    }
    assert!(flags.top_k >= 1 && flags.max_insert >= 1);
    let mut span: Vec<TokenId> = Vec::new();
    let mut y_and_span = y.to_vec();
    let mut token_log_score = 0.0;
    let mut insert_log_factor = 0.0;
    loop {
        let include_pad = flags.allow_delete && span.is_empty();
        let pool = topk_candidates(model, x, i, &y_and_span, style, flags.top_k, include_pad)?;
        let cands: Vec<Candidate> = pool
            .into_iter()
            .map(|t| score_candidate(model, x, i, &y_and_span, &span, t, style))
            .collect::<Result<_>>()?;
        let best = best_candidate(&cands).clone();
        token_log_score += best.log_score();
        if best.token == Vocab::PAD {
            // deletion: empty span, no insertion factors
            break;
        }
        span.push(best.token);
        y_and_span.push(best.token);
        // A further token must still fit in the model's positional table
        // ([BOS] y+span+1 [MASK] suffix [EOS]); running out of room is a
        // forced stop exactly like the insertion cap. Without this a
        // model that degenerates into always-continue walks the decoder
        // past its own encoder limit.
        let room = model.max_len().map_or(true, |m| {
            y_and_span.len() + 1 + (x.len() - i - 1) + 3 <= m // prediction input
                && span.len() + 1 + (x.len() - 1) + 3 <= m // reconstruction input
        });
        if !flags.allow_insert || span.len() == flags.max_insert || !room {
            break; // cap (or insertion disabled): forced stop, no factor
        }
        let [p_mask, p_pad] = model.insertion(&y_and_span, &x[i + 1..], style)?;
        if p_mask > p_pad {
            insert_log_factor += ln_floor(p_mask);
        } else {
            if span.len() >= 2 {
                insert_log_factor += ln_floor(p_pad);
            }
            break;
        }
    }
    Ok(StepTrace {
        i,
        y_len_before: y.len(),
        span,
        token_log_score,
        insert_log_factor,
    })
}

/// Rewrite `x` into `style`, greedily, one source position at a time.
pub fn transfer(
    model: &impl ScoringModel,
    x: &[TokenId],
    style: StyleId,
    flags: &DecodeFlags,
) -> Result<TransferResult> {
    check_source(model, x)?;
    let mut y: Vec<TokenId> = Vec::new();
    let mut alignment = vec![0usize];
    let mut steps = Vec::with_capacity(x.len());
    let mut log_score = 0.0;
    for i in 0..x.len() {
        let trace = decode_step(model, x, i, &y, style, flags)?;
        y.extend_from_slice(&trace.span);
        alignment.push(y.len());
        log_score += trace.log_score();
        steps.push(trace);
    }
    Ok(TransferResult {
        y,
        alignment,
        log_score,
        steps,
    })
}

fn check_alignment(
    x: &[TokenId],
    y: &[TokenId],
    alignment: &[usize],
    flags: &DecodeFlags,
) -> Result<()> {
    if alignment.len() != x.len() + 1 {
        return Err(RlmError::InvalidAlignment(format!(
            "expected {} entries, found {}",
            x.len() + 1,
            alignment.len()
        )));
    }
    if alignment[0] != 0 {
        return Err(RlmError::InvalidAlignment("must start at 0".into()));
    }
    if *alignment.last().unwrap() != y.len() {
        return Err(RlmError::InvalidAlignment(format!(
            "must end at |Y| = {}",
            y.len()
        )));
    }
    for w in alignment.windows(2) {
        if w[1] < w[0] {
            return Err(RlmError::InvalidAlignment("not monotone".into()));
        }
        let k = w[1] - w[0];
        if k > flags.max_insert {
            return Err(RlmError::InvalidAlignment(format!(
                "span of {k} exceeds cap {}",
                flags.max_insert
            )));
        }
        if k == 0 && !flags.allow_delete {
            return Err(RlmError::InvalidAlignment(
                "empty span with deletion disabled".into(),
            ));
        }
        if k > 1 && !flags.allow_insert {
            return Err(RlmError::InvalidAlignment(
                "multi-token span with insertion disabled".into(),
            ));
        }
    }
    Ok(())
}

/// Recompute the total log-score of `(x, y, alignment)` from scratch.
/// For a decoder output this reproduces [`TransferResult::log_score`]
/// term by term.
pub fn sequence_score(
    model: &impl ScoringModel,
    x: &[TokenId],
    y: &[TokenId],
    alignment: &[usize],
    style: StyleId,
    flags: &DecodeFlags,
) -> Result<f64> {
    check_source(model, x)?;
    check_alignment(x, y, alignment, flags)?;
    let mut total = 0.0;
    for i in 0..x.len() {
        let (start, end) = (alignment[i], alignment[i + 1]);
        if start == end {
            // deletion: the [PAD] candidate's two terms
            let pred = model.prediction(&y[..start], &x[i + 1..], style)?;
            let recon = model.reconstruction(&[Vocab::PAD], &x[..i], &x[i + 1..])?;
            total += ln_floor(pred[Vocab::PAD]) + ln_floor(recon[x[i]]);
            continue;
        }
        let k = end - start;
        for t in 0..k {
            let pred = model.prediction(&y[..start + t], &x[i + 1..], style)?;
            let recon = model.reconstruction(&y[start..start + t + 1], &x[..i], &x[i + 1..])?;
            total += ln_floor(pred[y[start + t]]) + ln_floor(recon[x[i]]);
            // continue factor for every token after which the span went on
            if flags.allow_insert && t + 1 < k {
                let [p_mask, _] = model.insertion(&y[..start + t + 1], &x[i + 1..], style)?;
                total += ln_floor(p_mask);
            }
        }
        // stop factor: only spans of >= 2 that stopped short of the cap
        if flags.allow_insert && k >= 2 && k < flags.max_insert {
            let [_, p_pad] = model.insertion(&y[..end], &x[i + 1..], style)?;
            total += ln_floor(p_pad);
        }
    }
    Ok(total)
}
