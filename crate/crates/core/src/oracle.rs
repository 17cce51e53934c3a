//! Exhaustive reference decoder and the stub model seam.
//!
//! The oracle re-implements per-step decoding by brute enumeration, with
//! no code shared with [`crate::decoder`] beyond the [`ScoringModel`]
//! trait, and re-derives total scores independently. Comparing the two on
//! randomized stub models is the main correctness gate for the decoder.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecodeFlags, ScoringModel};
use crate::error::{Result, RlmError};
use crate::scalar::PROB_FLOOR;
use crate::vocab::{StyleId, TokenId, Vocab};

/// Largest vocabulary the exhaustive search will accept.
pub const MAX_ORACLE_VOCAB: usize = 64;

// ---------------------------------------------------------------------------
// Stub model: explicit probability tables with deterministic fallbacks.
// ---------------------------------------------------------------------------

type PredKey = (Vec<TokenId>, Vec<TokenId>, StyleId);
type ReconKey = (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>);

/// A [`ScoringModel`] whose distributions are looked up in tables.
///
/// Missing entries fall back to either the uniform distribution or a
/// pseudo-random one derived from a seed and the queried context, so a
/// single seed defines a complete model over every possible input.
#[derive(Debug, Clone)]
pub struct StubModel {
    pub vocab_size: usize,
    pub n_styles: usize,
    seed: Option<u64>,
    pred_table: HashMap<PredKey, Vec<f64>>,
    recon_table: HashMap<ReconKey, Vec<f64>>,
    insert_table: HashMap<PredKey, [f64; 2]>,
    /// Fixed insertion answer for every context, overriding tables.
    pub always_insert: Option<[f64; 2]>,
    /// Insertion answer indexed by generated-prefix length (clamped to
    /// the last entry); stateless, so rescoring sees the same numbers.
    pub insert_schedule: Vec<[f64; 2]>,
}

impl StubModel {
    pub fn uniform(vocab_size: usize, n_styles: usize) -> Self {
        StubModel {
            vocab_size,
            n_styles,
            seed: None,
            pred_table: HashMap::new(),
            recon_table: HashMap::new(),
            insert_table: HashMap::new(),
            always_insert: None,
            insert_schedule: Vec::new(),
        }
    }

    /// Every context answered with a pseudo-random distribution derived
    /// from `seed` and the context itself.
    pub fn random(vocab_size: usize, n_styles: usize, seed: u64) -> Self {
        StubModel {
            seed: Some(seed),
            ..Self::uniform(vocab_size, n_styles)
        }
    }

    pub fn set_prediction(&mut self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId, dist: Vec<f64>) {
        assert_eq!(dist.len(), self.vocab_size);
        self.pred_table
            .insert((prefix.to_vec(), suffix.to_vec(), style), dist);
    }

    pub fn set_reconstruction(
        &mut self,
        span: &[TokenId],
        x_prefix: &[TokenId],
        x_suffix: &[TokenId],
        dist: Vec<f64>,
    ) {
        assert_eq!(dist.len(), self.vocab_size);
        self.recon_table
            .insert((span.to_vec(), x_prefix.to_vec(), x_suffix.to_vec()), dist);
    }

    pub fn set_insertion(&mut self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId, dist: [f64; 2]) {
        self.insert_table
            .insert((prefix.to_vec(), suffix.to_vec(), style), dist);
    }

    fn fallback_dist(&self, tag: u64, key_words: impl Iterator<Item = u64>) -> Vec<f64> {
        match self.seed {
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
            Some(seed) => {
                // FNV-1a over the context words; stable across platforms
                let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
                for w in std::iter::once(tag).chain(key_words) {
                    for b in w.to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0000_0100_0000_01B3);
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let raw: Vec<f64> = (0..self.vocab_size)
                    .map(|_| rng.gen_range(0.05..1.0))
                    .collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            }
        }
    }

    fn key_words<'a>(
        parts: impl IntoIterator<Item = &'a [TokenId]>,
        style: u64,
    ) -> impl Iterator<Item = u64> {
        let mut words = vec![style];
        for part in parts {
            words.push(u64::MAX); // separator so (a|b) != (ab|)
            words.extend(part.iter().map(|&t| t as u64));
        }
        words.into_iter()
    }
}

impl ScoringModel for StubModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn prediction(&self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId) -> Result<Vec<f64>> {
        if let Some(d) = self
            .pred_table
            .get(&(prefix.to_vec(), suffix.to_vec(), style))
        {
            return Ok(d.clone());
        }
        Ok(self.fallback_dist(1, Self::key_words([prefix, suffix], style as u64)))
    }

    fn reconstruction(
        &self,
        span: &[TokenId],
        x_prefix: &[TokenId],
        x_suffix: &[TokenId],
    ) -> Result<Vec<f64>> {
        if let Some(d) =
            self.recon_table
                .get(&(span.to_vec(), x_prefix.to_vec(), x_suffix.to_vec()))
        {
            return Ok(d.clone());
        }
        Ok(self.fallback_dist(2, Self::key_words([span, x_prefix, x_suffix], 0)))
    }

    fn insertion(&self, prefix: &[TokenId], suffix: &[TokenId], style: StyleId) -> Result<[f64; 2]> {
        if let Some(d) = self.always_insert {
            return Ok(d);
        }
        if !self.insert_schedule.is_empty() {
            let idx = prefix.len().saturating_sub(1).min(self.insert_schedule.len() - 1);
            return Ok(self.insert_schedule[idx]);
        }
        if let Some(d) = self
            .insert_table
            .get(&(prefix.to_vec(), suffix.to_vec(), style))
        {
            return Ok(*d);
        }
        match self.seed {
            None => Ok([0.5, 0.5]),
            Some(_) => {
                let d = self.fallback_dist(3, Self::key_words([prefix, suffix], style as u64));
                let z = d[0] + d[1];
                Ok([d[0] / z, d[1] / z])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exhaustive per-step reference.
// ---------------------------------------------------------------------------

fn guard_vocab(model: &impl ScoringModel) -> Result<()> {
    if model.vocab_size() > MAX_ORACLE_VOCAB {
        return Err(RlmError::VocabTooLarge {
            vocab: model.vocab_size(),
            max: MAX_ORACLE_VOCAB,
        });
    }
    Ok(())
}

fn log(p: f64) -> f64 {
    if p < PROB_FLOOR {
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

#[derive(Debug, Clone)]
pub struct OracleStep {
    pub span: Vec<TokenId>,
    pub log_score: f64,
}

/// Reference decoding of one source position, by brute enumeration.
///
/// Candidate rule re-stated from scratch: rank every content token by
/// prediction probability (ties toward the lower id) and keep the first
/// `top_k`; add `[PAD]` for an empty span when deletion is allowed. Among
/// those, the winner maximizes `ln p_pred + ln p_recon`, ties again
/// toward the lower id. Insertion continues while `p(mask) > p(pad)`,
/// paying `ln p(mask)` per continuation; a voluntary stop pays
/// `ln p(pad)` only once the span holds at least two tokens, and the
/// `max_insert` cap stops for free.
pub fn exhaustive_step_argmax(
    model: &impl ScoringModel,
    x: &[TokenId],
    i: usize,
    y: &[TokenId],
    style: StyleId,
    flags: &DecodeFlags,
) -> Result<OracleStep> {
    guard_vocab(model)?;
    if i >= x.len() {
        return Err(RlmError::DecodeComplete);
    }
    let mut span: Vec<TokenId> = Vec::new();
    let mut generated = y.to_vec();
    let mut log_score = 0.0;
    loop {
        let pred = model.prediction(&generated, &x[i + 1..], style)?;
        // full stable ranking of the content vocabulary
        let mut ranked: Vec<TokenId> = (Vocab::RESERVED..model.vocab_size()).collect();
        ranked.sort_by(|&a, &b| {
            pred[b]
                .partial_cmp(&pred[a])
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        let mut pool: Vec<TokenId> = ranked.into_iter().take(flags.top_k).collect();
        if flags.allow_delete && span.is_empty() {
            pool.push(Vocab::PAD);
        }
        let mut winner: Option<(TokenId, f64)> = None;
        for cand in pool {
            let mut trial = span.clone();
            trial.push(cand);
            let recon = model.reconstruction(&trial, &x[..i], &x[i + 1..])?;
            let s = log(pred[cand]) + log(recon[x[i]]);
            let take = match winner {
                None => true,
                Some((wt, ws)) => s > ws || (s == ws && cand < wt),
            };
            if take {
                winner = Some((cand, s));
            }
        }
        let (token, s) = winner.expect("non-empty candidate pool");
        log_score += s;
        if token == Vocab::PAD {
            return Ok(OracleStep { span, log_score });
        }
        span.push(token);
        generated.push(token);
        if !flags.allow_insert || span.len() == flags.max_insert {
            return Ok(OracleStep { span, log_score });
        }
        let [p_mask, p_pad] = model.insertion(&generated, &x[i + 1..], style)?;
        if p_mask > p_pad {
            log_score += log(p_mask);
        } else {
            if span.len() >= 2 {
                log_score += log(p_pad);
            }
            return Ok(OracleStep { span, log_score });
        }
    }
}

/// Full-sentence reference decode.
pub fn oracle_transfer(
    model: &impl ScoringModel,
    x: &[TokenId],
    style: StyleId,
    flags: &DecodeFlags,
) -> Result<(Vec<TokenId>, Vec<usize>, f64)> {
    guard_vocab(model)?;
    let mut y = Vec::new();
    let mut alignment = vec![0usize];
    let mut total = 0.0;
    for i in 0..x.len() {
        let step = exhaustive_step_argmax(model, x, i, &y, style, flags)?;
        y.extend_from_slice(&step.span);
        alignment.push(y.len());
        total += step.log_score;
    }
    Ok((y, alignment, total))
}

/// Independent total score of `(x, y, alignment)`, written without
/// reference to the decoder's accounting code.
pub fn independent_score(
    model: &impl ScoringModel,
    x: &[TokenId],
    y: &[TokenId],
    alignment: &[usize],
    style: StyleId,
    flags: &DecodeFlags,
) -> Result<f64> {
    guard_vocab(model)?;
    if alignment.len() != x.len() + 1 || alignment[0] != 0 || alignment[x.len()] != y.len() {
        return Err(RlmError::InvalidAlignment("endpoints".into()));
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        let spans = &y[alignment[i]..alignment[i + 1]];
        if spans.is_empty() {
            let pred = model.prediction(&y[..alignment[i]], &x[i + 1..], style)?;
            let recon = model.reconstruction(&[Vocab::PAD], &x[..i], &x[i + 1..])?;
            total += log(pred[Vocab::PAD]) + log(recon[x[i]]);
        } else {
            for (t, &tok) in spans.iter().enumerate() {
                let consumed = alignment[i] + t;
                let pred = model.prediction(&y[..consumed], &x[i + 1..], style)?;
                let recon = model.reconstruction(&spans[..t + 1], &x[..i], &x[i + 1..])?;
                total += log(pred[tok]) + log(recon[x[i]]);
            }
            if flags.allow_insert {
                // continuation factors after tokens 1..k-1
                for t in 1..spans.len() {
                    let [p_mask, _] =
                        model.insertion(&y[..alignment[i] + t], &x[i + 1..], style)?;
                    total += log(p_mask);
                }
                // voluntary stop of a multi-token span
                if spans.len() >= 2 && spans.len() < flags.max_insert {
                    let [_, p_pad] =
                        model.insertion(&y[..alignment[i + 1]], &x[i + 1..], style)?;
                    total += log(p_pad);
                }
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Randomized comparison harness.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub instances: usize,
    pub agreements: usize,
    /// Largest |decoder score - oracle score| over agreeing instances.
    pub max_score_gap: f64,
    /// Largest |decoder score - independent rescoring|.
    pub max_rescore_gap: f64,
}

impl OracleReport {
    pub fn all_agree(&self) -> bool {
        self.agreements == self.instances
    }
}

/// Compare the decoder against the oracle on `n` random stub instances
/// with varied vocabulary, source length, style, and flags.
pub fn compare_on_random_instances(n: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        instances: n,
        agreements: 0,
        max_score_gap: 0.0,
        max_rescore_gap: 0.0,
    };
    for inst in 0..n {
        let v = rng.gen_range(6..=12);
        let n_styles = rng.gen_range(1..=3);
        let stub = StubModel::random(v, n_styles, seed.wrapping_mul(1_000_003).wrapping_add(inst as u64));
        let len = rng.gen_range(1..=4);
        let x: Vec<TokenId> = (0..len).map(|_| rng.gen_range(Vocab::RESERVED..v)).collect();
        let style = rng.gen_range(0..n_styles);
        let allow_insert = rng.gen_bool(0.7);
        let flags = DecodeFlags {
            top_k: rng.gen_range(1..=4),
            allow_delete: rng.gen_bool(0.7),
            allow_insert,
            max_insert: if allow_insert { rng.gen_range(2..=4) } else { 1 },
        };
        let dec = crate::decoder::transfer(&stub, &x, style, &flags)?;
        let (oy, oalign, oscore) = oracle_transfer(&stub, &x, style, &flags)?;
        if dec.y == oy && dec.alignment == oalign {
            report.agreements += 1;
            report.max_score_gap = report.max_score_gap.max((dec.log_score - oscore).abs());
        }
        let rescored = independent_score(&stub, &x, &dec.y, &dec.alignment, style, &flags)?;
        report.max_rescore_gap = report
            .max_rescore_gap
            .max((rescored - dec.log_score).abs());
    }
    Ok(report)
}

/// Like [`compare_on_random_instances`], but with the full candidate
/// pool (`top_k = V + 1`, so ranking can never hide a candidate) and the
/// decoder checked against [`exhaustive_step_argmax`] at *every* step,
/// not just on the final output. Each decoded sentence is additionally
/// rescored with [`independent_score`].
pub fn compare_stepwise_full_pool(n: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        instances: n,
        agreements: 0,
        max_score_gap: 0.0,
        max_rescore_gap: 0.0,
    };
    for inst in 0..n {
        let v = rng.gen_range(6..=12);
        let n_styles = rng.gen_range(1..=3);
        let stub = StubModel::random(v, n_styles, seed.wrapping_mul(777_767_777).wrapping_add(inst as u64));
        let len = rng.gen_range(1..=4);
        let x: Vec<TokenId> = (0..len).map(|_| rng.gen_range(Vocab::RESERVED..v)).collect();
        let style = rng.gen_range(0..n_styles);
        let allow_insert = rng.gen_bool(0.7);
        let flags = DecodeFlags {
            top_k: v + 1,
            allow_delete: rng.gen_bool(0.7),
            allow_insert,
            max_insert: if allow_insert { rng.gen_range(2..=4) } else { 1 },
        };
        let mut y: Vec<TokenId> = Vec::new();
        let mut alignment = vec![0usize];
        let mut total = 0.0;
        let mut agree = true;
        for i in 0..x.len() {
            let dstep = crate::decoder::decode_step(&stub, &x, i, &y, style, &flags)?;
            let ostep = exhaustive_step_argmax(&stub, &x, i, &y, style, &flags)?;
            if dstep.span != ostep.span {
                agree = false;
                break;
            }
            report.max_score_gap = report
                .max_score_gap
                .max((dstep.log_score() - ostep.log_score).abs());
            y.extend_from_slice(&dstep.span);
            alignment.push(y.len());
            total += dstep.log_score();
        }
        if agree {
            report.agreements += 1;
            let rescored = independent_score(&stub, &x, &y, &alignment, style, &flags)?;
            report.max_rescore_gap = report.max_rescore_gap.max((rescored - total).abs());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::transfer;

    #[test]
    fn stub_fallbacks_are_deterministic_and_normalized() {
        let a = StubModel::random(8, 2, 5);
        let b = StubModel::random(8, 2, 5);
        let d1 = a.prediction(&[4, 5], &[6], 1).unwrap();
        let d2 = b.prediction(&[4, 5], &[6], 1).unwrap();
        assert_eq!(d1, d2);
        assert!((d1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // context separators matter
        let e1 = a.prediction(&[4], &[5, 6], 1).unwrap();
        assert_ne!(d1, e1);
        // different seeds differ
        let c = StubModel::random(8, 2, 6);
        assert_ne!(c.prediction(&[4, 5], &[6], 1).unwrap(), d1);
    }

    #[test]
    fn oracle_guard_rejects_large_vocabularies() {
        let stub = StubModel::uniform(100, 1);
        assert!(matches!(
            oracle_transfer(&stub, &[4], 0, &DecodeFlags::default()),
            Err(RlmError::VocabTooLarge { vocab: 100, max: 64 })
        ));
    }

    /// Fully hand-enumerated two-content-token instance exercising the
    /// insertion path, the deletion path, and the top-K pool rule.
    #[test]
    fn hand_enumerated_tiny_instance() {
        let v = 6; // content ids 4 and 5
        let mut stub = StubModel::uniform(v, 1);
        let x = vec![4, 5];
        let flags = DecodeFlags {
            top_k: 1,
            allow_delete: true,
            allow_insert: true,
            max_insert: 2,
        };

        // position 0: the pool keeps only id 5 (highest prediction),
        // even though id 4 would win on the combined score — the top-K
        // rule filters on prediction probability alone.
        stub.set_prediction(&[], &[5], 0, vec![0.05, 0.0, 0.0, 0.0, 0.25, 0.7]);
        stub.set_reconstruction(&[5], &[], &[5], vec![0.0, 0.0, 0.0, 0.0, 0.3, 0.7]);
        stub.set_reconstruction(&[4], &[], &[5], vec![0.0, 0.0, 0.0, 0.0, 0.99, 0.01]);
        stub.set_reconstruction(&[Vocab::PAD], &[], &[5], vec![0.0, 0.0, 0.0, 0.0, 0.9, 0.1]);
        // id5: 0.7 * 0.3 = 0.21 beats [PAD]: 0.05 * 0.9 = 0.045
        stub.set_insertion(&[5], &[5], 0, [0.8, 0.2]); // continue
        stub.set_prediction(&[5], &[5], 0, vec![0.1, 0.0, 0.0, 0.0, 0.6, 0.3]);
        stub.set_reconstruction(&[5, 4], &[], &[5], vec![0.0, 0.0, 0.0, 0.0, 0.45, 0.55]);
        // span reaches max_insert = 2: forced stop, no factor

        // position 1: deletion wins
        stub.set_prediction(&[5, 4], &[], 0, vec![0.7, 0.0, 0.0, 0.0, 0.2, 0.1]);
        stub.set_reconstruction(&[4], &[4], &[], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        stub.set_reconstruction(&[Vocab::PAD], &[4], &[], vec![0.0, 0.0, 0.0, 0.0, 0.2, 0.8]);
        // [PAD]: 0.7 * 0.8 = 0.56 beats id4: 0.2 * 0.5 = 0.1

        let expect_score = (0.7f64 * 0.3).ln() // first token of the span
            + 0.8f64.ln()                       // continue decision
            + (0.6f64 * 0.45).ln()              // inserted second token
            + (0.7f64 * 0.8).ln(); // deletion of x_1

        let dec = transfer(&stub, &x, 0, &flags).unwrap();
        assert_eq!(dec.y, vec![5, 4]);
        assert_eq!(dec.alignment, vec![0, 2, 2]);
        assert!((dec.log_score - expect_score).abs() < 1e-12);

        let (oy, oalign, oscore) = oracle_transfer(&stub, &x, 0, &flags).unwrap();
        assert_eq!(oy, dec.y);
        assert_eq!(oalign, dec.alignment);
        assert!((oscore - expect_score).abs() < 1e-12);

        let ind = independent_score(&stub, &x, &dec.y, &dec.alignment, 0, &flags).unwrap();
        assert!((ind - expect_score).abs() < 1e-12);

        // widening the pool to K = 2 flips position 0 to id 4
        let wide = DecodeFlags { top_k: 2, ..flags };
        // additional contexts the wider decode touches
        stub.set_insertion(&[4], &[5], 0, [0.1, 0.9]); // stop at one token
        stub.set_prediction(&[4], &[], 0, vec![0.1, 0.0, 0.0, 0.0, 0.3, 0.6]);
        stub.set_reconstruction(&[5], &[4], &[], vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.9]);
        stub.set_reconstruction(&[Vocab::PAD], &[4], &[], vec![0.0, 0.0, 0.0, 0.0, 0.2, 0.8]);
        let dec2 = transfer(&stub, &x, 0, &wide).unwrap();
        assert_eq!(dec2.steps[0].span, vec![4]);
        let (oy2, _, _) = oracle_transfer(&stub, &x, 0, &wide).unwrap();
        assert_eq!(oy2, dec2.y);
    }

    #[test]
    fn decoder_matches_oracle_on_random_instances() {
        let report = compare_on_random_instances(40, 11).unwrap();
        assert!(report.all_agree(), "{report:?}");
        assert!(report.max_score_gap < 1e-9, "{report:?}");
        assert!(report.max_rescore_gap < 1e-9, "{report:?}");
    }

    #[test]
    fn stepwise_full_pool_agrees() {
        let report = compare_stepwise_full_pool(40, 17).unwrap();
        assert!(report.all_agree(), "{report:?}");
        assert!(report.max_score_gap < 1e-9, "{report:?}");
        assert!(report.max_rescore_gap < 1e-9, "{report:?}");
    }
}
