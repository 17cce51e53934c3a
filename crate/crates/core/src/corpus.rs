//! Synthetic style corpus with construction-known parallel references,
//! attribute-marker salience, and the masked / gap sample pipeline.
//!
//! Sentences come from a small template grammar ("the NOUN was
//! [INTENSIFIER] ADJ ."); styles differ only in their adjective lexicons,
//! so a rewrite is valid exactly when every source-style adjective is
//! replaced by a target-style one and the scaffold is preserved. The eval
//! split enumerates those substitutions as multi-references, including
//! intensifier-toggled variants that make genuinely unequal-length pairs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlmError};
use crate::vocab::{StyleId, TokenId, Vocab};

/// Pronoun / function-word skip list, frozen in the repo so the masking
/// pipeline is hermetic.
pub const STOPWORDS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "my", "your",
    "his", "its", "our", "their", "the", "a", "an", "was", "is", "are", "be", "been", "and", "but",
    "or", "to", "of", "in", "at", ".", "!", "?", ",", "this", "spot", "think", "honestly", "looks",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    /// Attribute markers; must be disjoint across styles.
    pub adjectives: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub styles: Vec<StyleSpec>,
    pub nouns: Vec<String>,
    pub intensifiers: Vec<String>,
    /// Probability that a single-adjective sentence carries an intensifier,
    /// per style (style-skewed usage creates realistic length variation).
    pub p_intensifier: Vec<f64>,
    /// Probability of the two-adjective template (its second marker leaks
    /// style into the context of the first, which is what the
    /// disentanglement loss has to scrub).
    pub p_two_adj: f64,
    pub train_sentences: usize,
    pub eval_pairs: usize,
    /// Cap on references enumerated per eval pair and target style.
    pub max_refs: usize,
}

impl CorpusConfig {
    pub fn toy() -> Self {
        CorpusConfig {
            styles: vec![
                StyleSpec {
                    name: "pos".into(),
                    adjectives: vec![
                        "great".into(),
                        "amazing".into(),
                        "tasty".into(),
                        "friendly".into(),
                        "lovely".into(),
                        "superb".into(),
                        "fresh".into(),
                        "charming".into(),
                    ],
                },
                StyleSpec {
                    name: "neg".into(),
                    adjectives: vec![
                        "bad".into(),
                        "awful".into(),
                        "bland".into(),
                        "rude".into(),
                        "gross".into(),
                        "terrible".into(),
                        "stale".into(),
                        "dreary".into(),
                    ],
                },
            ],
            nouns: vec![
                "food", "service", "staff", "place", "coffee", "pizza", "room", "movie", "music",
                "burger", "salad", "soup", "cake", "tea", "bread", "decor", "view", "price",
                "garden", "pasta", "wine", "steak", "hotel", "show",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            intensifiers: vec!["really".into(), "so".into(), "very".into()],
            p_intensifier: vec![0.6, 0.25],
            p_two_adj: 0.25,
            train_sentences: 2200,
            eval_pairs: 160,
            max_refs: 20,
        }
    }
}

/// Marker lexicon of one style, as shipped next to the corpus files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleLexicon {
    pub style: String,
    pub markers: Vec<String>,
    pub intensifiers: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: Vec<String>,
    pub style: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refs: Option<BTreeMap<String, Vec<Vec<String>>>>,
}

#[derive(Debug, Clone)]
pub struct TrainSentence {
    pub ids: Vec<TokenId>,
    pub style: StyleId,
}

/// A source sentence with per-target-style gold rewrites.
#[derive(Debug, Clone)]
pub struct ParallelPair {
    pub ids: Vec<TokenId>,
    pub style: StyleId,
    /// target style -> gold rewrites (token ids); lengths may differ.
    pub refs: BTreeMap<StyleId, Vec<Vec<TokenId>>>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub style_names: Vec<String>,
    pub lexicons: Vec<StyleLexicon>,
    pub train: Vec<TrainSentence>,
    pub eval: Vec<ParallelPair>,
    /// Fraction of eval references that also occur verbatim as train
    /// sentences. Overlap is natural for a small grammar; flagged above 5%.
    pub ref_train_overlap: f64,
}

impl Corpus {
    pub fn overlap_flagged(&self) -> bool {
        self.ref_train_overlap > 0.05
    }
}

struct Template {
    two_adj: bool,
    opener: &'static [&'static str],
    /// insert "at this spot" after the noun
    place: bool,
    verb: &'static str,
}

// Every template keeps a scaffold run of four or more tokens untouched by
// a style rewrite, so n-gram overlap with the source survives transfer.
const TEMPLATES: &[Template] = &[
    Template { two_adj: false, opener: &[], place: true, verb: "was" },
    Template { two_adj: false, opener: &[], place: true, verb: "looks" },
    Template { two_adj: false, opener: &["i", "think"], place: false, verb: "was" },
    Template { two_adj: false, opener: &["i", "think"], place: false, verb: "is" },
    Template { two_adj: false, opener: &["honestly", ","], place: false, verb: "was" },
    Template { two_adj: false, opener: &["honestly", ","], place: false, verb: "looks" },
    Template { two_adj: true, opener: &[], place: true, verb: "was" },
];

/// Generate the train and eval splits. Everything is a pure function of
/// `(cfg, seed)`; two calls with the same arguments produce identical
/// corpora.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    validate_config(cfg)?;
    let mut vocab = Vocab::new();
    // deterministic vocab order: scaffold, nouns, intensifiers, adjectives
    for t in [
        "the", "was", "is", "looks", "and", ".", "at", "this", "spot", "i", "think", "honestly",
        ",",
    ] {
        vocab.intern(t);
    }
    for n in &cfg.nouns {
        vocab.intern(n);
    }
    for i in &cfg.intensifiers {
        vocab.intern(i);
    }
    for s in &cfg.styles {
        for a in &s.adjectives {
            vocab.intern(a);
        }
    }
    if vocab.len() > 512 {
        return Err(RlmError::InvalidData(format!(
            "vocabulary of {} exceeds the 512-token budget",
            vocab.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style_names: Vec<String> = cfg.styles.iter().map(|s| s.name.clone()).collect();

    let mut train = Vec::with_capacity(cfg.train_sentences);
    for _ in 0..cfg.train_sentences {
        let style = rng.gen_range(0..cfg.styles.len());
        let (tokens, _) = sample_sentence(cfg, style, &mut rng);
        train.push(TrainSentence {
            ids: vocab.encode(&tokens)?,
            style,
        });
    }

    let mut eval = Vec::with_capacity(cfg.eval_pairs);
    for _ in 0..cfg.eval_pairs {
        let style = rng.gen_range(0..cfg.styles.len());
        let (tokens, slots) = sample_sentence(cfg, style, &mut rng);
        let mut refs = BTreeMap::new();
        for (tid, _) in cfg.styles.iter().enumerate() {
            if tid == style {
                continue;
            }
            let rewrites = enumerate_rewrites(cfg, &tokens, &slots, style, tid);
            let rewrites: Vec<Vec<TokenId>> = rewrites
                .into_iter()
                .take(cfg.max_refs)
                .map(|t| vocab.encode(&t))
                .collect::<Result<_>>()?;
            refs.insert(tid, rewrites);
        }
        eval.push(ParallelPair {
            ids: vocab.encode(&tokens)?,
            style,
            refs,
        });
    }

    let train_set: HashSet<&[TokenId]> = train.iter().map(|t| t.ids.as_slice()).collect();
    let mut ref_total = 0usize;
    let mut ref_overlap = 0usize;
    for pair in &eval {
        for rewrites in pair.refs.values() {
            for r in rewrites {
                ref_total += 1;
                if train_set.contains(r.as_slice()) {
                    ref_overlap += 1;
                }
            }
        }
    }
    let lexicons = cfg
        .styles
        .iter()
        .map(|s| StyleLexicon {
            style: s.name.clone(),
            markers: s.adjectives.clone(),
            intensifiers: cfg.intensifiers.clone(),
        })
        .collect();

    Ok(Corpus {
        vocab,
        style_names,
        lexicons,
        train,
        eval,
        ref_train_overlap: if ref_total == 0 {
            0.0
        } else {
            ref_overlap as f64 / ref_total as f64
        },
    })
}

fn validate_config(cfg: &CorpusConfig) -> Result<()> {
    if cfg.styles.len() < 2 {
        return Err(RlmError::InvalidData("need at least two styles".into()));
    }
    if cfg.nouns.is_empty() || cfg.intensifiers.is_empty() {
        return Err(RlmError::InvalidData("empty lexicon".into()));
    }
    if cfg.p_intensifier.len() != cfg.styles.len() {
        return Err(RlmError::InvalidData(
            "p_intensifier must have one entry per style".into(),
        ));
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for s in &cfg.styles {
        if s.adjectives.is_empty() {
            return Err(RlmError::InvalidData(format!("empty lexicon for {}", s.name)));
        }
        for a in &s.adjectives {
            if !seen.insert(a.as_str()) {
                return Err(RlmError::InvalidData(format!(
                    "marker '{a}' appears in more than one style"
                )));
            }
        }
    }
    Ok(())
}

/// Token positions that carry style (adjective slots) or length
/// variation (intensifier slot), recorded at generation time.
#[derive(Debug, Clone)]
struct Slots {
    adjectives: Vec<usize>,
    intensifier: Option<usize>,
    /// index before which a dropped intensifier would be re-inserted
    intensifier_anchor: usize,
}

fn sample_sentence(cfg: &CorpusConfig, style: StyleId, rng: &mut ChaCha8Rng) -> (Vec<String>, Slots) {
    let template = if rng.gen_range(0.0..1.0) < cfg.p_two_adj {
        TEMPLATES.last().unwrap()
    } else {
        &TEMPLATES[rng.gen_range(0..TEMPLATES.len() - 1)]
    };
    let noun = cfg.nouns.choose(rng).unwrap().clone();
    let adjs = &cfg.styles[style].adjectives;
    let mut tokens: Vec<String> = template.opener.iter().map(|t| t.to_string()).collect();
    tokens.push("the".to_string());
    tokens.push(noun);
    if template.place {
        for t in ["at", "this", "spot"] {
            tokens.push(t.to_string());
        }
    }
    tokens.push(template.verb.to_string());
    let mut slots = Slots {
        adjectives: Vec::new(),
        intensifier: None,
        intensifier_anchor: tokens.len(),
    };
    if template.two_adj {
        slots.adjectives.push(tokens.len());
        tokens.push(adjs[rng.gen_range(0..adjs.len())].clone());
        tokens.push("and".to_string());
        slots.adjectives.push(tokens.len());
        tokens.push(adjs[rng.gen_range(0..adjs.len())].clone());
    } else {
        slots.intensifier_anchor = tokens.len();
        if rng.gen_range(0.0..1.0) < cfg.p_intensifier[style] {
            slots.intensifier = Some(tokens.len());
            tokens.push(cfg.intensifiers.choose(rng).unwrap().clone());
        }
        slots.adjectives.push(tokens.len());
        tokens.push(adjs[rng.gen_range(0..adjs.len())].clone());
    }
    tokens.push(".".to_string());
    (tokens, slots)
}

/// Enumerate gold rewrites of `tokens` into `target` style.
///
/// The index-mapped swap comes first, then per-slot alternatives, then
/// the intensifier-toggled variant of the mapped swap (the genuine
/// unequal-length reference).
fn enumerate_rewrites(
    cfg: &CorpusConfig,
    tokens: &[String],
    slots: &Slots,
    source: StyleId,
    target: StyleId,
) -> Vec<Vec<String>> {
    let src_adjs = &cfg.styles[source].adjectives;
    let tgt_adjs = &cfg.styles[target].adjectives;
    let map_adj = |w: &str| -> String {
        let idx = src_adjs.iter().position(|a| a == w).expect("marker slot");
        tgt_adjs[idx % tgt_adjs.len()].clone()
    };

    let mut mapped = tokens.to_vec();
    for &pos in &slots.adjectives {
        mapped[pos] = map_adj(&tokens[pos]);
    }
    let mut out = vec![mapped.clone()];

    // per-slot alternatives: any target-style adjective is a valid rewrite
    for &pos in &slots.adjectives {
        for alt in tgt_adjs {
            if *alt != mapped[pos] {
                let mut variant = mapped.clone();
                variant[pos] = alt.clone();
                out.push(variant);
            }
        }
    }

    // intensifier toggle on the mapped rewrite: unequal-length reference
    if let Some(pos) = slots.intensifier {
        let mut dropped = mapped.clone();
        dropped.remove(pos);
        out.push(dropped);
    } else if slots.adjectives.len() == 1 {
        let mut inserted = mapped.clone();
        inserted.insert(slots.intensifier_anchor, cfg.intensifiers[0].clone());
        out.push(inserted);
    }
    out
}

// ---------------------------------------------------------------------------
// Salience and masking policy.
// ---------------------------------------------------------------------------

/// Per-style token occurrence counts over the train split.
pub fn style_counts(train: &[TrainSentence], n_styles: usize) -> Vec<HashMap<TokenId, usize>> {
    let mut counts = vec![HashMap::new(); n_styles];
    for s in train {
        for &t in &s.ids {
            *counts[s.style].entry(t).or_insert(0) += 1;
        }
    }
    counts
}

/// Max over ordered style pairs of `(count(w|a)+eps) / (count(w|b)+eps)`.
/// A token unseen in every style is neutral (1.0).
pub fn salience(token: TokenId, counts: &[HashMap<TokenId, usize>], eps: f64) -> f64 {
    let per_style: Vec<f64> = counts
        .iter()
        .map(|c| c.get(&token).copied().unwrap_or(0) as f64)
        .collect();
    if per_style.iter().all(|&c| c == 0.0) {
        return 1.0;
    }
    let mut best: f64 = 0.0;
    for (i, &a) in per_style.iter().enumerate() {
        for (j, &b) in per_style.iter().enumerate() {
            if i != j {
                best = best.max((a + eps) / (b + eps));
            }
        }
    }
    best
}

/// Masking policy. Numbers are never masked. Stopwords are skipped by
/// the main branch, but with probability `uniform_fraction` a sample
/// instead masks *any* non-number position: the decoder revisits every
/// source position, so the heads need supervision at scaffold tokens
/// too, not only at the informative ones. Within the main branch,
/// salient positions (salience >= lambda) are preferred with probability
/// `salient_fraction`.
#[derive(Debug, Clone)]
pub struct MaskPolicy {
    pub stop_ids: HashSet<TokenId>,
    pub number_ids: HashSet<TokenId>,
    pub lambda: f64,
    pub salient_fraction: f64,
    pub uniform_fraction: f64,
    pub epsilon: f64,
}

impl MaskPolicy {
    pub fn new(vocab: &Vocab) -> Self {
        let stop_ids: HashSet<TokenId> = STOPWORDS
            .iter()
            .filter_map(|w| vocab.id(w))
            .collect();
        // numbers: tokens consisting solely of digits
        let number_ids: HashSet<TokenId> = vocab
            .content_ids()
            .filter(|&id| {
                !vocab.token(id).is_empty()
                    && vocab.token(id).chars().all(|c| c.is_ascii_digit())
            })
            .collect();
        MaskPolicy {
            stop_ids,
            number_ids,
            lambda: 2.0,
            salient_fraction: 0.5,
            uniform_fraction: 0.35,
            epsilon: 1.0,
        }
    }

    pub fn is_number(&self, token: TokenId) -> bool {
        self.number_ids.contains(&token)
    }

    pub fn is_skipped(&self, token: TokenId) -> bool {
        self.stop_ids.contains(&token) || self.number_ids.contains(&token)
    }
}

/// One training sample: the sentence with exactly one `[MASK]`.
///
/// The prediction-form input `(X_0:i, [MASK], X_i+1:n)` and the
/// reconstruction-form input `(x_i, X_0:i, [MASK], X_i+1:n)` are both
/// views of this sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub masked: Vec<TokenId>,
    pub target: TokenId,
    pub style: StyleId,
    pub pos: usize,
}

impl MaskedSample {
    pub fn prefix(&self) -> &[TokenId] {
        &self.masked[..self.pos]
    }
    pub fn suffix(&self) -> &[TokenId] {
        &self.masked[self.pos + 1..]
    }
    /// Reconstruction-form assembly: target token first, then the masked
    /// sentence.
    pub fn reconstruction_input(&self) -> (Vec<TokenId>, &[TokenId], &[TokenId]) {
        (vec![self.target], self.prefix(), self.suffix())
    }
}

/// Choose a maskable position under the policy. Returns `None` when no
/// position qualifies (the caller counts skipped sentences).
pub fn make_masked_sample(
    sentence: &TrainSentence,
    rng: &mut ChaCha8Rng,
    policy: &MaskPolicy,
    counts: &[HashMap<TokenId, usize>],
) -> Option<MaskedSample> {
    let candidates: Vec<usize> = (0..sentence.ids.len())
        .filter(|&i| !policy.is_skipped(sentence.ids[i]))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let pool = if rng.gen_range(0.0..1.0) < policy.uniform_fraction {
        // exploration: any non-number position, stopwords included
        (0..sentence.ids.len())
            .filter(|&i| !policy.is_number(sentence.ids[i]))
            .collect()
    } else {
        let salient: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| salience(sentence.ids[i], counts, policy.epsilon) >= policy.lambda)
            .collect();
        if !salient.is_empty() && rng.gen_range(0.0..1.0) < policy.salient_fraction {
            salient
        } else {
            candidates
        }
    };
    let pos = pool[rng.gen_range(0..pool.len())];
    let mut masked = sentence.ids.clone();
    let target = masked[pos];
    masked[pos] = Vocab::MASK;
    Some(MaskedSample {
        masked,
        target,
        style: sentence.style,
        pos,
    })
}

/// Insertion-head supervision label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertLabel {
    /// k >= 2: another token must be inserted.
    Mask,
    /// k <= 1: stop.
    Pad,
}

/// Gap sample `(X_0:i, [MASK], X_i+k:n)` with `k` removed tokens.
/// `k = 0` is the spurious-mask case used to teach the prediction head
/// its `[PAD]` (deletion) class.
#[derive(Debug, Clone)]
pub struct GapSample {
    pub prefix: Vec<TokenId>,
    pub suffix: Vec<TokenId>,
    pub k: usize,
    pub label: InsertLabel,
    pub style: StyleId,
}

pub fn label_for_gap(k: usize) -> InsertLabel {
    if k >= 2 {
        InsertLabel::Mask
    } else {
        InsertLabel::Pad
    }
}

/// Remove `k in [1, max_gap]` consecutive tokens.
pub fn make_gap_sample(
    sentence: &TrainSentence,
    rng: &mut ChaCha8Rng,
    max_gap: usize,
) -> Option<GapSample> {
    let n = sentence.ids.len();
    if n <= max_gap {
        return None;
    }
    let k = rng.gen_range(1..=max_gap);
    let start = rng.gen_range(0..=n - k);
    Some(GapSample {
        prefix: sentence.ids[..start].to_vec(),
        suffix: sentence.ids[start + k..].to_vec(),
        k,
        label: label_for_gap(k),
        style: sentence.style,
    })
}

/// Insert a spurious `[MASK]` between tokens without removing anything
/// (`k = 0`); the prediction head's target there is `[PAD]`.
pub fn make_spurious_gap(sentence: &TrainSentence, rng: &mut ChaCha8Rng) -> GapSample {
    let n = sentence.ids.len();
    let start = rng.gen_range(0..=n);
    GapSample {
        prefix: sentence.ids[..start].to_vec(),
        suffix: sentence.ids[start..].to_vec(),
        k: 0,
        label: label_for_gap(0),
        style: sentence.style,
    }
}

/// Sort by length, slice into consecutive batches, shuffle batch order.
/// Returns the batches and the maximum intra-batch length spread.
pub fn batch_by_length<T, F>(
    mut items: Vec<T>,
    len_of: F,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<T>>, usize)
where
    F: Fn(&T) -> usize,
{
    assert!(batch_size >= 1);
    items.sort_by_key(|i| len_of(i));
    let mut batches: Vec<Vec<T>> = Vec::new();
    let mut current: Vec<T> = Vec::with_capacity(batch_size);
    for item in items {
        current.push(item);
        if current.len() == batch_size {
            batches.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    let max_spread = batches
        .iter()
        .map(|b| {
            let lens: Vec<usize> = b.iter().map(&len_of).collect();
            lens.iter().max().unwrap() - lens.iter().min().unwrap()
        })
        .max()
        .unwrap_or(0);
    batches.shuffle(rng);
    (batches, max_spread)
}

// ---------------------------------------------------------------------------
// File formats: JSONL records, lexicon and vocab sidecars.
// ---------------------------------------------------------------------------

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut train_out = Vec::new();
    for s in &corpus.train {
        let rec = CorpusRecord {
            tokens: corpus.vocab.decode(&s.ids),
            style: corpus.style_names[s.style].clone(),
            refs: None,
        };
        serde_json::to_writer(&mut train_out, &rec)
            .map_err(|e| RlmError::Io(e.to_string()))?;
        train_out.push(b'\n');
    }
    fs::write(dir.join("train.jsonl"), train_out)?;

    let mut eval_out = Vec::new();
    for p in &corpus.eval {
        let refs: BTreeMap<String, Vec<Vec<String>>> = p
            .refs
            .iter()
            .map(|(&sid, rs)| {
                (
                    corpus.style_names[sid].clone(),
                    rs.iter().map(|r| corpus.vocab.decode(r)).collect(),
                )
            })
            .collect();
        let rec = CorpusRecord {
            tokens: corpus.vocab.decode(&p.ids),
            style: corpus.style_names[p.style].clone(),
            refs: Some(refs),
        };
        serde_json::to_writer(&mut eval_out, &rec)
            .map_err(|e| RlmError::Io(e.to_string()))?;
        eval_out.push(b'\n');
    }
    fs::write(dir.join("eval.jsonl"), eval_out)?;

    let mut lex = fs::File::create(dir.join("lexicon.json"))?;
    serde_json::to_writer_pretty(&mut lex, &corpus.lexicons)
        .map_err(|e| RlmError::Io(e.to_string()))?;
    lex.write_all(b"\n")?;

    let mut voc = fs::File::create(dir.join("vocab.json"))?;
    serde_json::to_writer(&mut voc, corpus.vocab.tokens())
        .map_err(|e| RlmError::Io(e.to_string()))?;
    voc.write_all(b"\n")?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(dir.join("vocab.json"))?)
        .map_err(|e| RlmError::InvalidData(format!("vocab.json: {e}")))?;
    let vocab = Vocab::from_tokens(tokens)?;
    let lexicons: Vec<StyleLexicon> =
        serde_json::from_str(&fs::read_to_string(dir.join("lexicon.json"))?)
            .map_err(|e| RlmError::InvalidData(format!("lexicon.json: {e}")))?;
    let style_names: Vec<String> = lexicons.iter().map(|l| l.style.clone()).collect();
    let style_id = |name: &str| -> Result<StyleId> {
        style_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| RlmError::InvalidData(format!("unknown style '{name}'")))
    };

    let mut train = Vec::new();
    for line in fs::read_to_string(dir.join("train.jsonl"))?.lines() {
        let rec: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| RlmError::InvalidData(format!("train.jsonl: {e}")))?;
        train.push(TrainSentence {
            ids: vocab.encode(&rec.tokens)?,
            style: style_id(&rec.style)?,
        });
    }

    let mut eval = Vec::new();
    for line in fs::read_to_string(dir.join("eval.jsonl"))?.lines() {
        let rec: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| RlmError::InvalidData(format!("eval.jsonl: {e}")))?;
        let mut refs = BTreeMap::new();
        for (name, rewrites) in rec.refs.unwrap_or_default() {
            let encoded: Vec<Vec<TokenId>> = rewrites
                .iter()
                .map(|r| vocab.encode(r))
                .collect::<Result<_>>()?;
            refs.insert(style_id(&name)?, encoded);
        }
        eval.push(ParallelPair {
            ids: vocab.encode(&rec.tokens)?,
            style: style_id(&rec.style)?,
            refs,
        });
    }

    let train_set: HashSet<&[TokenId]> = train.iter().map(|t| t.ids.as_slice()).collect();
    let (mut total, mut overlap) = (0usize, 0usize);
    for p in &eval {
        for rs in p.refs.values() {
            for r in rs {
                total += 1;
                if train_set.contains(r.as_slice()) {
                    overlap += 1;
                }
            }
        }
    }

    Ok(Corpus {
        vocab,
        style_names,
        lexicons,
        train,
        eval,
        ref_train_overlap: if total == 0 {
            0.0
        } else {
            overlap as f64 / total as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Corpus {
        generate_corpus(&CorpusConfig::toy(), 42).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = toy();
        let b = toy();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.ids, y.ids);
            assert_eq!(x.style, y.style);
        }
        for (x, y) in a.eval.iter().zip(&b.eval) {
            assert_eq!(x.ids, y.ids);
            assert_eq!(x.refs, y.refs);
        }
    }

    #[test]
    fn unequal_length_gold_pair_exists() {
        let c = toy();
        let found = c.eval.iter().any(|p| {
            p.refs
                .values()
                .any(|rs| rs.iter().any(|r| r.len() != p.ids.len()))
        });
        assert!(found, "no unequal-length reference generated");
    }

    #[test]
    fn marker_disjointness_holds() {
        let c = toy();
        let sets: Vec<HashSet<&String>> = c
            .lexicons
            .iter()
            .map(|l| l.markers.iter().collect())
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
    }

    #[test]
    fn rewrites_touch_only_marker_or_intensifier_positions() {
        let c = toy();
        let marker_ids: HashSet<TokenId> = c
            .lexicons
            .iter()
            .flat_map(|l| l.markers.iter())
            .filter_map(|m| c.vocab.id(m))
            .collect();
        let int_ids: HashSet<TokenId> = c.lexicons[0]
            .intensifiers
            .iter()
            .filter_map(|m| c.vocab.id(m))
            .collect();
        for p in &c.eval {
            for rs in p.refs.values() {
                for r in rs {
                    if r.len() == p.ids.len() {
                        for (a, b) in p.ids.iter().zip(r) {
                            if a != b {
                                assert!(marker_ids.contains(a) || int_ids.contains(a));
                                assert!(marker_ids.contains(b) || int_ids.contains(b));
                            }
                        }
                    } else {
                        // length differs by exactly one intensifier
                        assert_eq!(r.len().abs_diff(p.ids.len()), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn salience_formula() {
        let mut counts = vec![HashMap::new(), HashMap::new()];
        counts[0].insert(7, 9);
        counts[1].insert(7, 1);
        assert_eq!(salience(7, &counts, 1.0), 5.0);
        counts[0].insert(8, 4);
        counts[1].insert(8, 4);
        assert_eq!(salience(8, &counts, 1.0), 1.0);
        counts[0].insert(9, 10);
        assert_eq!(salience(9, &counts, 1.0), 11.0);
        assert_eq!(salience(999, &counts, 1.0), 1.0);
    }

    #[test]
    fn masked_samples_respect_skip_policy() {
        let c = toy();
        let mut policy = MaskPolicy::new(&c.vocab);
        policy.uniform_fraction = 0.0; // main branch only
        let counts = style_counts(&c.train, c.style_names.len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in c.train.iter().take(200) {
            let sample = make_masked_sample(s, &mut rng, &policy, &counts).unwrap();
            assert_eq!(
                sample.masked.iter().filter(|&&t| t == Vocab::MASK).count(),
                1
            );
            assert!(!policy.is_skipped(sample.target));
            let (span, _, _) = sample.reconstruction_input();
            assert_eq!(span, vec![sample.target]);
        }
    }

    #[test]
    fn exploration_branch_reaches_scaffold_tokens() {
        let c = toy();
        let policy = MaskPolicy::new(&c.vocab);
        let counts = style_counts(&c.train, c.style_names.len());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stopword_targets = 0;
        for s in c.train.iter().take(300) {
            let sample = make_masked_sample(s, &mut rng, &policy, &counts).unwrap();
            assert!(!policy.is_number(sample.target));
            if policy.is_skipped(sample.target) {
                stopword_targets += 1;
            }
        }
        assert!(stopword_targets > 20, "only {stopword_targets}");
    }

    #[test]
    fn maskable_positions_match_example() {
        // "it was great ." -> only "great" is maskable
        let mut vocab = Vocab::new();
        let it = vocab.intern("it");
        let was = vocab.intern("was");
        let great = vocab.intern("great");
        let dot = vocab.intern(".");
        let policy = MaskPolicy::new(&vocab);
        assert!(policy.is_skipped(it));
        assert!(policy.is_skipped(was));
        assert!(policy.is_skipped(dot));
        assert!(!policy.is_skipped(great));
    }

    #[test]
    fn all_stopword_sentence_is_skipped() {
        let mut vocab = Vocab::new();
        let it = vocab.intern("it");
        let was = vocab.intern("was");
        let s = TrainSentence {
            ids: vec![it, was],
            style: 0,
        };
        let policy = MaskPolicy::new(&vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_masked_sample(&s, &mut rng, &policy, &[HashMap::new(), HashMap::new()]).is_none());
    }

    #[test]
    fn gap_labels_follow_the_width_rule() {
        let c = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in c.train.iter().take(300) {
            if let Some(gap) = make_gap_sample(s, &mut rng, 3) {
                assert_eq!(gap.label == InsertLabel::Mask, gap.k >= 2);
                assert_eq!(gap.prefix.len() + gap.suffix.len() + gap.k, s.ids.len());
            }
            let spurious = make_spurious_gap(s, &mut rng);
            assert_eq!(spurious.label, InsertLabel::Pad);
            assert_eq!(spurious.k, 0);
        }
        assert_eq!(label_for_gap(1), InsertLabel::Pad);
        assert_eq!(label_for_gap(2), InsertLabel::Mask);
        assert_eq!(label_for_gap(3), InsertLabel::Mask);
    }

    #[test]
    fn batching_sorts_by_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<usize> = (1..=32).rev().collect();
        let (batches, spread) = batch_by_length(items, |&l| l, 16, &mut rng);
        assert_eq!(batches.len(), 2);
        assert!(spread <= 15);
        // same-length items: zero spread
        let (_, spread) = batch_by_length(vec![4usize; 10], |&l| l, 4, &mut rng);
        assert_eq!(spread, 0);
        // determinism
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = batch_by_length((1..20).collect::<Vec<usize>>(), |&l| l, 4, &mut r1);
        let b = batch_by_length((1..20).collect::<Vec<usize>>(), |&l| l, 4, &mut r2);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn corpus_roundtrips_through_files() {
        let c = toy();
        let dir = std::env::temp_dir().join(format!("rlm-corpus-{}", std::process::id()));
        write_corpus(&c, &dir).unwrap();
        let back = read_corpus(&dir).unwrap();
        assert_eq!(back.train.len(), c.train.len());
        assert_eq!(back.eval.len(), c.eval.len());
        for (a, b) in c.train.iter().zip(&back.train) {
            assert_eq!(a.ids, b.ids);
        }
        for (a, b) in c.eval.iter().zip(&back.eval) {
            assert_eq!(a.refs, b.refs);
        }
        assert!((back.ref_train_overlap - c.ref_train_overlap).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_lexicon_is_rejected() {
        let mut cfg = CorpusConfig::toy();
        cfg.styles[0].adjectives.clear();
        assert!(generate_corpus(&cfg, 0).is_err());
    }
}
