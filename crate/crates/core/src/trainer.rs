//! Alternating optimization of the model and the auxiliary classifier Q,
//! plus the binary checkpoint format.
//!
//! Determinism contract: training is a pure function of `(corpus, model
//! init, q init, TrainConfig)`. Batches are drawn in *rounds* of
//! [`BATCHES_PER_ROUND`] steps; each round re-seeds its own RNG from the
//! run seed and the round index, so resuming from a checkpoint at any
//! step reproduces the exact byte-level trajectory of an uninterrupted
//! run.

use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    batch_by_length, make_gap_sample, make_masked_sample, make_spurious_gap, style_counts, Corpus,
    GapSample, MaskPolicy, MaskedSample,
};
use crate::error::{Result, RlmError};
use crate::model::{ModelConfig, ModelForward, ModelParams};
use crate::objectives::{
    content_rows, l3_hat, q_loss, total_loss, LossBreakdown, LossWeights, QClassifier,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamGrads, ParamSet};
use crate::vocab::{StyleId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub q_lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Main learning rate is annealed linearly from `lr` down to
    /// `lr * final_lr_scale` over the run; 1.0 disables the schedule.
    pub final_lr_scale: f64,
    pub max_gap: usize,
    /// Regular (k >= 1) gap samples mixed into every step.
    pub gaps_per_batch: usize,
    /// Spurious (k = 0) gap samples per step; these carry the deletion
    /// supervision for the prediction head.
    pub spurious_per_batch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 3e-4,
            q_lr: 1e-3,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            final_lr_scale: 1.0,
            max_gap: 3,
            gaps_per_batch: 6,
            spurious_per_batch: 3,
            seed: 0,
            precision: Precision::F32,
            log_every: 50,
        }
    }
}

// ---------------------------------------------------------------------------
// AdamW.
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Moments are kept in `f64` regardless
/// of the parameter dtype so the update math is identical across
/// precisions of the same trajectory.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(set: &ParamSet<T>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: set.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: set.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step<T: Scalar>(&mut self, set: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        assert_eq!(set.params.len(), grads.len(), "grads parallel to params");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in set.params.iter_mut().enumerate() {
            assert_eq!(p.data.len(), grads[pi].len(), "grad shape for {}", p.name);
            for (vi, w) in p.data.iter_mut().enumerate() {
                let g = grads[pi][vi].to_f64();
                if !g.is_finite() {
                    return Err(RlmError::NonFinite(format!("gradient of {}", p.name)));
                }
                let m = &mut self.m[pi][vi];
                let v = &mut self.v[pi][vi];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                let wd = self.lr * self.weight_decay * w.to_f64();
                *w = T::from_f64(w.to_f64() - self.lr * update - wd);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Steps.
// ---------------------------------------------------------------------------

/// One optimizer step on the model; Q enters as constants.
pub fn main_step<T: Scalar>(
    model: &mut ModelParams<T>,
    q: &QClassifier<T>,
    opt: &mut AdamW,
    samples: &[MaskedSample],
    gaps: &[GapSample],
    weights: &LossWeights,
) -> Result<(LossBreakdown, usize)> {
    let g = Graph::new();
    let fwd = ModelForward::new(&g, model, true);
    let w = q.set.get("q.w");
    let b = q.set.get("q.b");
    let qw = g.constant(w.rows, w.cols, w.data.clone());
    let qb = g.constant(b.rows, b.cols, b.data.clone());
    let (loss, breakdown) = total_loss(&fwd, qw, qb, samples, gaps, weights)?;
    g.backward(loss);
    let grads: ParamGrads<T> = fwd.leaves().iter().map(|&l| g.grad(l)).collect();
    opt.step(&mut model.set, &grads)?;
    Ok((breakdown, g.clamp_events()))
}

/// One optimizer step on Q; the encoder is frozen. Returns Q's loss and
/// the diagnostic `l3` on the same batch.
pub fn q_step<T: Scalar>(
    model: &ModelParams<T>,
    q: &mut QClassifier<T>,
    opt: &mut AdamW,
    samples: &[MaskedSample],
) -> Result<(f64, f64)> {
    let g = Graph::new();
    let fwd = ModelForward::new(&g, model, false);
    let w = q.set.get("q.w");
    let b = q.set.get("q.b");
    let qw = g.leaf(w.rows, w.cols, w.data.clone(), true);
    let qb = g.leaf(b.rows, b.cols, b.data.clone(), true);
    let rows = content_rows(&fwd, samples)?;
    let styles: Vec<StyleId> = samples.iter().map(|s| s.style).collect();
    let loss = q_loss(&g, qw, qb, &rows, &styles)?;
    g.backward(loss);
    let grads: ParamGrads<T> = vec![g.grad(qw), g.grad(qb)];
    opt.step(&mut q.set, &grads)?;
    let row_values: Vec<Vec<T>> = rows.iter().map(|&r| g.data(r)).collect();
    let l3 = l3_hat(q, &row_values, &styles)?;
    Ok((g.value(loss).to_f64(), l3))
}

// ---------------------------------------------------------------------------
// The training loop.
// ---------------------------------------------------------------------------

pub const BATCHES_PER_ROUND: usize = 8;

struct Batch {
    samples: Vec<MaskedSample>,
    gaps: Vec<GapSample>,
}

fn round_seed(seed: u64, round: u64) -> u64 {
    // splitmix-style decorrelation of consecutive rounds
    let mut z = seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_round(
    corpus: &Corpus,
    policy: &MaskPolicy,
    counts: &[std::collections::HashMap<usize, usize>],
    cfg: &TrainConfig,
    round: u64,
) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed(cfg.seed, round));
    let want = cfg.batch_size * BATCHES_PER_ROUND;
    let mut samples = Vec::with_capacity(want);
    while samples.len() < want {
        let s = corpus.train.choose(&mut rng).expect("non-empty train split");
        if let Some(m) = make_masked_sample(s, &mut rng, policy, counts) {
            samples.push(m);
        }
    }
    let (batches, _) = batch_by_length(samples, |m| m.masked.len(), cfg.batch_size, &mut rng);
    batches
        .into_iter()
        .map(|samples| {
            let mut gaps = Vec::with_capacity(cfg.gaps_per_batch + cfg.spurious_per_batch);
            while gaps.len() < cfg.gaps_per_batch {
                let s = corpus.train.choose(&mut rng).unwrap();
                if let Some(gap) = make_gap_sample(s, &mut rng, cfg.max_gap) {
                    gaps.push(gap);
                }
            }
            for _ in 0..cfg.spurious_per_batch {
                let s = corpus.train.choose(&mut rng).unwrap();
                gaps.push(make_spurious_gap(s, &mut rng));
            }
            Batch { samples, gaps }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub pred: f64,
    pub recon: f64,
    pub insert: f64,
    pub total: f64,
    pub q_loss: f64,
    pub l3: f64,
    pub clamp_events: usize,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub last: Option<MetricsRow>,
    pub history: Vec<MetricsRow>,
}

/// Run `cfg.steps - start_step` alternating steps (one Q step, then one
/// model step, per batch). `log` receives one JSON line per
/// `cfg.log_every` steps.
pub fn run_training<T: Scalar>(
    corpus: &Corpus,
    model: &mut ModelParams<T>,
    q: &mut QClassifier<T>,
    opt_main: &mut AdamW,
    opt_q: &mut AdamW,
    cfg: &TrainConfig,
    start_step: usize,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<TrainReport> {
    if corpus.train.is_empty() {
        return Err(RlmError::EmptySequence("train split".into()));
    }
    let policy = MaskPolicy::new(&corpus.vocab);
    let counts = style_counts(&corpus.train, corpus.style_names.len());
    let mut history = Vec::new();
    let mut last = None;
    let mut round = (start_step / BATCHES_PER_ROUND) as u64;
    let mut batches = build_round(corpus, &policy, &counts, cfg, round);
    for step in start_step..cfg.steps {
        if step / BATCHES_PER_ROUND != round as usize {
            round = (step / BATCHES_PER_ROUND) as u64;
            batches = build_round(corpus, &policy, &counts, cfg, round);
        }
        let batch = &batches[step % BATCHES_PER_ROUND];
        if cfg.steps > 1 {
            let frac = step as f64 / (cfg.steps - 1) as f64;
            opt_main.lr = cfg.lr * (1.0 + (cfg.final_lr_scale - 1.0) * frac);
        }
        let (ql, l3) = q_step(model, q, opt_q, &batch.samples)?;
        let (breakdown, clamps) =
            main_step(model, q, opt_main, &batch.samples, &batch.gaps, &cfg.weights)
                .map_err(|e| match e {
                    RlmError::NonFinite(w) => {
                        RlmError::TrainAbort(format!("non-finite {w} at step {step}"))
                    }
                    other => other,
                })?;
        let row = MetricsRow {
            step,
            l1: breakdown.l1,
            l2: breakdown.l2,
            pred: breakdown.pred,
            recon: breakdown.recon,
            insert: breakdown.insert,
            total: breakdown.total,
            q_loss: ql,
            l3,
            clamp_events: clamps,
        };
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &row).map_err(|e| RlmError::Io(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            history.push(row.clone());
        }
        last = Some(row);
    }
    Ok(TrainReport {
        steps_run: cfg.steps.saturating_sub(start_step),
        last,
        history,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"RLMC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptMeta {
    model: ModelConfig,
    style_names: Vec<String>,
    vocab: Vec<String>,
    dtype: String,
    step: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ModelParams<T>,
    pub q: QClassifier<T>,
    pub vocab: Vocab,
    pub style_names: Vec<String>,
    pub step: u64,
    pub opt_main: Option<AdamW>,
    pub opt_q: Option<AdamW>,
}

pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    /// Widen (or pass through) to `f64` for inference-time scoring.
    pub fn to_f64(&self) -> Checkpoint<f64> {
        match self {
            AnyCheckpoint::F64(c) => c.clone(),
            AnyCheckpoint::F32(c) => Checkpoint {
                model: c.model.cast(),
                q: c.q.cast(),
                vocab: c.vocab.clone(),
                style_names: c.style_names.clone(),
                step: c.step,
                opt_main: c.opt_main.clone(),
                opt_q: c.opt_q.clone(),
            },
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            AnyCheckpoint::F32(c) => c.step,
            AnyCheckpoint::F64(c) => c.step,
        }
    }
}

fn write_set<T: Scalar>(out: &mut Vec<u8>, set: &ParamSet<T>) {
    out.write_u32::<LittleEndian>(set.params.len() as u32).unwrap();
    for p in &set.params {
        out.write_u32::<LittleEndian>(p.name.len() as u32).unwrap();
        out.extend_from_slice(p.name.as_bytes());
        out.write_u32::<LittleEndian>(p.rows as u32).unwrap();
        out.write_u32::<LittleEndian>(p.cols as u32).unwrap();
        for &v in &p.data {
            v.write_bytes(out);
        }
    }
}

fn read_set<T: Scalar, R: std::io::Read>(r: &mut R) -> Result<ParamSet<T>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..n {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| RlmError::InvalidData("non-utf8 parameter name".into()))?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut raw = vec![0u8; rows * cols * T::BYTE_WIDTH];
        r.read_exact(&mut raw)?;
        let data: Vec<T> = raw
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_bytes)
            .collect();
        set.add(&name, rows, cols, data);
    }
    Ok(set)
}

fn write_opt(out: &mut Vec<u8>, opt: &Option<AdamW>) {
    match opt {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            for v in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
            out.write_u64::<LittleEndian>(o.t).unwrap();
            out.write_u32::<LittleEndian>(o.m.len() as u32).unwrap();
            for (m, v) in o.m.iter().zip(&o.v) {
                out.write_u32::<LittleEndian>(m.len() as u32).unwrap();
                for &x in m {
                    out.write_f64::<LittleEndian>(x).unwrap();
                }
                for &x in v {
                    out.write_f64::<LittleEndian>(x).unwrap();
                }
            }
        }
    }
}

fn read_opt<R: std::io::Read>(r: &mut R) -> Result<Option<AdamW>> {
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    if flag[0] == 0 {
        return Ok(None);
    }
    let lr = r.read_f64::<LittleEndian>()?;
    let beta1 = r.read_f64::<LittleEndian>()?;
    let beta2 = r.read_f64::<LittleEndian>()?;
    let eps = r.read_f64::<LittleEndian>()?;
    let weight_decay = r.read_f64::<LittleEndian>()?;
    let t = r.read_u64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut mi = vec![0.0; len];
        let mut vi = vec![0.0; len];
        for x in mi.iter_mut() {
            *x = r.read_f64::<LittleEndian>()?;
        }
        for x in vi.iter_mut() {
            *x = r.read_f64::<LittleEndian>()?;
        }
        m.push(mi);
        v.push(vi);
    }
    Ok(Some(AdamW {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
        t,
        m,
        v,
    }))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let meta = CkptMeta {
        model: ckpt.model.cfg.clone(),
        style_names: ckpt.style_names.clone(),
        vocab: ckpt.vocab.tokens().to_vec(),
        dtype: T::DTYPE.to_string(),
        step: ckpt.step,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| RlmError::Io(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.write_u32::<LittleEndian>(CKPT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(meta_json.len() as u32).unwrap();
    out.extend_from_slice(&meta_json);
    write_set(&mut out, &ckpt.model.set);
    write_set(&mut out, &ckpt.q.set);
    write_opt(&mut out, &ckpt.opt_main);
    write_opt(&mut out, &ckpt.opt_q);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn read_body<T: Scalar, R: std::io::Read>(r: &mut R, meta: CkptMeta) -> Result<Checkpoint<T>> {
    let set = read_set::<T, _>(r)?;
    let model = ModelParams {
        cfg: meta.model.clone(),
        set,
    };
    model.validate()?;
    let q_set = read_set::<T, _>(r)?;
    let qw = q_set.get("q.w");
    if qw.rows != meta.model.dim || qw.cols != meta.style_names.len() {
        return Err(RlmError::ShapeMismatch(format!(
            "classifier weights {}x{} vs dim {} and {} styles",
            qw.rows,
            qw.cols,
            meta.model.dim,
            meta.style_names.len()
        )));
    }
    let q = QClassifier {
        dim: qw.rows,
        n_styles: qw.cols,
        set: q_set,
    };
    let opt_main = read_opt(r)?;
    let opt_q = read_opt(r)?;
    Ok(Checkpoint {
        model,
        q,
        vocab: Vocab::from_tokens(meta.vocab)?,
        style_names: meta.style_names,
        step: meta.step,
        opt_main,
        opt_q,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(RlmError::InvalidData("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(RlmError::InvalidData(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json)?;
    let meta: CkptMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| RlmError::InvalidData(format!("checkpoint meta: {e}")))?;
    match meta.dtype.as_str() {
        "f32" => Ok(AnyCheckpoint::F32(read_body::<f32, _>(&mut r, meta)?)),
        "f64" => Ok(AnyCheckpoint::F64(read_body::<f64, _>(&mut r, meta)?)),
        other => Err(RlmError::InvalidData(format!("unknown dtype '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn small_corpus() -> Corpus {
        let mut cfg = CorpusConfig::toy();
        cfg.train_sentences = 120;
        cfg.eval_pairs = 8;
        generate_corpus(&cfg, 7).unwrap()
    }

    fn small_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            gaps_per_batch: 2,
            spurious_per_batch: 1,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_zero_lr_is_identity() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", 1, 3, vec![0.5, -0.25, 2.0]);
        let before = set.params[0].data.clone();
        let mut opt = AdamW::new(&set, 0.0, 0.01);
        opt.step(&mut set, &vec![vec![1.0, -2.0, 0.3]]).unwrap();
        assert_eq!(set.params[0].data, before);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", 1, 1, vec![1.0]);
        let mut opt = AdamW::new(&set, 0.1, 0.0);
        opt.step(&mut set, &vec![vec![1.0]]).unwrap();
        // bias-corrected first step: update = g / (|g| + eps)
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((set.params[0].data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_weights_without_gradients() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", 1, 1, vec![2.0]);
        let mut opt = AdamW::new(&set, 0.5, 0.1);
        opt.step(&mut set, &vec![vec![0.0]]).unwrap();
        // zero gradient: only the decay term moves the weight
        assert!((set.params[0].data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", 1, 1, vec![1.0]);
        let mut opt = AdamW::new(&set, 0.1, 0.0);
        assert!(matches!(
            opt.step(&mut set, &vec![vec![f64::NAN]]),
            Err(RlmError::NonFinite(_))
        ));
    }

    fn run_steps(corpus: &Corpus, steps: usize) -> (ModelParams<f64>, QClassifier<f64>) {
        let mcfg = ModelConfig::tiny(corpus.vocab.len(), corpus.style_names.len());
        let mut model = ModelParams::<f64>::init(mcfg, 1);
        let mut q = QClassifier::init(model.cfg.dim, 2, 2);
        let cfg = small_train_cfg(steps);
        let mut opt_main = AdamW::new(&model.set, cfg.lr, cfg.weight_decay);
        let mut opt_q = AdamW::new(&q.set, cfg.q_lr, 0.0);
        run_training(corpus, &mut model, &mut q, &mut opt_main, &mut opt_q, &cfg, 0, None)
            .unwrap();
        (model, q)
    }

    fn param_bits(set: &ParamSet<f64>) -> Vec<u64> {
        set.params
            .iter()
            .flat_map(|p| p.data.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn training_is_bit_deterministic() {
        let corpus = small_corpus();
        let (m1, q1) = run_steps(&corpus, 6);
        let (m2, q2) = run_steps(&corpus, 6);
        assert_eq!(param_bits(&m1.set), param_bits(&m2.set));
        assert_eq!(param_bits(&q1.set), param_bits(&q2.set));
    }

    #[test]
    fn training_reduces_prediction_loss() {
        let corpus = small_corpus();
        let mcfg = ModelConfig::tiny(corpus.vocab.len(), 2);
        let mut model = ModelParams::<f64>::init(mcfg, 1);
        let mut q = QClassifier::init(model.cfg.dim, 2, 2);
        let cfg = small_train_cfg(120);
        let mut opt_main = AdamW::new(&model.set, 3e-3, cfg.weight_decay);
        let mut opt_q = AdamW::new(&q.set, cfg.q_lr, 0.0);
        let report = run_training(
            &corpus, &mut model, &mut q, &mut opt_main, &mut opt_q, &cfg, 0, None,
        )
        .unwrap();
        // average a few entries at either end; single steps are noisy
        let mean = |rows: &[MetricsRow]| {
            rows.iter().map(|r| r.pred).sum::<f64>() / rows.len() as f64
        };
        let n = report.history.len();
        let first = mean(&report.history[..3.min(n)]);
        let last = mean(&report.history[n.saturating_sub(3)..]);
        assert!(
            last < first,
            "prediction loss did not move: {first} -> {last}",
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = small_corpus();
        let mcfg = ModelConfig::tiny(corpus.vocab.len(), 2);
        let cfg = small_train_cfg(10);

        let mut full_m = ModelParams::<f64>::init(mcfg.clone(), 1);
        let mut full_q = QClassifier::init(full_m.cfg.dim, 2, 2);
        let mut om = AdamW::new(&full_m.set, cfg.lr, cfg.weight_decay);
        let mut oq = AdamW::new(&full_q.set, cfg.q_lr, 0.0);
        run_training(&corpus, &mut full_m, &mut full_q, &mut om, &mut oq, &cfg, 0, None).unwrap();

        // same run, split across a checkpoint at step 5
        let mut m = ModelParams::<f64>::init(mcfg, 1);
        let mut q = QClassifier::init(m.cfg.dim, 2, 2);
        let mut om2 = AdamW::new(&m.set, cfg.lr, cfg.weight_decay);
        let mut oq2 = AdamW::new(&q.set, cfg.q_lr, 0.0);
        let half = TrainConfig { steps: 5, ..cfg.clone() };
        run_training(&corpus, &mut m, &mut q, &mut om2, &mut oq2, &half, 0, None).unwrap();

        let dir = std::env::temp_dir().join(format!("rlm-resume-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        save_checkpoint(
            &path,
            &Checkpoint {
                model: m,
                q,
                vocab: corpus.vocab.clone(),
                style_names: corpus.style_names.clone(),
                step: 5,
                opt_main: Some(om2),
                opt_q: Some(oq2),
            },
        )
        .unwrap();
        let loaded = match load_checkpoint(&path).unwrap() {
            AnyCheckpoint::F64(c) => c,
            _ => panic!("dtype"),
        };
        let mut m = loaded.model;
        let mut q = loaded.q;
        let mut om3 = loaded.opt_main.unwrap();
        let mut oq3 = loaded.opt_q.unwrap();
        run_training(&corpus, &mut m, &mut q, &mut om3, &mut oq3, &cfg, 5, None).unwrap();

        assert_eq!(param_bits(&full_m.set), param_bits(&m.set));
        assert_eq!(param_bits(&full_q.set), param_bits(&q.set));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let corpus = small_corpus();
        let mcfg = ModelConfig::tiny(corpus.vocab.len(), 2);
        let model = ModelParams::<f32>::init(mcfg, 9);
        let q = QClassifier::<f32>::init(model.cfg.dim, 2, 3);
        let opt = AdamW::new(&model.set, 1e-3, 0.01);
        let ckpt = Checkpoint {
            model,
            q,
            vocab: corpus.vocab.clone(),
            style_names: corpus.style_names.clone(),
            step: 17,
            opt_main: Some(opt),
            opt_q: None,
        };
        let dir = std::env::temp_dir().join(format!("rlm-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.bin");
        let p2 = dir.join("b.bin");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = match load_checkpoint(&p1).unwrap() {
            AnyCheckpoint::F32(c) => c,
            _ => panic!("dtype"),
        };
        assert_eq!(loaded.step, 17);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = std::env::temp_dir().join(format!("rlm-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
