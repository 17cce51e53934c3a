//! The parameterized model: MLM encoder, content-extraction block, style
//! table, fusion block, and the prediction / reconstruction / insertion
//! heads.
//!
//! Every forward pass runs on a [`Graph`] tape so the same code path
//! serves training, gradient checks, and inference scoring.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlmError};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamSet, TensorId};
use crate::vocab::{StyleId, TokenId, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Style and content embedding dimension.
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    /// Maximum assembled input length (incl. [BOS]/[EOS]/[MASK]).
    pub l_max: usize,
    pub vocab_size: usize,
    pub n_styles: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn desk_scale(vocab_size: usize, n_styles: usize) -> Self {
        ModelConfig {
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 4,
            l_max: 32,
            vocab_size,
            n_styles,
            layer_norm_eps: 1e-5,
        }
    }

    /// Smallest config that still exercises every parameter group; used
    /// by gradient checks and oracle instances.
    pub fn tiny(vocab_size: usize, n_styles: usize) -> Self {
        ModelConfig {
            dim: 8,
            n_layers: 1,
            n_heads: 1,
            ff_mult: 2,
            l_max: 32,
            vocab_size,
            n_styles,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }
}

/// All trainable weights, in a fixed iteration order shared by the
/// optimizer, checkpoints, and gradient checks.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub set: ParamSet<T>,
}

const INIT_STD: f64 = 0.02;

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    // Box-Muller on the seeded stream; avoids a distribution dependency
    // and keeps init bit-stable across builds.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out.push(T::from_f64(r * th.cos() * std));
        if out.len() < n {
            out.push(T::from_f64(r * th.sin() * std));
        }
    }
    out
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization: Gaussian std 0.02 for weights and both
    /// embedding tables (style table included — no pretrained style
    /// descriptions exist at this scale), ones/zeros for layer norms,
    /// zeros for biases.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let v = cfg.vocab_size;
        let ff = cfg.ff_dim();
        let mut set = ParamSet::new();
        let mut w = |set: &mut ParamSet<T>, name: &str, r: usize, c: usize| {
            let data = gaussian(&mut rng, r * c, INIT_STD);
            set.add(name, r, c, data);
        };
        let zeros = |set: &mut ParamSet<T>, name: &str, r: usize, c: usize| {
            set.add(name, r, c, vec![T::zero(); r * c]);
        };
        let ones = |set: &mut ParamSet<T>, name: &str, c: usize| {
            set.add(name, 1, c, vec![T::one(); c]);
        };

        w(&mut set, "tok_emb", v, d);
        w(&mut set, "pos_emb", cfg.l_max, d);
        for l in 0..cfg.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                w(&mut set, &format!("enc{l}.attn.{proj}"), d, d);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                zeros(&mut set, &format!("enc{l}.attn.{bias}"), 1, d);
            }
            ones(&mut set, &format!("enc{l}.ln1.g"), d);
            zeros(&mut set, &format!("enc{l}.ln1.b"), 1, d);
            w(&mut set, &format!("enc{l}.ff.w1"), d, ff);
            zeros(&mut set, &format!("enc{l}.ff.b1"), 1, ff);
            w(&mut set, &format!("enc{l}.ff.w2"), ff, d);
            zeros(&mut set, &format!("enc{l}.ff.b2"), 1, d);
            ones(&mut set, &format!("enc{l}.ln2.g"), d);
            zeros(&mut set, &format!("enc{l}.ln2.b"), 1, d);
        }
        // content-extraction attention block over final hidden states
        for proj in ["wq", "wk", "wv", "wo"] {
            w(&mut set, &format!("content.{proj}"), d, d);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            zeros(&mut set, &format!("content.{bias}"), 1, d);
        }
        w(&mut set, "style_table", cfg.n_styles, d);
        w(&mut set, "fuse.proj.w", 2 * d, d);
        zeros(&mut set, "fuse.proj.b", 1, d);
        for proj in ["wq", "wk", "wv", "wo"] {
            w(&mut set, &format!("fuse.attn.{proj}"), d, d);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            zeros(&mut set, &format!("fuse.attn.{bias}"), 1, d);
        }
        ones(&mut set, "fuse.ln.g", d);
        zeros(&mut set, "fuse.ln.b", 1, d);
        w(&mut set, "head_pred.w", d, v);
        zeros(&mut set, "head_pred.b", 1, v);
        w(&mut set, "head_recon.w", d, v);
        zeros(&mut set, "head_recon.b", 1, v);
        w(&mut set, "head_insert.w", d, 2);
        zeros(&mut set, "head_insert.b", 1, 2);

        ModelParams { cfg, set }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            set: self.set.cast(),
        }
    }

    /// Validate stored shapes against the config; used by checkpoint load.
    pub fn validate(&self) -> Result<()> {
        let reference = ModelParams::<T>::init(self.cfg.clone(), 0);
        if reference.set.params.len() != self.set.params.len() {
            return Err(RlmError::ShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                reference.set.params.len(),
                self.set.params.len()
            )));
        }
        for (want, got) in reference.set.params.iter().zip(&self.set.params) {
            if want.name != got.name || want.rows != got.rows || want.cols != got.cols {
                return Err(RlmError::ShapeMismatch(format!(
                    "param {}: expected {}x{} '{}', found {}x{}",
                    got.name, want.rows, want.cols, want.name, got.rows, got.cols
                )));
            }
        }
        Ok(())
    }
}

/// One forward context: parameter leaves registered on a graph.
pub struct ModelForward<'a, T: Scalar> {
    pub g: &'a Graph<T>,
    model: &'a ModelParams<T>,
    leaves: Vec<TensorId>,
}

impl<'a, T: Scalar> ModelForward<'a, T> {
    pub fn new(g: &'a Graph<T>, model: &'a ModelParams<T>, needs_grad: bool) -> Self {
        let leaves = model.set.leaves(g, needs_grad);
        ModelForward { g, model, leaves }
    }

    pub fn leaf(&self, name: &str) -> TensorId {
        self.leaves[self.model.set.index_of(name)]
    }

    pub fn leaves(&self) -> &[TensorId] {
        &self.leaves
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    fn linear(&self, x: TensorId, w: &str, b: &str) -> TensorId {
        let y = self.g.matmul(x, self.leaf(w));
        self.g.add_row_broadcast(y, self.leaf(b))
    }

    fn attention_block(&self, x: TensorId, prefix: &str, n_heads: usize) -> TensorId {
        let g = self.g;
        let (len, d) = g.shape(x);
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.linear(x, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.linear(x, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let dh = d / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, vh));
        }
        let merged = if n_heads == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let _ = len;
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Bidirectional encoder over assembled token ids; returns `L x d`
    /// final hidden states.
    fn encoder(&self, tokens: &[TokenId]) -> Result<TensorId> {
        let cfg = self.cfg();
        if tokens.is_empty() {
            return Err(RlmError::EmptySequence("encoder input".into()));
        }
        if tokens.len() > cfg.l_max {
            return Err(RlmError::SequenceTooLong {
                len: tokens.len(),
                max: cfg.l_max,
            });
        }
        let g = self.g;
        let tok = g.gather_rows(self.leaf("tok_emb"), tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(self.leaf("pos_emb"), &positions);
        let mut x = g.add(tok, pos);
        let eps = cfg.layer_norm_eps;
        for l in 0..cfg.n_layers {
            let attn = self.attention_block(x, &format!("enc{l}.attn"), cfg.n_heads);
            let res = g.add(x, attn);
            x = g.layer_norm_rows(
                res,
                self.leaf(&format!("enc{l}.ln1.g")),
                self.leaf(&format!("enc{l}.ln1.b")),
                eps,
            );
            let h = self.linear(x, &format!("enc{l}.ff.w1"), &format!("enc{l}.ff.b1"));
            let h = g.gelu(h);
            let h = self.linear(h, &format!("enc{l}.ff.w2"), &format!("enc{l}.ff.b2"));
            let res = g.add(x, h);
            x = g.layer_norm_rows(
                res,
                self.leaf(&format!("enc{l}.ln2.g")),
                self.leaf(&format!("enc{l}.ln2.b")),
                eps,
            );
        }
        Ok(x)
    }

    /// Encoder followed by the content-extraction attention block.
    fn contents_of(&self, tokens: &[TokenId]) -> Result<TensorId> {
        let h = self.encoder(tokens)?;
        Ok(self.attention_block(h, "content", 1))
    }

    /// Content embeddings for `([BOS], prefix, [MASK], suffix, [EOS])`.
    ///
    /// Returns the full `L x d` content sequence and the index of the
    /// masked position within it.
    pub fn encode_content(&self, prefix: &[TokenId], suffix: &[TokenId]) -> Result<(TensorId, usize)> {
        let mut tokens = Vec::with_capacity(prefix.len() + suffix.len() + 3);
        tokens.push(Vocab::BOS);
        tokens.extend_from_slice(prefix);
        let mask_pos = tokens.len();
        tokens.push(Vocab::MASK);
        tokens.extend_from_slice(suffix);
        tokens.push(Vocab::EOS);
        Ok((self.contents_of(&tokens)?, mask_pos))
    }

    /// Content embeddings for the reconstruction form
    /// `([BOS], span, x_prefix, [MASK], x_suffix, [EOS])`, with the
    /// candidate span prepended as a prompt. An empty span reduces to the
    /// plain MLM encoding of the masked source.
    pub fn encode_reconstruction(
        &self,
        span: &[TokenId],
        x_prefix: &[TokenId],
        x_suffix: &[TokenId],
    ) -> Result<(TensorId, usize)> {
        let mut tokens = Vec::with_capacity(span.len() + x_prefix.len() + x_suffix.len() + 3);
        tokens.push(Vocab::BOS);
        tokens.extend_from_slice(span);
        tokens.extend_from_slice(x_prefix);
        let mask_pos = tokens.len();
        tokens.push(Vocab::MASK);
        tokens.extend_from_slice(x_suffix);
        tokens.push(Vocab::EOS);
        Ok((self.contents_of(&tokens)?, mask_pos))
    }

    /// Fusion block of style and content: the style embedding is
    /// concatenated to every content embedding, projected back to `d`,
    /// run through a single-head self-attention, added to the original
    /// contents, and layer-normalized. Returns the fused row at `pos`.
    pub fn fuse(&self, style: StyleId, contents: TensorId, pos: usize) -> Result<TensorId> {
        let g = self.g;
        let (len, _) = g.shape(contents);
        if len == 0 {
            return Err(RlmError::EmptySequence("fusion contents".into()));
        }
        if pos >= len {
            return Err(RlmError::ShapeMismatch(format!(
                "fuse position {pos} out of {len}"
            )));
        }
        if style >= self.cfg().n_styles {
            return Err(RlmError::InvalidData(format!("unknown style id {style}")));
        }
        let style_row = g.gather_rows(self.leaf("style_table"), &[style]);
        let style_rows = g.broadcast_row(style_row, len);
        let cat = g.concat_cols(&[contents, style_rows]);
        let proj = {
            let y = g.matmul(cat, self.leaf("fuse.proj.w"));
            g.add_row_broadcast(y, self.leaf("fuse.proj.b"))
        };
        let attn = self.attention_block(proj, "fuse.attn", 1);
        let res = g.add(contents, attn);
        let fused = g.layer_norm_rows(res, self.leaf("fuse.ln.g"), self.leaf("fuse.ln.b"), self.cfg().layer_norm_eps);
        Ok(g.slice_rows(fused, pos, 1))
    }

    /// Prediction-head logits over the full vocabulary ([PAD] included as
    /// the deletion outcome).
    pub fn predict_logits(&self, fused: TensorId) -> TensorId {
        self.linear(fused, "head_pred.w", "head_pred.b")
    }

    /// Reconstruction-head logits over the vocabulary.
    pub fn reconstruct_logits(&self, content_row: TensorId) -> TensorId {
        self.linear(content_row, "head_recon.w", "head_recon.b")
    }

    /// Insertion-head logits: index 0 = [MASK] (insert another token),
    /// index 1 = [PAD] (stop inserting).
    pub fn insert_logits(&self, fused: TensorId) -> TensorId {
        self.linear(fused, "head_insert.w", "head_insert.b")
    }
}

// ---------------------------------------------------------------------------
// Tape-free convenience entry points (inference distributions).
// ---------------------------------------------------------------------------

impl<T: Scalar> ModelParams<T> {
    /// `P(y | prefix, [MASK], suffix, style)` over the full vocabulary.
    pub fn prediction_dist(
        &self,
        prefix: &[TokenId],
        suffix: &[TokenId],
        style: StyleId,
    ) -> Result<Vec<T>> {
        let g = Graph::new();
        let fwd = ModelForward::new(&g, self, false);
        let (contents, pos) = fwd.encode_content(prefix, suffix)?;
        let fused = fwd.fuse(style, contents, pos)?;
        let logits = fwd.predict_logits(fused);
        let probs = g.softmax_rows(logits);
        Ok(g.data(probs))
    }

    /// `P(x | span, x_prefix, [MASK], x_suffix)` over the vocabulary.
    pub fn reconstruction_dist(
        &self,
        span: &[TokenId],
        x_prefix: &[TokenId],
        x_suffix: &[TokenId],
    ) -> Result<Vec<T>> {
        let g = Graph::new();
        let fwd = ModelForward::new(&g, self, false);
        let (contents, pos) = fwd.encode_reconstruction(span, x_prefix, x_suffix)?;
        let c_row = g.slice_rows(contents, pos, 1);
        let logits = fwd.reconstruct_logits(c_row);
        let probs = g.softmax_rows(logits);
        Ok(g.data(probs))
    }

    /// `[P([MASK]), P([PAD])]` insertion decision at the masked position.
    pub fn insertion_dist(
        &self,
        prefix: &[TokenId],
        suffix: &[TokenId],
        style: StyleId,
    ) -> Result<[T; 2]> {
        let g = Graph::new();
        let fwd = ModelForward::new(&g, self, false);
        let (contents, pos) = fwd.encode_content(prefix, suffix)?;
        let fused = fwd.fuse(style, contents, pos)?;
        let logits = fwd.insert_logits(fused);
        let probs = g.data(g.softmax_rows(logits));
        Ok([probs[0], probs[1]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelParams<f64> {
        let mut vocab = Vocab::new();
        for w in ["a", "b", "c", "d", "e", "f"] {
            vocab.intern(w);
        }
        ModelParams::init(ModelConfig::tiny(vocab.len(), 2), 11)
    }

    #[test]
    fn content_embedding_has_model_dim() {
        let m = tiny_model();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let (contents, pos) = fwd.encode_content(&[4, 5], &[6]).unwrap();
        assert_eq!(g.shape(contents), (6, 8)); // BOS + 2 + MASK + 1 + EOS
        assert_eq!(pos, 3);
        let row = g.slice_rows(contents, pos, 1);
        assert_eq!(g.shape(row), (1, 8));
    }

    #[test]
    fn encode_is_deterministic() {
        let m = tiny_model();
        let run = || {
            let g = Graph::new();
            let fwd = ModelForward::new(&g, &m, false);
            let (contents, pos) = fwd.encode_content(&[4], &[5, 6]).unwrap();
            let row = g.slice_rows(contents, pos, 1);
            g.data(row)
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_span_reconstruction_equals_plain_mlm_encoding() {
        let m = tiny_model();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let (a, pa) = fwd.encode_reconstruction(&[], &[4, 5], &[6]).unwrap();
        let (b, pb) = fwd.encode_content(&[4, 5], &[6]).unwrap();
        assert_eq!(pa, pb);
        let da = g.data(a);
        let db = g.data(b);
        assert_eq!(
            da.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            db.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn heads_output_normalized_distributions() {
        let m = tiny_model();
        let p = m.prediction_dist(&[4], &[5], 0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let r = m.reconstruction_dist(&[6], &[4], &[5]).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let i = m.insertion_dist(&[4], &[5], 1).unwrap();
        assert!((i[0] + i[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zeroed_heads_give_uniform_distributions() {
        let mut m = tiny_model();
        for name in ["head_pred.w", "head_pred.b", "head_insert.w", "head_insert.b"] {
            let idx = m.set.index_of(name);
            for v in m.set.params[idx].data.iter_mut() {
                *v = 0.0;
            }
        }
        let p = m.prediction_dist(&[4], &[5], 0).unwrap();
        let uniform = 1.0 / p.len() as f64;
        assert!(p.iter().all(|&x| (x - uniform).abs() < 1e-12));
        let i = m.insertion_dist(&[4], &[5], 0).unwrap();
        assert!((i[0] - 0.5).abs() < 1e-12 && (i[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sequence_too_long_reports_lengths() {
        let m = tiny_model();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let long: Vec<TokenId> = vec![4; 40];
        match fwd.encode_content(&long, &[]) {
            Err(RlmError::SequenceTooLong { len, max }) => {
                assert_eq!(len, 43);
                assert_eq!(max, 32);
            }
            other => panic!("expected SequenceTooLong, got {other:?}"),
        }
    }

    #[test]
    fn permuting_input_changes_content_embedding() {
        let m = tiny_model();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let (a, pa) = fwd.encode_content(&[4, 5, 6], &[7]).unwrap();
        let (b, pb) = fwd.encode_content(&[6, 5, 4], &[7]).unwrap();
        let da = g.data(g.slice_rows(a, pa, 1));
        let db = g.data(g.slice_rows(b, pb, 1));
        let diff: f64 = da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "bag-of-words collapse: {diff}");
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let m = tiny_model();
        let g = Graph::new();
        let fwd = ModelForward::new(&g, &m, false);
        let (contents, _) = fwd.encode_content(&[4], &[5]).unwrap();
        assert!(fwd.fuse(9, contents, 0).is_err());
        assert!(fwd.fuse(0, contents, 99).is_err());
    }

    #[test]
    fn validate_catches_shape_drift() {
        let mut m = tiny_model();
        assert!(m.validate().is_ok());
        m.set.params[0].rows += 1;
        let cols = m.set.params[0].cols;
        m.set.params[0].data.extend(vec![0.0; cols]);
        assert!(m.validate().is_err());
    }
}
