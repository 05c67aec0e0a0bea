//! Matching-token aggregation: learnable token columns are appended to the
//! encoded query/target sequences and updated by one parameter-shared
//! Transformer encoder with no positional encodings; the score is the inner
//! product of the flattened, column-normalized token matrices.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TextualRepresentation, VisualRepresentation};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, TensorId};

pub const L2_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED_LOGIT: f64 = -1e30;

/// Which sequence columns may serve as attention keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Padded text columns are excluded as keys; everything else attends.
    PadColumns,
    /// No masking at all.
    AllowAll,
}

/// Shared Transformer encoder geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub mask_policy: MaskPolicy,
}

impl TransformerConfig {
    pub fn new(layers: usize, heads: usize, dim: usize) -> Result<Self> {
        let cfg = TransformerConfig {
            layers,
            heads,
            dim,
            ff_dim: 4 * dim,
            mask_policy: MaskPolicy::PadColumns,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("transformer needs layers, heads, ff_dim >= 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// In-graph handle to the learnable `[D, U]` matching-token matrix. The
/// same handle is concatenated onto the query and the target sequence.
#[derive(Debug, Clone, Copy)]
pub struct MatchingTokens {
    pub mat: TensorId,
    pub count: usize,
}

impl MatchingTokens {
    pub fn new(g: &Graph, mat: TensorId) -> Result<Self> {
        let t = g.value(mat);
        if !t.is_matrix() || t.cols() == 0 {
            return Err(Error::Config("matching tokens must be a [D, U] matrix with U >= 1".into()));
        }
        Ok(MatchingTokens { mat, count: t.cols() })
    }
}

/// A concatenated input sequence: feature columns followed by the matching
/// token columns, with a per-column attendable flag.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub mat: TensorId,
    pub mask: Vec<bool>,
    pub token_count: usize,
}

/// `[E_r; E_m; E_p]` — reference image, modification text, matching tokens.
pub fn assemble_query(
    g: &mut Graph,
    visual: &VisualRepresentation,
    textual: &TextualRepresentation,
    tokens: &MatchingTokens,
) -> Result<AssembledSequence> {
    let d = g.value(tokens.mat).rows();
    for (name, mat) in [("visual", visual.mat), ("textual", textual.mat)] {
        if g.value(mat).rows() != d {
            return Err(Error::dim(
                "assemble_query",
                format!("{name} dim {} != token dim {d}", g.value(mat).rows()),
            ));
        }
    }
    let mat = g.concat_cols(&[visual.mat, textual.mat, tokens.mat])?;
    let mut mask = vec![true; visual.cols];
    mask.extend(&textual.mask);
    mask.extend(std::iter::repeat_n(true, tokens.count));
    Ok(AssembledSequence { mat, mask, token_count: tokens.count })
}

/// `[E_t; E_p]` — target image, matching tokens.
pub fn assemble_target(
    g: &mut Graph,
    visual: &VisualRepresentation,
    tokens: &MatchingTokens,
) -> Result<AssembledSequence> {
    let d = g.value(tokens.mat).rows();
    if g.value(visual.mat).rows() != d {
        return Err(Error::dim(
            "assemble_target",
            format!("visual dim {} != token dim {d}", g.value(visual.mat).rows()),
        ));
    }
    let mat = g.concat_cols(&[visual.mat, tokens.mat])?;
    let mut mask = vec![true; visual.cols];
    mask.extend(std::iter::repeat_n(true, tokens.count));
    Ok(AssembledSequence { mat, mask, token_count: tokens.count })
}

/// In-graph aggregated token matrix: raw `[D, U]` and its column-normalized
/// form.
#[derive(Debug, Clone, Copy)]
pub struct TokenMatrixIds {
    pub raw: TensorId,
    pub normalized: TensorId,
    pub count: usize,
}

/// Per-layer parameter handles.
pub struct TransformerLayerLeaves {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub ff_w1: TensorId,
    pub ff_b1: TensorId,
    pub ff_w2: TensorId,
    pub ff_b2: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
}

pub struct TransformerLeaves {
    pub layers: Vec<TransformerLayerLeaves>,
}

impl TransformerLeaves {
    pub fn from_map(
        map: &BTreeMap<String, TensorId>,
        prefix: &str,
        layers: usize,
    ) -> Result<Self> {
        let get = |name: String| {
            map.get(&name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = |name: &str| get(format!("{prefix}l{l}.{name}"));
            out.push(TransformerLayerLeaves {
                wq: p("attn.wq")?,
                bq: p("attn.bq")?,
                wk: p("attn.wk")?,
                bk: p("attn.bk")?,
                wv: p("attn.wv")?,
                bv: p("attn.bv")?,
                wo: p("attn.wo")?,
                bo: p("attn.bo")?,
                ln1_gain: p("ln1.gain")?,
                ln1_bias: p("ln1.bias")?,
                ff_w1: p("ff.w1")?,
                ff_b1: p("ff.b1")?,
                ff_w2: p("ff.w2")?,
                ff_b2: p("ff.b2")?,
                ln2_gain: p("ln2.gain")?,
                ln2_bias: p("ln2.bias")?,
            });
        }
        Ok(TransformerLeaves { layers: out })
    }
}

/// Inserts freshly initialized Transformer parameters under `prefix`.
pub fn init_transformer_params(
    store: &mut ParamStore,
    cfg: &TransformerConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.dim;
    for l in 0..cfg.layers {
        let name = |suffix: &str| format!("{prefix}l{l}.{suffix}");
        for proj in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(name(proj), Tensor::fan_in_uniform(&[d, d], d, rng));
        }
        for bias in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            store.insert(name(bias), Tensor::zeros(&[d]));
        }
        store.insert(name("ln1.gain"), Tensor::full(&[d], 1.0));
        store.insert(name("ln1.bias"), Tensor::zeros(&[d]));
        store.insert(name("ff.w1"), Tensor::fan_in_uniform(&[cfg.ff_dim, d], d, rng));
        store.insert(name("ff.b1"), Tensor::zeros(&[cfg.ff_dim]));
        store.insert(name("ff.w2"), Tensor::fan_in_uniform(&[d, cfg.ff_dim], cfg.ff_dim, rng));
        store.insert(name("ff.b2"), Tensor::zeros(&[d]));
        store.insert(name("ln2.gain"), Tensor::full(&[d], 1.0));
        store.insert(name("ln2.bias"), Tensor::zeros(&[d]));
    }
}

fn affine(g: &mut Graph, w: TensorId, x: TensorId, b: TensorId) -> Result<TensorId> {
    let y = g.matmul(w, x)?;
    g.add_col_vec(y, b)
}

/// Layer norm over each column (token) of a `[D, N]` sequence.
fn layer_norm_cols(
    g: &mut Graph,
    x: TensorId,
    gain: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let t = g.transpose(x)?;
    let normed = g.layer_norm(t, gain, bias, LAYER_NORM_EPS)?;
    g.transpose(normed)
}

/// Runs the post-norm Transformer encoder over an assembled sequence and
/// returns the outputs at the token positions (the final `U` columns),
/// raw and column-normalized.
///
/// No positional or modality encodings are added, so token outputs are
/// invariant to permutations of the context columns. The same parameter
/// leaves serve the query and the target call.
pub fn aggregate(
    g: &mut Graph,
    seq: &AssembledSequence,
    cfg: &TransformerConfig,
    leaves: &TransformerLeaves,
) -> Result<TokenMatrixIds> {
    cfg.validate()?;
    let n = g.value(seq.mat).cols();
    let d = g.value(seq.mat).rows();
    if d != cfg.dim {
        return Err(Error::dim("aggregate", format!("sequence dim {d} != model dim {}", cfg.dim)));
    }
    if seq.mask.len() != n {
        return Err(Error::dim(
            "aggregate",
            format!("mask length {} != sequence width {n}", seq.mask.len()),
        ));
    }
    if seq.token_count == 0 || seq.token_count > n {
        return Err(Error::dim(
            "aggregate",
            format!("token count {} outside sequence width {n}", seq.token_count),
        ));
    }
    if leaves.layers.len() != cfg.layers {
        return Err(Error::Config("layer parameter count mismatch".into()));
    }

    let key_mask: Vec<f64> = match cfg.mask_policy {
        MaskPolicy::PadColumns => {
            seq.mask.iter().map(|&ok| if ok { 0.0 } else { MASKED_LOGIT }).collect()
        }
        MaskPolicy::AllowAll => vec![0.0; n],
    };
    let mask_vec = g.constant(Tensor::new(&[n], key_mask)?);

    let head_dim = cfg.dim / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut x = seq.mat;
    for layer in &leaves.layers {
        let q = affine(g, layer.wq, x, layer.bq)?;
        let k = affine(g, layer.wk, x, layer.bk)?;
        let v = affine(g, layer.wv, x, layer.bv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_rows(q, h * head_dim, head_dim)?;
            let kh = g.slice_rows(k, h * head_dim, head_dim)?;
            let vh = g.slice_rows(v, h * head_dim, head_dim)?;
            let qt = g.transpose(qh)?;
            let scores = g.matmul(qt, kh)?;
            let scores = g.scale(scores, scale);
            let scores = g.add_row_vec(scores, mask_vec)?;
            let weights = g.softmax_rows(scores)?;
            let wt = g.transpose(weights)?;
            heads.push(g.matmul(vh, wt)?);
        }
        let merged = g.concat_rows(&heads)?;
        let attn = affine(g, layer.wo, merged, layer.bo)?;
        let res = g.add(x, attn)?;
        let normed = layer_norm_cols(g, res, layer.ln1_gain, layer.ln1_bias)?;

        let inner = affine(g, layer.ff_w1, normed, layer.ff_b1)?;
        let inner = g.relu(inner);
        let ff = affine(g, layer.ff_w2, inner, layer.ff_b2)?;
        let res = g.add(normed, ff)?;
        x = layer_norm_cols(g, res, layer.ln2_gain, layer.ln2_bias)?;
    }

    let raw = g.slice_cols(x, n - seq.token_count, seq.token_count)?;
    let normalized = g.l2_normalize_columns(raw, L2_EPS)?;
    Ok(TokenMatrixIds { raw, normalized, count: seq.token_count })
}

/// Flattens the normalized token matrix column-major by token (token 1
/// dims 1..D, then token 2, …) into a `[D*U, 1]` vector. Any consistent
/// order preserves the inner product; this one is the convention.
pub fn flatten_tokens(g: &mut Graph, tm: &TokenMatrixIds) -> Result<TensorId> {
    let t = g.transpose(tm.normalized)?;
    let (u, d) = (g.value(t).rows(), g.value(t).cols());
    g.reshape(t, &[u * d, 1])
}

/// A detached aggregated token matrix, used for scoring and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    raw: Tensor,
    normalized: Tensor,
}

impl TokenMatrix {
    pub fn from_raw(raw: Tensor) -> Result<Self> {
        if !raw.is_matrix() || raw.cols() == 0 {
            return Err(Error::dim("token_matrix", format!("expected [D, U], got {:?}", raw.shape())));
        }
        let mut g = Graph::new();
        let id = g.constant(raw.clone());
        let norm = g.l2_normalize_columns(id, L2_EPS)?;
        let normalized = g.detach(norm);
        Ok(TokenMatrix { raw, normalized })
    }

    pub fn from_graph(g: &Graph, ids: &TokenMatrixIds) -> Self {
        TokenMatrix { raw: g.detach(ids.raw), normalized: g.detach(ids.normalized) }
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn token_count(&self) -> usize {
        self.raw.cols()
    }

    pub fn dim(&self) -> usize {
        self.raw.rows()
    }
}

/// Inner product of the flattened normalized matrices; equals the sum of
/// per-token cosine similarities, bounded by `[-U, U]`.
pub fn match_score(query: &TokenMatrix, target: &TokenMatrix) -> Result<f64> {
    if query.token_count() != target.token_count() {
        return Err(Error::dim(
            "match_score",
            format!("token counts differ: {} vs {}", query.token_count(), target.token_count()),
        ));
    }
    query.normalized.dot(&target.normalized)
}

/// The "average pooled" scoring rule: cosine similarity of the column
/// averages of the raw token matrices (early fusion of the factors).
pub fn avepool_score(query: &TokenMatrix, target: &TokenMatrix) -> Result<f64> {
    if query.token_count() != target.token_count() {
        return Err(Error::dim(
            "avepool_score",
            format!("token counts differ: {} vs {}", query.token_count(), target.token_count()),
        ));
    }
    let mean_cols = |t: &Tensor| -> Vec<f64> {
        let (d, u) = (t.rows(), t.cols());
        (0..d).map(|r| (0..u).map(|c| t.at2(r, c)).sum::<f64>() / u as f64).collect()
    };
    let a = mean_cols(&query.raw);
    let b = mean_cols(&target.raw);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
    Ok(dot / (na * nb))
}

/// Selectable query–target scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    MultiFaceted,
    AveragePooled,
}

impl ScoreRule {
    pub fn score(self, query: &TokenMatrix, target: &TokenMatrix) -> Result<f64> {
        match self {
            ScoreRule::MultiFaceted => match_score(query, target),
            ScoreRule::AveragePooled => avepool_score(query, target),
        }
    }
}
