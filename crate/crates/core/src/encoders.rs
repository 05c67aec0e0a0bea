//! Multi-grained image and text encoders.
//!
//! The image side produces local features from a mid-depth feature map and
//! global features from max/avg/gem pooling of a deeper map; the text side
//! produces word-level features from every LSTM hidden state and a
//! sentence-level feature from the last valid hidden state.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, PoolKind, Tensor, TensorId};

/// Output size of a 3x3 stride-2 pad-1 convolution.
fn halved(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Geometry of the two-stage convolutional backbone.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    /// Depth of the mid (second-to-last) feature map feeding the local branch.
    pub mid_channels: usize,
    /// Depth of the last feature map feeding the global branch.
    pub last_channels: usize,
    /// Grid of the mid feature map.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Grid of the last feature map.
    pub reduced_h: usize,
    pub reduced_w: usize,
    /// Output feature dimension, shared with the text encoder and matcher.
    pub dim: usize,
    /// Gem pooling exponent (non-learnable).
    pub gem_p: f64,
}

impl ImageEncoderConfig {
    pub fn new(
        in_channels: usize,
        mid_channels: usize,
        last_channels: usize,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
    ) -> Result<Self> {
        let cfg = ImageEncoderConfig {
            in_channels,
            mid_channels,
            last_channels,
            grid_h,
            grid_w,
            reduced_h: halved(grid_h),
            reduced_w: halved(grid_w),
            dim,
            gem_p: 3.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h * self.grid_w < 4 {
            return Err(Error::Config(format!(
                "local grid must have at least 4 cells, got {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        if [self.in_channels, self.mid_channels, self.last_channels, self.dim]
            .iter()
            .any(|&d| d == 0)
        {
            return Err(Error::Config("all encoder dimensions must be >= 1".into()));
        }
        if self.reduced_h != halved(self.grid_h) || self.reduced_w != halved(self.grid_w) {
            return Err(Error::Config("reduced grid inconsistent with backbone strides".into()));
        }
        if self.gem_p < 1.0 {
            return Err(Error::Config(format!("gem exponent must be >= 1, got {}", self.gem_p)));
        }
        Ok(())
    }

    /// Expected input grid (one stride-2 stage above the mid map).
    pub fn input_h(&self) -> usize {
        self.grid_h * 2
    }

    pub fn input_w(&self) -> usize {
        self.grid_w * 2
    }

    /// Columns of the full visual representation: local grid cells + 3 pooled.
    pub fn output_cols(&self) -> usize {
        self.grid_h * self.grid_w + 3
    }
}

/// Text encoder dimensions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// LSTM hidden dimension.
    pub hidden_dim: usize,
    /// Output feature dimension, shared with the matcher.
    pub dim: usize,
    pub max_len: usize,
    pub pad_id: u32,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.pad_id as usize) >= self.vocab_size {
            return Err(Error::Config(format!(
                "pad id {} outside vocabulary of {}",
                self.pad_id, self.vocab_size
            )));
        }
        if [self.vocab_size, self.embed_dim, self.hidden_dim, self.dim, self.max_len]
            .iter()
            .any(|&d| d == 0)
        {
            return Err(Error::Config("all text encoder dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// In-graph visual representation: a `[D, cols]` matrix whose columns are
/// all attendable.
#[derive(Debug, Clone, Copy)]
pub struct VisualRepresentation {
    pub mat: TensorId,
    pub cols: usize,
}

/// In-graph textual representation. `mask[c]` is false for padded word
/// columns, which the matcher excludes from attention.
#[derive(Debug, Clone)]
pub struct TextualRepresentation {
    pub mat: TensorId,
    pub mask: Vec<bool>,
    pub valid_len: usize,
}

/// Node handles for the image encoder parameters.
pub struct ImageEncoderLeaves {
    pub conv1_w: TensorId,
    pub conv1_b: TensorId,
    pub conv2_w: TensorId,
    pub conv2_b: TensorId,
    pub local_w: TensorId,
    pub local_b: TensorId,
    pub global_w: TensorId,
    pub global_b: TensorId,
}

impl ImageEncoderLeaves {
    pub fn from_map(map: &BTreeMap<String, TensorId>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            map.get(&format!("{prefix}{name}"))
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{prefix}{name}`")))
        };
        Ok(ImageEncoderLeaves {
            conv1_w: get("conv1.w")?,
            conv1_b: get("conv1.b")?,
            conv2_w: get("conv2.w")?,
            conv2_b: get("conv2.b")?,
            local_w: get("local.w")?,
            local_b: get("local.b")?,
            global_w: get("global.w")?,
            global_b: get("global.b")?,
        })
    }
}

/// Inserts freshly initialized image encoder parameters under `prefix`.
pub fn init_image_params(
    store: &mut ParamStore,
    cfg: &ImageEncoderConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) {
    let (ci, c, cl, d) = (cfg.in_channels, cfg.mid_channels, cfg.last_channels, cfg.dim);
    store.insert(format!("{prefix}conv1.w"), Tensor::fan_in_uniform(&[c, ci, 3, 3], ci * 9, rng));
    store.insert(format!("{prefix}conv1.b"), Tensor::zeros(&[c]));
    store.insert(format!("{prefix}conv2.w"), Tensor::fan_in_uniform(&[cl, c, 3, 3], c * 9, rng));
    store.insert(format!("{prefix}conv2.b"), Tensor::zeros(&[cl]));
    store.insert(format!("{prefix}local.w"), Tensor::fan_in_uniform(&[d, c], c, rng));
    store.insert(format!("{prefix}local.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}global.w"), Tensor::fan_in_uniform(&[d, cl], cl, rng));
    store.insert(format!("{prefix}global.b"), Tensor::zeros(&[d]));
}

fn affine(g: &mut Graph, w: TensorId, x: TensorId, b: TensorId) -> Result<TensorId> {
    let y = g.matmul(w, x)?;
    g.add_col_vec(y, b)
}

/// Encodes pixels into the multi-grained visual representation.
///
/// The mid feature map feeds a fully connected layer per grid cell (local
/// columns); the rectified last map is pooled three ways and mapped by one
/// shared fully connected layer (global columns). Full output is
/// `[D, H*W + 3]`; the ablation flags drop either branch.
pub fn encode_image(
    g: &mut Graph,
    leaves: &ImageEncoderLeaves,
    cfg: &ImageEncoderConfig,
    pixels: TensorId,
    include_local: bool,
    include_global: bool,
) -> Result<VisualRepresentation> {
    let shape = g.value(pixels).shape().to_vec();
    if shape != [cfg.in_channels, cfg.input_h(), cfg.input_w()] {
        return Err(Error::dim(
            "encode_image",
            format!(
                "input shape {:?}, config expects [{}, {}, {}]",
                shape,
                cfg.in_channels,
                cfg.input_h(),
                cfg.input_w()
            ),
        ));
    }
    if !include_local && !include_global {
        return Err(Error::Config("cannot ablate both visual branches".into()));
    }

    let mid = g.conv2d(pixels, leaves.conv1_w, leaves.conv1_b, 2, 1)?;
    let mid = g.relu(mid);

    let mut parts: Vec<TensorId> = Vec::new();
    if include_local {
        let flat = g.reshape(mid, &[cfg.mid_channels, cfg.grid_h * cfg.grid_w])?;
        parts.push(affine(g, leaves.local_w, flat, leaves.local_b)?);
    }
    if include_global {
        // Rectified before pooling, which also satisfies the gem domain.
        let last = g.conv2d(mid, leaves.conv2_w, leaves.conv2_b, 2, 1)?;
        let last = g.relu(last);
        for kind in [PoolKind::Max, PoolKind::Avg, PoolKind::Gem] {
            let pooled = g.pool(last, kind, cfg.gem_p)?;
            let col = g.reshape(pooled, &[cfg.last_channels, 1])?;
            parts.push(affine(g, leaves.global_w, col, leaves.global_b)?);
        }
    }
    let mat = g.concat_cols(&parts)?;
    let cols = g.value(mat).cols();
    Ok(VisualRepresentation { mat, cols })
}

/// Node handles for the text encoder parameters.
pub struct TextEncoderLeaves {
    pub embed: TensorId,
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub bias: TensorId,
    pub word_w: TensorId,
    pub word_b: TensorId,
    pub sent_w: TensorId,
    pub sent_b: TensorId,
}

impl TextEncoderLeaves {
    pub fn from_map(map: &BTreeMap<String, TensorId>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            map.get(&format!("{prefix}{name}"))
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{prefix}{name}`")))
        };
        Ok(TextEncoderLeaves {
            embed: get("embed")?,
            w_ih: get("lstm.w_ih")?,
            w_hh: get("lstm.w_hh")?,
            bias: get("lstm.bias")?,
            word_w: get("word.w")?,
            word_b: get("word.b")?,
            sent_w: get("sent.w")?,
            sent_b: get("sent.b")?,
        })
    }
}

/// Inserts freshly initialized text encoder parameters under `prefix`.
/// LSTM weights are U(-0.08, 0.08) with the forget-gate bias at +1.
pub fn init_text_params(
    store: &mut ParamStore,
    cfg: &TextEncoderConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) {
    let (v, e, h, d) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.dim);
    store.insert(format!("{prefix}embed"), Tensor::fan_in_uniform(&[e, v], e, rng));
    store.insert(format!("{prefix}lstm.w_ih"), Tensor::uniform(&[4 * h, e], -0.08, 0.08, rng));
    store.insert(format!("{prefix}lstm.w_hh"), Tensor::uniform(&[4 * h, h], -0.08, 0.08, rng));
    let mut bias = Tensor::uniform(&[4 * h], -0.08, 0.08, rng);
    for i in h..2 * h {
        bias.data_mut()[i] += 1.0;
    }
    store.insert(format!("{prefix}lstm.bias"), bias);
    store.insert(format!("{prefix}word.w"), Tensor::fan_in_uniform(&[d, h], h, rng));
    store.insert(format!("{prefix}word.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}sent.w"), Tensor::fan_in_uniform(&[d, h], h, rng));
    store.insert(format!("{prefix}sent.b"), Tensor::zeros(&[d]));
}

/// Encodes a token sequence into the multi-grained textual representation.
///
/// Runs the LSTM over the valid prefix (pads must be trailing), maps every
/// hidden state through the word-level layer and the last valid hidden
/// state through the sentence-level layer. Full output is `[D, K + 1]`
/// where padded word columns are zero and masked out.
pub fn encode_text(
    g: &mut Graph,
    leaves: &TextEncoderLeaves,
    cfg: &TextEncoderConfig,
    token_ids: &[u32],
    include_word: bool,
    include_sentence: bool,
) -> Result<TextualRepresentation> {
    if token_ids.is_empty() {
        return Err(Error::dim("encode_text", "empty token sequence".to_string()));
    }
    if token_ids.len() > cfg.max_len {
        return Err(Error::dim(
            "encode_text",
            format!("sequence length {} exceeds max {}", token_ids.len(), cfg.max_len),
        ));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| (t as usize) >= cfg.vocab_size) {
        return Err(Error::Vocab(format!("token id {bad} out of vocabulary")));
    }
    let valid_len = token_ids.iter().position(|&t| t == cfg.pad_id).unwrap_or(token_ids.len());
    if valid_len == 0 {
        return Err(Error::dim("encode_text", "sequence starts with padding".to_string()));
    }
    if token_ids[valid_len..].iter().any(|&t| t != cfg.pad_id) {
        return Err(Error::dim("encode_text", "padding must be trailing".to_string()));
    }
    if !include_word && !include_sentence {
        return Err(Error::Config("cannot ablate both textual branches".into()));
    }

    let h = cfg.hidden_dim;
    let ids: Vec<usize> = token_ids[..valid_len].iter().map(|&t| t as usize).collect();
    let embeds = g.gather_cols(leaves.embed, &ids)?;

    let mut h_prev = g.constant(Tensor::zeros(&[h, 1]));
    let mut c_prev = g.constant(Tensor::zeros(&[h, 1]));
    let mut hidden: Vec<TensorId> = Vec::with_capacity(valid_len);
    for t in 0..valid_len {
        let x_t = g.slice_cols(embeds, t, 1)?;
        let from_x = g.matmul(leaves.w_ih, x_t)?;
        let from_h = g.matmul(leaves.w_hh, h_prev)?;
        let pre = g.add(from_x, from_h)?;
        let gates = g.add_col_vec(pre, leaves.bias)?;
        let i_gate = g.slice_rows(gates, 0, h)?;
        let f_gate = g.slice_rows(gates, h, h)?;
        let g_gate = g.slice_rows(gates, 2 * h, h)?;
        let o_gate = g.slice_rows(gates, 3 * h, h)?;
        let i_gate = g.sigmoid(i_gate);
        let f_gate = g.sigmoid(f_gate);
        let g_gate = g.tanh(g_gate);
        let o_gate = g.sigmoid(o_gate);
        let keep = g.mul(f_gate, c_prev)?;
        let write = g.mul(i_gate, g_gate)?;
        c_prev = g.add(keep, write)?;
        let c_act = g.tanh(c_prev);
        h_prev = g.mul(o_gate, c_act)?;
        hidden.push(h_prev);
    }

    let mut parts: Vec<TensorId> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    if include_word {
        let states = g.concat_cols(&hidden)?;
        parts.push(affine(g, leaves.word_w, states, leaves.word_b)?);
        mask.extend(std::iter::repeat_n(true, valid_len));
        let n_pads = token_ids.len() - valid_len;
        if n_pads > 0 {
            parts.push(g.constant(Tensor::zeros(&[cfg.dim, n_pads])));
            mask.extend(std::iter::repeat_n(false, n_pads));
        }
    }
    if include_sentence {
        parts.push(affine(g, leaves.sent_w, hidden[valid_len - 1], leaves.sent_b)?);
        mask.push(true);
    }
    let mat = g.concat_cols(&parts)?;
    Ok(TextualRepresentation { mat, mask, valid_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, GradCheckConfig, ScalarFn};
    use rand::SeedableRng;

    fn image_cfg() -> ImageEncoderConfig {
        ImageEncoderConfig::new(3, 6, 8, 4, 4, 16).unwrap()
    }

    fn text_cfg() -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: 37,
            embed_dim: 12,
            hidden_dim: 14,
            dim: 16,
            max_len: 24,
            pad_id: 0,
        }
    }

    fn image_store(cfg: &ImageEncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_image_params(&mut store, cfg, "img.", &mut rng);
        store
    }

    fn text_store(cfg: &TextEncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_text_params(&mut store, cfg, "txt.", &mut rng);
        store
    }

    fn run_image(
        cfg: &ImageEncoderConfig,
        store: &ParamStore,
        pixels: &Tensor,
        local: bool,
        global: bool,
    ) -> Tensor {
        let mut g = Graph::new();
        let map = store.leaves(&mut g, false);
        let leaves = ImageEncoderLeaves::from_map(&map, "img.").unwrap();
        let px = g.constant(pixels.clone());
        let rep = encode_image(&mut g, &leaves, cfg, px, local, global).unwrap();
        g.detach(rep.mat)
    }

    #[test]
    fn visual_columns_follow_the_grid_law() {
        let cfg = image_cfg();
        let store = image_store(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pixels = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let full = run_image(&cfg, &store, &pixels, true, true);
        assert_eq!(full.shape(), &[16, 19]); // 4*4 + 3
        let local_only = run_image(&cfg, &store, &pixels, true, false);
        assert_eq!(local_only.shape(), &[16, 16]);
        let global_only = run_image(&cfg, &store, &pixels, false, true);
        assert_eq!(global_only.shape(), &[16, 3]);
    }

    #[test]
    fn zero_images_share_the_bias_response() {
        let cfg = image_cfg();
        let store = image_store(&cfg, 3);
        let zero = Tensor::zeros(&[3, 8, 8]);
        let a = run_image(&cfg, &store, &zero, true, true);
        let b = run_image(&cfg, &store, &zero, true, true);
        assert_eq!(a, b);
    }

    #[test]
    fn image_encoding_is_deterministic_on_equal_inputs() {
        let cfg = image_cfg();
        let store = image_store(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pixels = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        assert_eq!(
            run_image(&cfg, &store, &pixels, true, true),
            run_image(&cfg, &store, &pixels, true, true)
        );
    }

    #[test]
    fn image_encoder_rejects_wrong_grid() {
        let cfg = image_cfg();
        let store = image_store(&cfg, 6);
        let mut g = Graph::new();
        let map = store.leaves(&mut g, false);
        let leaves = ImageEncoderLeaves::from_map(&map, "img.").unwrap();
        let px = g.constant(Tensor::zeros(&[3, 6, 8]));
        assert!(encode_image(&mut g, &leaves, &cfg, px, true, true).is_err());
    }

    #[test]
    fn image_gradients_match_finite_differences() {
        let cfg = image_cfg();
        let mut store = image_store(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        store.insert("pixels", Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng));
        let f: ScalarFn = &|g, map| {
            let leaves = ImageEncoderLeaves::from_map(map, "img.")?;
            let rep = encode_image(g, &leaves, &image_cfg(), map["pixels"], true, true)?;
            let sq = g.mul(rep.mat, rep.mat)?;
            Ok(g.sum_all(sq))
        };
        let err = grad_check(f, &store, &GradCheckConfig { step: 1e-5, probes: 300, seed: 9 }).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    fn run_text(
        cfg: &TextEncoderConfig,
        store: &ParamStore,
        ids: &[u32],
        word: bool,
        sent: bool,
    ) -> (Tensor, Vec<bool>) {
        let mut g = Graph::new();
        let map = store.leaves(&mut g, false);
        let leaves = TextEncoderLeaves::from_map(&map, "txt.").unwrap();
        let rep = encode_text(&mut g, &leaves, cfg, ids, word, sent).unwrap();
        (g.detach(rep.mat), rep.mask)
    }

    #[test]
    fn textual_columns_follow_the_length_law() {
        let cfg = text_cfg();
        let store = text_store(&cfg, 10);
        let (full, mask) = run_text(&cfg, &store, &[5, 9, 2, 17, 30], true, true);
        assert_eq!(full.shape(), &[16, 6]); // K + 1
        assert_eq!(mask, vec![true; 6]);
        let (words, _) = run_text(&cfg, &store, &[5, 9, 2, 17, 30], true, false);
        assert_eq!(words.shape(), &[16, 5]);
        let (sent, mask) = run_text(&cfg, &store, &[5, 9, 2, 17, 30], false, true);
        assert_eq!(sent.shape(), &[16, 1]);
        assert_eq!(mask, vec![true]);
    }

    #[test]
    fn trailing_pads_leave_the_sentence_column_unchanged() {
        let cfg = text_cfg();
        let store = text_store(&cfg, 11);
        let (bare, _) = run_text(&cfg, &store, &[5, 9, 2], true, true);
        let (padded, mask) = run_text(&cfg, &store, &[5, 9, 2, 0, 0], true, true);
        assert_eq!(padded.shape(), &[16, 6]);
        assert_eq!(mask, vec![true, true, true, false, false, true]);
        // Word columns for the valid prefix and the sentence column agree.
        for r in 0..16 {
            for c in 0..3 {
                assert_eq!(bare.at2(r, c), padded.at2(r, c));
            }
            assert_eq!(bare.at2(r, 3), padded.at2(r, 5));
        }
        // Padded word columns are zero.
        for r in 0..16 {
            assert_eq!(padded.at2(r, 3), 0.0);
            assert_eq!(padded.at2(r, 4), 0.0);
        }
    }

    #[test]
    fn text_encoder_rejects_bad_sequences() {
        let cfg = text_cfg();
        let store = text_store(&cfg, 12);
        let mut g = Graph::new();
        let map = store.leaves(&mut g, false);
        let leaves = TextEncoderLeaves::from_map(&map, "txt.").unwrap();
        assert!(encode_text(&mut g, &leaves, &cfg, &[], true, true).is_err());
        assert!(encode_text(&mut g, &leaves, &cfg, &[40], true, true).is_err());
        assert!(encode_text(&mut g, &leaves, &cfg, &[0, 5], true, true).is_err());
        assert!(encode_text(&mut g, &leaves, &cfg, &[5, 0, 7], true, true).is_err());
        assert!(encode_text(&mut g, &leaves, &cfg, &[1; 25], true, true).is_err());
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let cfg = text_cfg();
        let store = text_store(&cfg, 13);
        assert_eq!(
            run_text(&cfg, &store, &[3, 1, 8, 8, 21], true, true),
            run_text(&cfg, &store, &[3, 1, 8, 8, 21], true, true)
        );
    }

    #[test]
    fn text_gradients_match_finite_differences() {
        let cfg = text_cfg();
        let store = text_store(&cfg, 14);
        let f: ScalarFn = &|g, map| {
            let leaves = TextEncoderLeaves::from_map(map, "txt.")?;
            let rep = encode_text(g, &leaves, &text_cfg(), &[4, 22, 7, 13], true, true)?;
            let sq = g.mul(rep.mat, rep.mat)?;
            Ok(g.sum_all(sq))
        };
        let err = grad_check(f, &store, &GradCheckConfig { step: 1e-5, probes: 300, seed: 15 }).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }
}
