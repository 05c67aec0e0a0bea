//! The assembled composed-image-retrieval model: image and text encoders,
//! matching tokens, and the shared Transformer aggregator, with one named
//! parameter store behind all of them.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_image, encode_text, init_image_params, init_text_params, ImageEncoderConfig,
    ImageEncoderLeaves, TextEncoderConfig, TextEncoderLeaves,
};
use crate::error::{Error, Result};
use crate::matcher::{
    aggregate, assemble_query, assemble_target, init_transformer_params, MatchingTokens,
    ScoreRule, TokenMatrix, TokenMatrixIds, TransformerConfig, TransformerLeaves,
};
use crate::numerics::{AdamState, Checkpoint, Graph, ParamStore, Tensor, TensorId};
use crate::objective::LossConfig;
use crate::seeds::derive_seed;

/// Table-3-style ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Use a single matching token (U = 1).
    pub one_factor: bool,
    /// Score by cosine of column-averaged token matrices instead of the
    /// flattened inner product.
    pub avepool: bool,
    /// Drop the orthogonal regularizer (lambda = 0).
    pub no_ortho: bool,
    /// Drop global visual and sentence-level textual features.
    pub no_global: bool,
    /// Drop local visual and word-level textual features.
    pub no_local: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.no_global && self.no_local {
            return Err(Error::Config("cannot ablate both global and local branches".into()));
        }
        Ok(())
    }
}

/// Full model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimnConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub transformer: TransformerConfig,
    pub loss: LossConfig,
    /// Number of matching tokens U (before the one_factor override).
    pub tokens: usize,
    pub ablation: Ablation,
}

impl LimnConfig {
    /// Desk-scale defaults: D = 32, U = 8, 2 layers, 4 heads.
    pub fn desk_default(vocab_size: usize) -> Self {
        LimnConfig {
            image: ImageEncoderConfig::new(3, 8, 8, 4, 4, 32).expect("desk image config"),
            text: TextEncoderConfig {
                vocab_size,
                embed_dim: 32,
                hidden_dim: 32,
                dim: 32,
                max_len: crate::synthio::MAX_CAPTION_LEN,
                pad_id: 0,
            },
            transformer: TransformerConfig::new(2, 4, 32).expect("desk transformer config"),
            loss: LossConfig::default(),
            tokens: 8,
            ablation: Ablation::default(),
        }
    }

    /// U after the one_factor override.
    pub fn effective_tokens(&self) -> usize {
        if self.ablation.one_factor {
            1
        } else {
            self.tokens
        }
    }

    /// Lambda after the no_ortho override.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_ortho {
            0.0
        } else {
            self.loss.lambda
        }
    }

    pub fn score_rule(&self) -> ScoreRule {
        if self.ablation.avepool {
            ScoreRule::AveragePooled
        } else {
            ScoreRule::MultiFaceted
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.transformer.validate()?;
        self.loss.validate()?;
        self.ablation.validate()?;
        if self.tokens == 0 {
            return Err(Error::Config("need at least one matching token".into()));
        }
        if self.image.dim != self.transformer.dim || self.text.dim != self.transformer.dim {
            return Err(Error::Config(format!(
                "feature dims disagree: image {}, text {}, transformer {}",
                self.image.dim, self.text.dim, self.transformer.dim
            )));
        }
        Ok(())
    }
}

/// Model = config + named parameters.
#[derive(Debug, Clone)]
pub struct LimnModel {
    pub config: LimnConfig,
    pub params: ParamStore,
}

/// Node handles for one forward pass.
pub struct LimnLeaves {
    pub map: BTreeMap<String, TensorId>,
    image: ImageEncoderLeaves,
    text: TextEncoderLeaves,
    transformer: TransformerLeaves,
    tokens: TensorId,
}

impl LimnModel {
    /// Fresh seeded initialization.
    pub fn init(config: LimnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        use rand::SeedableRng;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "limn-init"));
        init_image_params(&mut params, &config.image, "img.", &mut rng);
        init_text_params(&mut params, &config.text, "txt.", &mut rng);
        init_transformer_params(&mut params, &config.transformer, "agg.", &mut rng);
        let d = config.transformer.dim;
        let u = config.effective_tokens();
        params.insert("tokens", Tensor::fan_in_uniform(&[d, u], d, &mut rng));
        Ok(LimnModel { config, params })
    }

    pub fn to_checkpoint(&self, optimizer: Option<AdamState>) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.params.clone(), optimizer, serde_json::to_value(&self.config)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: LimnConfig = serde_json::from_value(ckpt.config.clone())?;
        config.validate()?;
        Ok(LimnModel { config, params: ckpt.params.clone() })
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Inserts all parameters into `graph` and resolves the typed handles.
    pub fn leaves(&self, graph: &mut Graph, requires_grad: bool) -> Result<LimnLeaves> {
        let map = self.params.leaves(graph, requires_grad);
        self.leaves_from_map(&map)
    }

    /// Resolves typed handles from already-inserted parameter leaves.
    pub fn leaves_from_map(&self, map: &BTreeMap<String, TensorId>) -> Result<LimnLeaves> {
        Ok(LimnLeaves {
            image: ImageEncoderLeaves::from_map(map, "img.")?,
            text: TextEncoderLeaves::from_map(map, "txt.")?,
            transformer: TransformerLeaves::from_map(map, "agg.", self.config.transformer.layers)?,
            tokens: *map.get("tokens").ok_or_else(|| Error::Checkpoint("missing `tokens`".into()))?,
            map: map.clone(),
        })
    }

    /// Query path: reference pixels + caption -> aggregated token matrix.
    pub fn embed_query_ids(
        &self,
        g: &mut Graph,
        leaves: &LimnLeaves,
        pixels: &Tensor,
        caption: &[u32],
    ) -> Result<TokenMatrixIds> {
        let ab = self.config.ablation;
        let px = g.constant(pixels.clone());
        let visual =
            encode_image(g, &leaves.image, &self.config.image, px, !ab.no_local, !ab.no_global)?;
        let textual =
            encode_text(g, &leaves.text, &self.config.text, caption, !ab.no_local, !ab.no_global)?;
        let tokens = MatchingTokens::new(g, leaves.tokens)?;
        let seq = assemble_query(g, &visual, &textual, &tokens)?;
        aggregate(g, &seq, &self.config.transformer, &leaves.transformer)
    }

    /// Target path: candidate pixels -> aggregated token matrix.
    pub fn embed_target_ids(
        &self,
        g: &mut Graph,
        leaves: &LimnLeaves,
        pixels: &Tensor,
    ) -> Result<TokenMatrixIds> {
        let ab = self.config.ablation;
        let px = g.constant(pixels.clone());
        let visual =
            encode_image(g, &leaves.image, &self.config.image, px, !ab.no_local, !ab.no_global)?;
        let tokens = MatchingTokens::new(g, leaves.tokens)?;
        let seq = assemble_target(g, &visual, &tokens)?;
        aggregate(g, &seq, &self.config.transformer, &leaves.transformer)
    }

    /// Detached query embedding on a throwaway graph.
    pub fn embed_query(&self, pixels: &Tensor, caption: &[u32]) -> Result<TokenMatrix> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g, false)?;
        let ids = self.embed_query_ids(&mut g, &leaves, pixels, caption)?;
        Ok(TokenMatrix::from_graph(&g, &ids))
    }

    /// Detached target embedding on a throwaway graph.
    pub fn embed_target(&self, pixels: &Tensor) -> Result<TokenMatrix> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g, false)?;
        let ids = self.embed_target_ids(&mut g, &leaves, pixels)?;
        Ok(TokenMatrix::from_graph(&g, &ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> LimnConfig {
        let mut cfg = LimnConfig::desk_default(37);
        cfg.image = ImageEncoderConfig::new(3, 4, 4, 4, 4, 16).unwrap();
        cfg.text.embed_dim = 8;
        cfg.text.hidden_dim = 8;
        cfg.text.dim = 16;
        cfg.transformer = TransformerConfig::new(1, 2, 16).unwrap();
        cfg.tokens = 4;
        cfg
    }

    fn pixels(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = LimnModel::init(tiny_config(), 7).unwrap();
        let b = LimnModel::init(tiny_config(), 7).unwrap();
        let c = LimnModel::init(tiny_config(), 8).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn one_factor_forces_a_single_token() {
        let mut cfg = tiny_config();
        cfg.ablation.one_factor = true;
        let model = LimnModel::init(cfg, 1).unwrap();
        assert_eq!(model.params.get("tokens").unwrap().shape(), &[16, 1]);
    }

    #[test]
    fn conflicting_ablations_are_rejected() {
        let mut cfg = tiny_config();
        cfg.ablation.no_global = true;
        cfg.ablation.no_local = true;
        assert!(LimnModel::init(cfg, 1).is_err());
    }

    #[test]
    fn embeddings_have_token_shape_and_are_deterministic() {
        let model = LimnModel::init(tiny_config(), 3).unwrap();
        let q1 = model.embed_query(&pixels(1), &[5, 9, 2]).unwrap();
        let q2 = model.embed_query(&pixels(1), &[5, 9, 2]).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(q1.raw().shape(), &[16, 4]);
        let t = model.embed_target(&pixels(2)).unwrap();
        assert_eq!(t.raw().shape(), &[16, 4]);
    }

    #[test]
    fn ablated_branches_still_produce_token_outputs() {
        for (no_global, no_local) in [(true, false), (false, true)] {
            let mut cfg = tiny_config();
            cfg.ablation.no_global = no_global;
            cfg.ablation.no_local = no_local;
            let model = LimnModel::init(cfg, 4).unwrap();
            let q = model.embed_query(&pixels(3), &[5, 9, 2]).unwrap();
            assert_eq!(q.raw().shape(), &[16, 4]);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let model = LimnModel::init(tiny_config(), 5).unwrap();
        let ckpt = model.to_checkpoint(Some(AdamState::new(1e-4))).unwrap();
        let restored = LimnModel::from_checkpoint(&ckpt).unwrap();
        assert_eq!(restored.config, model.config);
        assert_eq!(restored.content_hash(), model.content_hash());
    }
}
