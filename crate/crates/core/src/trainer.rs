//! Supervised training of the matching model and retrieval evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::TokenMatrix;
use crate::model::{LimnConfig, LimnModel};
use crate::numerics::{adam_step, AdamState, Checkpoint, Graph, Tensor};
use crate::objective::{total_loss_graph, LossConfig};
use crate::seeds::derive_seed;
use crate::synthio::{Query, Triplet, World};

/// Training schedule and model configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied once at `decay_epoch`.
    pub decay_factor: f64,
    pub decay_epoch: usize,
    pub seed: u64,
    pub model: LimnConfig,
}

impl TrainConfig {
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            decay_factor: 0.1,
            decay_epoch: 10,
            seed,
            model: LimnConfig::desk_default(vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        self.model.validate()
    }
}

/// Recall at the requested ranks plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub gallery_size: usize,
    pub query_count: usize,
    pub average: f64,
}

impl RecallReport {
    fn from_ranks(ranks: &[usize], ks: &[usize], gallery_size: usize) -> Self {
        let recalls: Vec<f64> = ks
            .iter()
            .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
            .collect();
        let average = recalls.iter().sum::<f64>() / recalls.len().max(1) as f64;
        RecallReport { ks: ks.to_vec(), recalls, gallery_size, query_count: ranks.len(), average }
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];

/// Per-run training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Full-pass mean loss before any update.
    pub initial_loss: f64,
    /// Per-epoch mean training loss.
    pub loss_curve: Vec<f64>,
    /// Per-epoch validation recall, when validation queries were supplied.
    pub epoch_reports: Vec<RecallReport>,
}

/// Gallery embeddings reusable across evaluations of one checkpoint.
#[derive(Debug, Clone, Default)]
pub struct GalleryCache {
    hash: String,
    embeddings: Vec<(u32, TokenMatrix)>,
}

/// Embeds every catalog item through the target path, in parallel.
/// The result is ordered by catalog position regardless of thread count.
pub fn gallery_embeddings(model: &LimnModel, world: &World) -> Result<Vec<(u32, TokenMatrix)>> {
    world
        .items
        .par_iter()
        .map(|item| {
            let pixels = world.render_item(item.id)?;
            Ok((item.id, model.embed_target(&pixels)?))
        })
        .collect()
}

fn cached_gallery<'c>(
    model: &LimnModel,
    world: &World,
    cache: &'c mut GalleryCache,
) -> Result<&'c [(u32, TokenMatrix)]> {
    let hash = model.content_hash();
    if cache.hash != hash || cache.embeddings.len() != world.items.len() {
        cache.embeddings = gallery_embeddings(model, world)?;
        cache.hash = hash;
    }
    Ok(&cache.embeddings)
}

/// 1-based rank of `target_id` under descending score, ties broken by
/// ascending gallery id.
pub fn rank_of_target(scored: &[(u32, f64)], target_id: u32) -> Result<usize> {
    let target = scored
        .iter()
        .find(|(id, _)| *id == target_id)
        .ok_or_else(|| Error::MissingGroundTruth(format!("target {target_id} not in gallery")))?;
    let rank = scored
        .iter()
        .filter(|(id, s)| {
            *s > target.1 || (*s == target.1 && *id < target_id)
        })
        .count();
    Ok(rank + 1)
}

/// Ranks the full gallery for every query and reports R@k. The gallery must
/// contain each query's ground-truth target.
pub fn evaluate(
    model: &LimnModel,
    world: &World,
    queries: &[Query],
    ks: &[usize],
    cache: &mut GalleryCache,
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::Config("no queries to evaluate".into()));
    }
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ks must be strictly increasing and non-empty".into()));
    }
    let rule = model.config.score_rule();
    let gallery = cached_gallery(model, world, cache)?;
    let ranks: Vec<usize> = queries
        .par_iter()
        .map(|query| {
            if !world.contains(query.target_id) {
                return Err(Error::MissingGroundTruth(format!(
                    "query ref={} target={}",
                    query.ref_id, query.target_id
                )));
            }
            let pixels = world.render_item(query.ref_id)?;
            let q = model.embed_query(&pixels, &query.caption)?;
            let scored: Vec<(u32, f64)> = gallery
                .iter()
                .map(|(id, t)| Ok((*id, rule.score(&q, t)?)))
                .collect::<Result<_>>()?;
            rank_of_target(&scored, query.target_id)
        })
        .collect::<Result<_>>()?;
    Ok(RecallReport::from_ranks(&ranks, ks, gallery.len()))
}

/// Match score of one triplet under the model's scoring rule.
pub fn score_triplet(model: &LimnModel, world: &World, triplet: &Triplet) -> Result<f64> {
    let ref_pixels = world.render_item(triplet.ref_id)?;
    let tgt_pixels = world.render_item(triplet.tgt_id)?;
    let q = model.embed_query(&ref_pixels, &triplet.caption)?;
    let t = model.embed_target(&tgt_pixels)?;
    model.config.score_rule().score(&q, &t)
}

fn batch_loss_config(cfg: &TrainConfig, batch: usize) -> LossConfig {
    LossConfig {
        temperature: cfg.model.loss.temperature,
        lambda: cfg.model.effective_lambda(),
        batch_size: batch,
    }
}

/// Forward pass over one batch; returns the loss node.
fn batch_loss_graph(
    g: &mut Graph,
    model: &LimnModel,
    world: &World,
    batch: &[&Triplet],
    cfg: &TrainConfig,
    requires_grad: bool,
) -> Result<(crate::numerics::TensorId, BTreeMap<String, crate::numerics::TensorId>)> {
    let leaves = model.leaves(g, requires_grad)?;
    let mut queries = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for triplet in batch {
        let ref_pixels = world.render_item(triplet.ref_id)?;
        let tgt_pixels = world.render_item(triplet.tgt_id)?;
        queries.push(model.embed_query_ids(g, &leaves, &ref_pixels, &triplet.caption)?);
        targets.push(model.embed_target_ids(g, &leaves, &tgt_pixels)?);
    }
    let loss = total_loss_graph(g, &queries, &targets, &batch_loss_config(cfg, batch.len()))?;
    Ok((loss, leaves.map))
}

fn mean_loss_over(model: &LimnModel, world: &World, triplets: &[Triplet], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let refs: Vec<&Triplet> = triplets.iter().collect();
    for batch in refs.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let (loss, _) = batch_loss_graph(&mut g, model, world, batch, cfg, false)?;
        total += g.value(loss).data()[0] * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// Trains from scratch on `triplets`. When validation queries are given,
/// records a RecallReport after every epoch (gallery = full catalog).
pub fn train(
    world: &World,
    triplets: &[Triplet],
    val_queries: Option<&[Query]>,
    ks: &[usize],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainMetrics)> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::Config("cannot train on an empty triplet set".into()));
    }
    for t in triplets {
        t.validate(world.vocab.len())?;
    }
    let mut model = LimnModel::init(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-shuffle"));

    let initial_loss = mean_loss_over(&model, world, triplets, cfg)?;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut epoch_reports = Vec::new();
    let mut cache = GalleryCache::default();

    for epoch in 1..=cfg.epochs {
        if epoch == cfg.decay_epoch {
            adam.lr *= cfg.decay_factor;
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Triplet> = chunk.iter().map(|&i| &triplets[i]).collect();
            let mut g = Graph::new();
            let (loss, leaf_map) = batch_loss_graph(&mut g, &model, world, &batch, cfg, true)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Train {
                    param: "loss".into(),
                    detail: format!("non-finite loss {loss_value} at epoch {epoch}"),
                });
            }
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (name, id) in &leaf_map {
                if let Some(grad) = g.grad(*id) {
                    grads.insert(name.clone(), grad);
                }
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            epoch_total += loss_value * batch.len() as f64;
        }
        loss_curve.push(epoch_total / triplets.len() as f64);

        if let Some(queries) = val_queries {
            epoch_reports.push(evaluate(&model, world, queries, ks, &mut cache)?);
        }
    }

    let metrics = TrainMetrics { initial_loss, loss_curve, epoch_reports };
    Ok((model.to_checkpoint(Some(adam))?, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ImageEncoderConfig;
    use crate::matcher::TransformerConfig;
    use crate::synthio::{make_triplets, queries_of, split_triplets};

    fn tiny_train_config(world: &World, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk_default(world.vocab.len(), seed);
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.model.image = ImageEncoderConfig::new(3, 4, 4, 4, 4, 16).unwrap();
        cfg.model.text.embed_dim = 8;
        cfg.model.text.hidden_dim = 8;
        cfg.model.text.dim = 16;
        cfg.model.transformer = TransformerConfig::new(1, 2, 16).unwrap();
        cfg.model.tokens = 4;
        cfg
    }

    fn tiny_world() -> (World, Vec<Triplet>) {
        let world = World::generate(30, 3, 0.02, 5).unwrap();
        let triplets = make_triplets(&world.items, &world.slots, &world.vocab, 48, 2, 5).unwrap();
        (world, triplets)
    }

    #[test]
    fn rank_of_target_matches_hand_computation() {
        // Gallery scores {0.9, 0.2, 0.8, 0.1}; the target scores 0.8 and
        // therefore ranks second.
        let scored = vec![(0u32, 0.9), (1, 0.2), (2, 0.8), (3, 0.1)];
        assert_eq!(rank_of_target(&scored, 2).unwrap(), 2);
        assert_eq!(rank_of_target(&scored, 0).unwrap(), 1);
        assert_eq!(rank_of_target(&scored, 3).unwrap(), 4);
        assert!(rank_of_target(&scored, 9).is_err());
    }

    #[test]
    fn ties_break_by_ascending_gallery_id() {
        let scored = vec![(5u32, 0.5), (2, 0.5), (9, 0.5)];
        assert_eq!(rank_of_target(&scored, 2).unwrap(), 1);
        assert_eq!(rank_of_target(&scored, 5).unwrap(), 2);
        assert_eq!(rank_of_target(&scored, 9).unwrap(), 3);
    }

    #[test]
    fn training_is_seed_deterministic_and_loss_decreases() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 11);
        let (ckpt_a, metrics_a) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        let (ckpt_b, metrics_b) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        assert_eq!(metrics_a, metrics_b);
        assert_eq!(ckpt_a.params.content_hash(), ckpt_b.params.content_hash());
        assert!(
            metrics_a.loss_curve[0] < metrics_a.initial_loss,
            "epoch-1 loss {} vs initial {}",
            metrics_a.loss_curve[0],
            metrics_a.initial_loss
        );
    }

    #[test]
    fn evaluation_at_gallery_size_has_full_recall_and_is_monotone() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 13);
        let (ckpt, _) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        let model = LimnModel::from_checkpoint(&ckpt).unwrap();
        let (_, _, test) = split_triplets(&triplets, 13);
        let queries = queries_of(&test);
        let mut cache = GalleryCache::default();
        let ks = vec![1, 5, world.items.len()];
        let report = evaluate(&model, &world, &queries, &ks, &mut cache).unwrap();
        assert_eq!(report.gallery_size, 30);
        assert_eq!(*report.recalls.last().unwrap(), 1.0);
        for w in report.recalls.windows(2) {
            assert!(w[0] <= w[1] + 1e-15);
        }
        assert!(report.recalls.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn evaluation_equals_brute_force_reranking() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 17);
        let (ckpt, _) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        let model = LimnModel::from_checkpoint(&ckpt).unwrap();
        let queries = queries_of(&triplets[..10]);
        let mut cache = GalleryCache::default();
        let ks = vec![1, 3, 10];
        let report = evaluate(&model, &world, &queries, &ks, &mut cache).unwrap();

        // Brute force: recompute every score independently and re-rank by
        // explicit sort.
        let mut ranks = Vec::new();
        for q in &queries {
            let qe = model.embed_query(&world.render_item(q.ref_id).unwrap(), &q.caption).unwrap();
            let mut scored: Vec<(u32, f64)> = world
                .items
                .iter()
                .map(|item| {
                    let te = model.embed_target(&world.render_item(item.id).unwrap()).unwrap();
                    (item.id, crate::matcher::match_score(&qe, &te).unwrap())
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
            });
            let rank = scored.iter().position(|(id, _)| *id == q.target_id).unwrap() + 1;
            ranks.push(rank);
        }
        for (i, &k) in ks.iter().enumerate() {
            let brute = ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
            assert_eq!(report.recalls[i], brute);
        }
    }

    #[test]
    fn evaluation_is_independent_of_parallelism_degree() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 19);
        let (ckpt, _) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        let model = LimnModel::from_checkpoint(&ckpt).unwrap();
        let queries = queries_of(&triplets[..6]);
        let ks = vec![1, 5];

        let sequential = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| {
                let mut cache = GalleryCache::default();
                evaluate(&model, &world, &queries, &ks, &mut cache).unwrap()
            });
        let parallel = {
            let mut cache = GalleryCache::default();
            evaluate(&model, &world, &queries, &ks, &mut cache).unwrap()
        };
        assert_eq!(sequential, parallel);
    }

    #[test]
    fn score_triplet_is_bounded_and_deterministic() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 23);
        let (ckpt, _) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        let model = LimnModel::from_checkpoint(&ckpt).unwrap();
        let u = model.config.effective_tokens() as f64;
        for t in &triplets[..8] {
            let a = score_triplet(&model, &world, t).unwrap();
            let b = score_triplet(&model, &world, t).unwrap();
            assert_eq!(a, b);
            assert!(a.abs() <= u + 1e-9);
        }
    }

    #[test]
    fn unknown_ids_are_reported() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 29);
        let (ckpt, _) = train(&world, &triplets, None, &DEFAULT_KS, &cfg).unwrap();
        let model = LimnModel::from_checkpoint(&ckpt).unwrap();
        let bad = Triplet {
            ref_id: 999,
            tgt_id: 0,
            caption: vec![1],
            provenance: crate::synthio::Provenance::Original,
            score: None,
        };
        assert!(matches!(
            score_triplet(&model, &world, &bad),
            Err(Error::UnknownId(999))
        ));
    }

    #[test]
    fn avepool_changes_scoring_but_not_embeddings() {
        let (world, triplets) = tiny_world();
        let cfg = tiny_train_config(&world, 31);
        let mut ave_cfg = cfg.clone();
        ave_cfg.model.ablation.avepool = true;
        // Same seed: parameters are identical, embeddings are identical.
        let base = LimnModel::init(cfg.model.clone(), 31).unwrap();
        let ave = LimnModel::init(ave_cfg.model.clone(), 31).unwrap();
        assert_eq!(base.content_hash(), ave.content_hash());
        let t = &triplets[0];
        let px = world.render_item(t.ref_id).unwrap();
        assert_eq!(
            base.embed_query(&px, &t.caption).unwrap(),
            ave.embed_query(&px, &t.caption).unwrap()
        );
        let s_base = score_triplet(&base, &world, t).unwrap();
        let s_ave = score_triplet(&ave, &world, t).unwrap();
        assert!((s_base - s_ave).abs() > 1e-9);
    }
}
