//! Iterative dual self-training: mine unlabeled reference-target pairs,
//! caption them with the difference captioner, keep the top-κ pseudo
//! triplets by matching score, retrain both models on the augmented set,
//! and repeat until validation recall stops improving.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{
    caption_metrics, generate_caption, train_captioner, CaptionMetrics, Captioner, CaptionerConfig,
};
use crate::error::{Error, Result};
use crate::matcher::ScoreRule;
use crate::model::LimnModel;
use crate::numerics::Checkpoint;
use crate::seeds::{derive_seed, derive_seed_indexed};
use crate::synthio::io::PairRecord;
use crate::synthio::{apply_diff, parse, queries_of, Provenance, Query, Triplet, World};
use crate::trainer::{self, GalleryCache, RecallReport, TrainConfig};

/// The interface a retrieval model must satisfy to ride the paradigm.
/// Implementations must be deterministic under a seed.
pub trait CirModel {
    type Ckpt: Clone;

    fn name(&self) -> &str;

    /// Train from scratch on the given triplets.
    fn train(&self, world: &World, triplets: &[Triplet], seed: u64) -> Result<Self::Ckpt>;

    /// Matching score of one triplet; higher is better.
    fn score_triplet(&self, ckpt: &Self::Ckpt, world: &World, triplet: &Triplet) -> Result<f64>;

    /// Full-gallery retrieval evaluation.
    fn evaluate(
        &self,
        ckpt: &Self::Ckpt,
        world: &World,
        queries: &[Query],
        ks: &[usize],
    ) -> Result<RecallReport>;

    /// Symmetric image-image similarities, roughly in [-1, 1], for the
    /// mining strategies that need a trained model.
    fn pair_similarities(
        &self,
        ckpt: &Self::Ckpt,
        world: &World,
        pairs: &[(u32, u32)],
    ) -> Result<Vec<f64>>;
}

/// How unlabeled reference-target pairs are excavated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Pair each item with the title maximizing the summed TF-IDF of
    /// overlapping title words.
    TfidfTitle { budget: usize },
    /// Keep random pairs whose model similarity falls within
    /// [mu - sigma, mu + sigma]; the band is estimated from labeled pairs
    /// unless given.
    SimilarityBand { budget: usize, band: Option<(f64, f64)> },
    /// Same-taxon partners plus the most model-similar items.
    TaxonomyVisual { budget: usize, taxon_partners: usize, visual_neighbors: usize },
}

impl MiningStrategy {
    pub fn tfidf(budget: usize) -> Self {
        MiningStrategy::TfidfTitle { budget }
    }

    pub fn similarity_band(budget: usize) -> Self {
        MiningStrategy::SimilarityBand { budget, band: None }
    }

    pub fn taxonomy_visual(budget: usize) -> Self {
        MiningStrategy::TaxonomyVisual { budget, taxon_partners: 2, visual_neighbors: 2 }
    }

    pub fn budget(&self) -> usize {
        match self {
            MiningStrategy::TfidfTitle { budget }
            | MiningStrategy::SimilarityBand { budget, .. }
            | MiningStrategy::TaxonomyVisual { budget, .. } => *budget,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MiningStrategy::TfidfTitle { .. } => "tfidf_title",
            MiningStrategy::SimilarityBand { .. } => "similarity_band",
            MiningStrategy::TaxonomyVisual { .. } => "taxonomy_visual",
        }
    }

    pub fn needs_model(&self) -> bool {
        !matches!(self, MiningStrategy::TfidfTitle { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget() == 0 {
            return Err(Error::Config("mining budget must be >= 1".into()));
        }
        if let MiningStrategy::SimilarityBand { band: Some((mu, sigma)), .. } = self {
            if !mu.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                return Err(Error::Config(format!("invalid similarity band ({mu}, {sigma})")));
            }
        }
        if let MiningStrategy::TaxonomyVisual { taxon_partners, visual_neighbors, .. } = self {
            if *taxon_partners == 0 && *visual_neighbors == 0 {
                return Err(Error::Config("taxonomy_visual needs partners or neighbors".into()));
            }
        }
        Ok(())
    }
}

/// For each title, the partner maximizing the summed TF-IDF score over
/// overlapping words (`tf(w, title_i) * ln(n / df(w))`), excluding itself.
/// Titles with no positively-scored overlap get `None`.
pub fn tfidf_best_partner(titles: &[Vec<String>]) -> Vec<Option<(usize, f64)>> {
    let n = titles.len();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for title in titles {
        let unique: HashSet<&str> = title.iter().map(String::as_str).collect();
        for w in unique {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    let idf: HashMap<&str, f64> =
        df.iter().map(|(&w, &d)| (w, (n as f64 / d as f64).ln())).collect();

    (0..n)
        .map(|i| {
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for w in &titles[i] {
                *tf.entry(w).or_insert(0) += 1;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, other) in titles.iter().enumerate() {
                if j == i {
                    continue;
                }
                let other_words: HashSet<&str> = other.iter().map(String::as_str).collect();
                let sum: f64 = tf
                    .iter()
                    .filter(|(w, _)| other_words.contains(**w))
                    .map(|(w, &count)| count as f64 * idf[*w])
                    .sum();
                if sum > 0.0 && best.is_none_or(|(_, s)| sum > s) {
                    best = Some((j, sum));
                }
            }
            best
        })
        .collect()
}

fn labeled_pairs(triplets: &[Triplet]) -> HashSet<(u32, u32)> {
    triplets.iter().map(|t| (t.ref_id, t.tgt_id)).collect()
}

/// Excavates potential unlabeled reference-target pairs. Pairs already
/// present as labeled reference-target pairs are excluded; output is
/// deterministic under the seed and capped at the strategy budget.
pub fn mine_pairs<M: CirModel>(
    world: &World,
    labeled: &[Triplet],
    strategy: &MiningStrategy,
    model: Option<(&M, &M::Ckpt)>,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    strategy.validate()?;
    if strategy.needs_model() && model.is_none() {
        return Err(Error::Config(format!(
            "strategy `{}` requires a trained model",
            strategy.name()
        )));
    }
    let excluded = labeled_pairs(labeled);
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    let mut out: Vec<PairRecord> = Vec::new();
    let push = |out: &mut Vec<PairRecord>,
                    seen: &mut HashSet<(u32, u32)>,
                    ref_id: u32,
                    tgt_id: u32,
                    stat: Option<f64>| {
        if ref_id != tgt_id
            && !excluded.contains(&(ref_id, tgt_id))
            && seen.insert((ref_id, tgt_id))
        {
            out.push(PairRecord { ref_id, tgt_id, strategy: strategy.name().into(), stat });
        }
    };

    match strategy {
        MiningStrategy::TfidfTitle { budget } => {
            let titles: Vec<Vec<String>> =
                world.items.iter().map(|item| item.title(&world.slots)).collect();
            let ids: Vec<u32> = world.ids();
            let mut tf_cache: Vec<HashMap<&str, usize>> = Vec::with_capacity(titles.len());
            for title in &titles {
                let mut tf: HashMap<&str, usize> = HashMap::new();
                for w in title {
                    *tf.entry(w.as_str()).or_insert(0) += 1;
                }
                tf_cache.push(tf);
            }
            let n = titles.len();
            let mut df: HashMap<&str, usize> = HashMap::new();
            for title in &titles {
                let unique: HashSet<&str> = title.iter().map(String::as_str).collect();
                for w in unique {
                    *df.entry(w).or_insert(0) += 1;
                }
            }
            let idf: HashMap<&str, f64> =
                df.iter().map(|(&w, &d)| (w, (n as f64 / d as f64).ln())).collect();
            for i in 0..n {
                if out.len() >= *budget {
                    break;
                }
                // Best positively-scored partner that is not a labeled pair.
                let mut best: Option<(usize, f64)> = None;
                for j in 0..n {
                    if j == i || excluded.contains(&(ids[i], ids[j])) {
                        continue;
                    }
                    let other: HashSet<&str> = titles[j].iter().map(String::as_str).collect();
                    let sum: f64 = tf_cache[i]
                        .iter()
                        .filter(|(w, _)| other.contains(**w))
                        .map(|(w, &count)| count as f64 * idf[*w])
                        .sum();
                    if sum > 0.0 && best.is_none_or(|(_, s)| sum > s) {
                        best = Some((j, sum));
                    }
                }
                if let Some((j, sum)) = best {
                    push(&mut out, &mut seen, ids[i], ids[j], Some(sum));
                }
            }
        }
        MiningStrategy::SimilarityBand { budget, band } => {
            let (port, ckpt) = model.expect("checked above");
            let (mu, sigma) = match band {
                Some(b) => *b,
                None => {
                    if labeled.is_empty() {
                        return Err(Error::Config(
                            "similarity band estimation needs labeled pairs".into(),
                        ));
                    }
                    let pairs: Vec<(u32, u32)> =
                        labeled.iter().map(|t| (t.ref_id, t.tgt_id)).collect();
                    let sims = port.pair_similarities(ckpt, world, &pairs)?;
                    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
                    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                        / sims.len() as f64;
                    (mean, var.sqrt())
                }
            };
            let ids = world.ids();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mine-band"));
            let mut attempts = 0usize;
            let max_attempts = budget.saturating_mul(200).max(1000);
            while out.len() < *budget && attempts < max_attempts {
                let chunk = (*budget - out.len()).clamp(1, 256);
                let candidates: Vec<(u32, u32)> = (0..chunk)
                    .map(|_| {
                        let a = ids[rng.random_range(0..ids.len())];
                        let b = ids[rng.random_range(0..ids.len())];
                        (a, b)
                    })
                    .collect();
                attempts += chunk;
                let sims = port.pair_similarities(ckpt, world, &candidates)?;
                for ((a, b), sim) in candidates.into_iter().zip(sims) {
                    if out.len() >= *budget {
                        break;
                    }
                    if a != b && sim >= mu - sigma && sim <= mu + sigma {
                        push(&mut out, &mut seen, a, b, Some(sim));
                    }
                }
            }
        }
        MiningStrategy::TaxonomyVisual { budget, taxon_partners, visual_neighbors } => {
            let (port, ckpt) = model.expect("checked above");
            let ids = world.ids();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mine-taxon"));
            // Taxon side: seeded same-genus partners as references.
            let genus: Vec<String> =
                world.items.iter().map(|item| item.taxon(&world.slots).1).collect();
            let mut taxon_pairs: Vec<(u32, u32)> = Vec::new();
            for (i, item) in world.items.iter().enumerate() {
                let mut candidates: Vec<u32> = world
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i && genus[*j] == genus[i])
                    .map(|(_, other)| other.id)
                    .collect();
                for _ in 0..*taxon_partners {
                    if candidates.is_empty() {
                        break;
                    }
                    let pick = rng.random_range(0..candidates.len());
                    taxon_pairs.push((candidates.swap_remove(pick), item.id));
                }
            }
            // Visual side: top neighbors by model similarity as references.
            let mut all_pairs: Vec<(u32, u32)> = Vec::new();
            for &a in &ids {
                for &b in &ids {
                    if a != b {
                        all_pairs.push((a, b));
                    }
                }
            }
            let sims = port.pair_similarities(ckpt, world, &all_pairs)?;
            let mut by_target: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
            for ((a, b), sim) in all_pairs.into_iter().zip(sims) {
                by_target.entry(b).or_default().push((a, sim));
            }
            let mut visual_pairs: Vec<(u32, u32, f64)> = Vec::new();
            for &id in &ids {
                if let Some(neighbors) = by_target.get_mut(&id) {
                    neighbors.sort_by(|x, y| {
                        y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0))
                    });
                    for &(a, sim) in neighbors.iter().take(*visual_neighbors) {
                        visual_pairs.push((a, id, sim));
                    }
                }
            }
            for (a, b) in taxon_pairs {
                if out.len() >= *budget {
                    break;
                }
                push(&mut out, &mut seen, a, b, None);
            }
            for (a, b, sim) in visual_pairs {
                if out.len() >= *budget {
                    break;
                }
                push(&mut out, &mut seen, a, b, Some(sim));
            }
        }
    }
    Ok(out)
}

/// Five-number summary of the pseudo-triplet scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl ScoreSummary {
    fn of(scores: &mut [f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| {
            let rank = (q * scores.len() as f64).ceil().max(1.0) as usize;
            scores[rank - 1]
        };
        Some(ScoreSummary {
            min: scores[0],
            q1: pick(0.25),
            median: pick(0.5),
            q3: pick(0.75),
            max: scores[scores.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub generated: usize,
    pub retained: usize,
    pub score_summary: Option<ScoreSummary>,
}

/// Captions every mined pair, scores every pseudo triplet with the
/// retrieval model, and retains the top `min(kappa, |pairs|)` by score
/// (ties by ascending (ref, tgt)).
pub fn build_pseudo_triplets<M: CirModel>(
    world: &World,
    pairs: &[PairRecord],
    captioner: &Captioner,
    cir: (&M, &M::Ckpt),
    kappa: usize,
) -> Result<(Vec<Triplet>, FilterStats)> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to build pseudo triplets from".into()));
    }
    if kappa == 0 {
        return Err(Error::Config("kappa must be >= 1".into()));
    }
    let (port, ckpt) = cir;
    let mut triplets: Vec<Triplet> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let caption = generate_caption(
            captioner,
            world,
            world.item(pair.ref_id)?,
            world.item(pair.tgt_id)?,
        )?;
        let mut triplet = Triplet {
            ref_id: pair.ref_id,
            tgt_id: pair.tgt_id,
            caption,
            provenance: Provenance::Pseudo,
            score: None,
        };
        let score = port.score_triplet(ckpt, world, &triplet)?;
        triplet.score = Some(score);
        triplet.validate(world.vocab.len())?;
        triplets.push(triplet);
    }
    triplets.sort_by(|a, b| {
        b.score
            .unwrap()
            .partial_cmp(&a.score.unwrap())
            .unwrap()
            .then_with(|| (a.ref_id, a.tgt_id).cmp(&(b.ref_id, b.tgt_id)))
    });
    let mut scores: Vec<f64> = triplets.iter().map(|t| t.score.unwrap()).collect();
    let stats = FilterStats {
        generated: triplets.len(),
        retained: kappa.min(triplets.len()),
        score_summary: ScoreSummary::of(&mut scores),
    };
    triplets.truncate(stats.retained);
    Ok((triplets, stats))
}

/// Original ∪ retained with duplicates dropped; originals always kept.
pub fn augmented_set(original: &[Triplet], pseudo: &[Triplet]) -> Vec<Triplet> {
    let mut seen: HashSet<(u32, u32, Vec<u32>)> =
        original.iter().map(|t| (t.ref_id, t.tgt_id, t.caption.clone())).collect();
    let mut out = original.to_vec();
    for t in pseudo {
        if seen.insert((t.ref_id, t.tgt_id, t.caption.clone())) {
            out.push(t.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    NoPairs,
}

/// One paradigm iteration's record. Iteration 0 is the initial training on
/// the original triplets only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mined_pairs: usize,
    pub generated: usize,
    pub retained: usize,
    pub kappa: usize,
    pub score_summary: Option<ScoreSummary>,
    /// Average validation recall of the model entering this iteration.
    pub recall_before: Option<f64>,
    /// Validation recall after this iteration's (re)training.
    pub cir_report: RecallReport,
    /// Caption quality after this iteration's (re)training.
    pub caption_metrics: CaptionMetrics,
    pub stop_reason: Option<StopReason>,
}

/// Paradigm schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmConfig {
    pub strategy: MiningStrategy,
    /// Retained pseudo-triplet count; defaults to the original set's size.
    pub kappa: Option<usize>,
    pub max_iters: usize,
    /// Stop once average validation recall improves by less than this
    /// (absolute, in [0, 1]; 0.001 is 0.1 points).
    pub epsilon: f64,
    pub ks: Vec<usize>,
    pub captioner: CaptionerConfig,
    pub seed: u64,
}

impl ParadigmConfig {
    pub fn new(world: &World, strategy: MiningStrategy, seed: u64) -> Self {
        ParadigmConfig {
            strategy,
            kappa: None,
            max_iters: 3,
            epsilon: 0.001,
            ks: trainer::DEFAULT_KS.to_vec(),
            captioner: CaptionerConfig::for_world(world),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.captioner.validate()?;
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be finite and >= 0".into()));
        }
        if self.ks.is_empty() {
            return Err(Error::Config("need at least one recall rank".into()));
        }
        Ok(())
    }
}

/// Paradigm result: the per-iteration history plus the checkpoints from
/// the best-recall iteration.
#[derive(Debug, Clone)]
pub struct ParadigmOutcome<C> {
    pub history: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub best_iteration: usize,
    pub best_cir: C,
    pub best_captioner: Checkpoint,
}

/// Runs the full loop: initial training on the originals, then iterations
/// of mine → caption+filter → retrain-from-scratch → validate, stopping on
/// convergence or the iteration cap. Returns the best-of-iterations
/// checkpoints by average validation recall.
pub fn run_paradigm<M: CirModel>(
    world: &World,
    original: &[Triplet],
    validation: &[Triplet],
    cir: &M,
    cfg: &ParadigmConfig,
) -> Result<ParadigmOutcome<M::Ckpt>> {
    cfg.validate()?;
    if original.is_empty() || validation.is_empty() {
        return Err(Error::Config("paradigm needs non-empty train and validation sets".into()));
    }
    let kappa = cfg.kappa.unwrap_or(original.len()).max(1);
    let val_queries: Vec<Query> = queries_of(validation);

    let mut cir_ckpt = cir.train(world, original, derive_seed_indexed(cfg.seed, "paradigm-cir", 0))?;
    let (mut cap_ckpt, _) = train_captioner(
        world,
        original,
        &cfg.captioner,
        derive_seed_indexed(cfg.seed, "paradigm-cap", 0),
    )?;
    let report = cir.evaluate(&cir_ckpt, world, &val_queries, &cfg.ks)?;
    let cap_model = Captioner::from_checkpoint(&cap_ckpt)?;
    let cap_report = caption_metrics(&cap_model, world, validation)?;

    let mut history = vec![IterationRecord {
        iteration: 0,
        mined_pairs: 0,
        generated: 0,
        retained: 0,
        kappa,
        score_summary: None,
        recall_before: None,
        cir_report: report,
        caption_metrics: cap_report,
        stop_reason: None,
    }];
    let mut best_iteration = 0usize;
    let mut best_cir = cir_ckpt.clone();
    let mut best_captioner = cap_ckpt.clone();
    let mut stop_reason = StopReason::MaxIterations;

    for iteration in 1..=cfg.max_iters {
        let pairs = mine_pairs(
            world,
            original,
            &cfg.strategy,
            Some((cir, &cir_ckpt)),
            derive_seed_indexed(cfg.seed, "paradigm-mine", iteration as u64),
        )?;
        if pairs.is_empty() {
            stop_reason = StopReason::NoPairs;
            break;
        }
        let cap_model = Captioner::from_checkpoint(&cap_ckpt)?;
        let (pseudo, stats) =
            build_pseudo_triplets(world, &pairs, &cap_model, (cir, &cir_ckpt), kappa)?;
        let augmented = augmented_set(original, &pseudo);

        cir_ckpt = cir.train(
            world,
            &augmented,
            derive_seed_indexed(cfg.seed, "paradigm-cir", iteration as u64),
        )?;
        let (new_cap, _) = train_captioner(
            world,
            &augmented,
            &cfg.captioner,
            derive_seed_indexed(cfg.seed, "paradigm-cap", iteration as u64),
        )?;
        cap_ckpt = new_cap;

        let report = cir.evaluate(&cir_ckpt, world, &val_queries, &cfg.ks)?;
        let cap_model = Captioner::from_checkpoint(&cap_ckpt)?;
        let cap_report = caption_metrics(&cap_model, world, validation)?;
        let previous = history.last().expect("baseline recorded").cir_report.average;
        let improvement = report.average - previous;

        history.push(IterationRecord {
            iteration,
            mined_pairs: pairs.len(),
            generated: stats.generated,
            retained: stats.retained,
            kappa,
            score_summary: stats.score_summary,
            recall_before: Some(previous),
            cir_report: report.clone(),
            caption_metrics: cap_report,
            stop_reason: None,
        });
        if report.average > history[best_iteration].cir_report.average {
            best_iteration = iteration;
            best_cir = cir_ckpt.clone();
            best_captioner = cap_ckpt.clone();
        }
        if improvement < cfg.epsilon {
            stop_reason = StopReason::Converged;
            break;
        }
    }
    if let Some(last) = history.last_mut() {
        last.stop_reason = Some(stop_reason);
    }
    Ok(ParadigmOutcome { history, stop_reason, best_iteration, best_cir, best_captioner })
}

// ── ports ───────────────────────────────────────────────────────────

/// The matching network behind the paradigm port.
#[derive(Debug, Clone)]
pub struct LimnPort {
    pub train_config: TrainConfig,
}

impl LimnPort {
    pub fn new(train_config: TrainConfig) -> Self {
        LimnPort { train_config }
    }
}

impl CirModel for LimnPort {
    type Ckpt = Checkpoint;

    fn name(&self) -> &str {
        "limn"
    }

    fn train(&self, world: &World, triplets: &[Triplet], seed: u64) -> Result<Checkpoint> {
        let mut cfg = self.train_config.clone();
        cfg.seed = seed;
        let (ckpt, _) = trainer::train(world, triplets, None, &trainer::DEFAULT_KS, &cfg)?;
        Ok(ckpt)
    }

    fn score_triplet(&self, ckpt: &Checkpoint, world: &World, triplet: &Triplet) -> Result<f64> {
        let model = LimnModel::from_checkpoint(ckpt)?;
        trainer::score_triplet(&model, world, triplet)
    }

    fn evaluate(
        &self,
        ckpt: &Checkpoint,
        world: &World,
        queries: &[Query],
        ks: &[usize],
    ) -> Result<RecallReport> {
        let model = LimnModel::from_checkpoint(ckpt)?;
        let mut cache = GalleryCache::default();
        trainer::evaluate(&model, world, queries, ks, &mut cache)
    }

    fn pair_similarities(
        &self,
        ckpt: &Checkpoint,
        world: &World,
        pairs: &[(u32, u32)],
    ) -> Result<Vec<f64>> {
        let model = LimnModel::from_checkpoint(ckpt)?;
        let mut ids: Vec<u32> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        ids.sort_unstable();
        ids.dedup();
        let embedded: Vec<(u32, crate::matcher::TokenMatrix)> = ids
            .par_iter()
            .map(|&id| Ok((id, model.embed_target(&world.render_item(id)?)?)))
            .collect::<Result<_>>()?;
        let by_id: HashMap<u32, &crate::matcher::TokenMatrix> =
            embedded.iter().map(|(id, tm)| (*id, tm)).collect();
        let rule = model.config.score_rule();
        let norm = match rule {
            ScoreRule::MultiFaceted => model.config.effective_tokens() as f64,
            ScoreRule::AveragePooled => 1.0,
        };
        pairs
            .iter()
            .map(|&(a, b)| Ok(rule.score(by_id[&a], by_id[&b])? / norm))
            .collect()
    }
}

/// A deliberately simple second port: captions are parsed back to attribute
/// edits and scored by attribute agreement. Exercises the paradigm's
/// model-agnostic contract.
#[derive(Debug, Clone, Default)]
pub struct AttributeOverlapPort;

impl AttributeOverlapPort {
    fn expected_attrs(world: &World, triplet: &Triplet) -> Result<Option<Vec<u8>>> {
        let tokens = world.vocab.to_tokens(&triplet.caption)?;
        match parse(&world.slots, &tokens) {
            Ok(diff) => Ok(Some(apply_diff(&world.item(triplet.ref_id)?.attrs, &diff))),
            Err(_) => Ok(None),
        }
    }

    fn agreement(expected: &[u8], actual: &[u8]) -> f64 {
        let f = expected.len() as f64;
        let matches = expected.iter().zip(actual).filter(|(a, b)| a == b).count() as f64;
        (2.0 * matches - f) / f
    }
}

impl CirModel for AttributeOverlapPort {
    type Ckpt = ();

    fn name(&self) -> &str {
        "attribute_overlap"
    }

    fn train(&self, _world: &World, _triplets: &[Triplet], _seed: u64) -> Result<()> {
        Ok(())
    }

    fn score_triplet(&self, _ckpt: &(), world: &World, triplet: &Triplet) -> Result<f64> {
        match Self::expected_attrs(world, triplet)? {
            Some(expected) => Ok(Self::agreement(&expected, &world.item(triplet.tgt_id)?.attrs)),
            None => Ok(-1.0),
        }
    }

    fn evaluate(
        &self,
        _ckpt: &(),
        world: &World,
        queries: &[Query],
        ks: &[usize],
    ) -> Result<RecallReport> {
        let mut ranks = Vec::with_capacity(queries.len());
        for q in queries {
            let probe = Triplet {
                ref_id: q.ref_id,
                tgt_id: q.target_id,
                caption: q.caption.clone(),
                provenance: Provenance::Original,
                score: None,
            };
            let expected = Self::expected_attrs(world, &probe)?;
            let scored: Vec<(u32, f64)> = world
                .items
                .iter()
                .map(|item| {
                    let s = match &expected {
                        Some(e) => Self::agreement(e, &item.attrs),
                        None => -1.0,
                    };
                    (item.id, s)
                })
                .collect();
            ranks.push(trainer::rank_of_target(&scored, q.target_id)?);
        }
        let recalls: Vec<f64> = ks
            .iter()
            .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
            .collect();
        let average = recalls.iter().sum::<f64>() / recalls.len() as f64;
        Ok(RecallReport {
            ks: ks.to_vec(),
            recalls,
            gallery_size: world.items.len(),
            query_count: queries.len(),
            average,
        })
    }

    fn pair_similarities(
        &self,
        _ckpt: &(),
        world: &World,
        pairs: &[(u32, u32)],
    ) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(a, b)| {
                let x = &world.item(a)?.attrs;
                let y = &world.item(b)?.attrs;
                Ok(x.iter().zip(y).filter(|(p, q)| p == q).count() as f64 / x.len() as f64)
            })
            .collect()
    }
}
