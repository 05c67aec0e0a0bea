//! Trainable difference captioner: encodes both images with a small shared
//! conv stack, classifies {unchanged | new value} per attribute slot from
//! the feature difference, and realizes the predicted edits through the
//! template grammar. BLEU-1 and ROUGE-L monitor caption quality.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Checkpoint, Graph, ParamStore, Tensor, TensorId};
use crate::seeds::{derive_seed, derive_seed_indexed};
use crate::synthio::{parse, realize, Diff, Item, Triplet, World};

/// Captioner architecture and training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub mid_channels: usize,
    pub feat_channels: usize,
    /// Classes per slot head: 1 + number of slot values.
    pub slot_classes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of re-sampling a predicted slot class at generation
    /// time; stresses the downstream score filter in tests.
    pub flip_noise: f64,
    pub noise_seed: u64,
}

impl CaptionerConfig {
    pub fn for_world(world: &World) -> Self {
        CaptionerConfig {
            in_channels: world.render_spec.channels,
            input_h: world.render_spec.height,
            input_w: world.render_spec.width,
            mid_channels: 8,
            feat_channels: 16,
            slot_classes: world.slots.slots().iter().map(|s| 1 + s.values.len()).collect(),
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            flip_noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_classes.is_empty() || self.slot_classes.iter().any(|&c| c < 2) {
            return Err(Error::Config("each slot head needs at least 2 classes".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config("captioner training schedule invalid".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_noise) {
            return Err(Error::Config("flip_noise must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn feat_len(&self) -> usize {
        let h = (self.input_h - 1) / 2 + 1;
        let w = (self.input_w - 1) / 2 + 1;
        self.feat_channels * h * w
    }
}

/// Difference captioner model: config + named parameters.
#[derive(Debug, Clone)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub params: ParamStore,
}

struct CaptionerLeaves {
    conv1_w: TensorId,
    conv1_b: TensorId,
    conv2_w: TensorId,
    conv2_b: TensorId,
    heads: Vec<TensorId>,
}

impl Captioner {
    pub fn init(config: CaptionerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "captioner-init"));
        let mut params = ParamStore::new();
        let (ci, c, cf) = (config.in_channels, config.mid_channels, config.feat_channels);
        params.insert("cap.conv1.w", Tensor::fan_in_uniform(&[c, ci, 3, 3], ci * 9, &mut rng));
        params.insert("cap.conv1.b", Tensor::zeros(&[c]));
        params.insert("cap.conv2.w", Tensor::fan_in_uniform(&[cf, c, 3, 3], c * 9, &mut rng));
        params.insert("cap.conv2.b", Tensor::zeros(&[cf]));
        let feat = 2 * config.feat_len();
        for (s, &classes) in config.slot_classes.iter().enumerate() {
            // Bias-free heads: a zero feature difference always yields the
            // "unchanged" class through the lowest-index tie rule.
            params.insert(format!("cap.head{s}.w"), Tensor::fan_in_uniform(&[classes, feat], feat, &mut rng));
        }
        Ok(Captioner { config, params })
    }

    pub fn to_checkpoint(&self, optimizer: Option<AdamState>) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.params.clone(), optimizer, serde_json::to_value(&self.config)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: CaptionerConfig = serde_json::from_value(ckpt.config.clone())?;
        config.validate()?;
        Ok(Captioner { config, params: ckpt.params.clone() })
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    fn leaves(&self, g: &mut Graph, requires_grad: bool) -> Result<(CaptionerLeaves, BTreeMap<String, TensorId>)> {
        let map = self.params.leaves(g, requires_grad);
        let get = |name: &str| {
            map.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
        };
        let mut heads = Vec::with_capacity(self.config.slot_classes.len());
        for s in 0..self.config.slot_classes.len() {
            heads.push(get(&format!("cap.head{s}.w"))?);
        }
        Ok((
            CaptionerLeaves {
                conv1_w: get("cap.conv1.w")?,
                conv1_b: get("cap.conv1.b")?,
                conv2_w: get("cap.conv2.w")?,
                conv2_b: get("cap.conv2.b")?,
                heads,
            },
            map,
        ))
    }

    /// Location-preserving image features: a stride-2 stage then a
    /// stride-1 stage, flattened without pooling so the per-slot bands
    /// stay spatially separable.
    fn features(&self, g: &mut Graph, leaves: &CaptionerLeaves, pixels: &Tensor) -> Result<TensorId> {
        let px = g.constant(pixels.clone());
        let x = g.conv2d(px, leaves.conv1_w, leaves.conv1_b, 2, 1)?;
        let x = g.relu(x);
        let x = g.conv2d(x, leaves.conv2_w, leaves.conv2_b, 1, 1)?;
        let x = g.relu(x);
        g.reshape(x, &[self.config.feat_len(), 1])
    }

    fn slot_logit_ids(
        &self,
        g: &mut Graph,
        leaves: &CaptionerLeaves,
        ref_pixels: &Tensor,
        tgt_pixels: &Tensor,
    ) -> Result<Vec<TensorId>> {
        let f_ref = self.features(g, leaves, ref_pixels)?;
        let f_tgt = self.features(g, leaves, tgt_pixels)?;
        let diff = g.sub(f_tgt, f_ref)?;
        // Both rectified halves of the difference: keeps the sign content
        // and makes the difference magnitude linearly accessible, so the
        // "unchanged" class is separable. A zero difference still produces
        // all-zero logits.
        let pos = g.relu(diff);
        let negated = g.scale(diff, -1.0);
        let neg = g.relu(negated);
        let both = g.concat_rows(&[pos, neg])?;
        leaves.heads.iter().map(|&head| g.matmul(head, both)).collect()
    }

    /// Per-slot class logits for an image pair (class 0 = unchanged).
    pub fn slot_logits(&self, world: &World, reference: &Item, target: &Item) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let (leaves, _) = self.leaves(&mut g, false)?;
        let ref_px = crate::synthio::render(reference, &world.slots, &world.render_spec);
        let tgt_px = crate::synthio::render(target, &world.slots, &world.render_spec);
        let ids = self.slot_logit_ids(&mut g, &leaves, &ref_px, &tgt_px)?;
        Ok(ids.iter().map(|&id| g.value(id).data().to_vec()).collect())
    }

    /// Predicted edit set: argmax per slot (ties to the lowest class), with
    /// the optional seeded flip noise applied per pair.
    pub fn predict_diff(&self, world: &World, reference: &Item, target: &Item) -> Result<Diff> {
        let logits = self.slot_logits(world, reference, target)?;
        let mut classes: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        if self.config.flip_noise > 0.0 {
            let key = (u64::from(reference.id) << 32) | u64::from(target.id);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                self.config.noise_seed,
                "caption-flip",
                key,
            ));
            for (s, class) in classes.iter_mut().enumerate() {
                if rng.random_range(0.0..1.0) < self.config.flip_noise {
                    let n = self.config.slot_classes[s];
                    let mut pick = rng.random_range(0..n - 1);
                    if pick >= *class {
                        pick += 1;
                    }
                    *class = pick;
                }
            }
        }
        Ok(classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| (s, (c - 1) as u8))
            .collect())
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
        let _ = i;
    }
    best
}

/// Generates a caption for an image pair: predicted edits realized through
/// the template grammar (greedy, first surface variant). An empty
/// prediction yields the sentinel "no change" caption.
pub fn generate_caption(
    captioner: &Captioner,
    world: &World,
    reference: &Item,
    target: &Item,
) -> Result<Vec<u32>> {
    let diff = captioner.predict_diff(world, reference, target)?;
    let variants = vec![0usize; diff.len()];
    world.vocab.to_ids(&realize(&world.slots, &diff, &variants))
}

/// Outcome of captioner training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerTrainMetrics {
    pub loss_curve: Vec<f64>,
    /// Triplets dropped because their caption did not parse.
    pub skipped: usize,
}

/// Trains the captioner on triplets whose captions parse under the world
/// grammar; unparseable captions are skipped and counted.
pub fn train_captioner(
    world: &World,
    triplets: &[Triplet],
    cfg: &CaptionerConfig,
    seed: u64,
) -> Result<(Checkpoint, CaptionerTrainMetrics)> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::Config("cannot train the captioner on an empty triplet set".into()));
    }
    let mut samples: Vec<(u32, u32, Vec<usize>)> = Vec::with_capacity(triplets.len());
    let mut skipped = 0usize;
    for t in triplets {
        let tokens = world.vocab.to_tokens(&t.caption)?;
        match parse(&world.slots, &tokens) {
            Ok(diff) => {
                let classes: Vec<usize> = (0..world.slots.len())
                    .map(|s| diff.get(&s).map_or(0, |&v| v as usize + 1))
                    .collect();
                samples.push((t.ref_id, t.tgt_id, classes));
            }
            Err(_) => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::Config("no parseable captions to train on".into()));
    }

    let mut model = Captioner::init(cfg.clone(), seed)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "captioner-shuffle"));
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let (leaves, map) = model.leaves(&mut g, true)?;
            let mut terms: Vec<TensorId> = Vec::new();
            for &i in chunk {
                let (ref_id, tgt_id, classes) = &samples[i];
                let ref_px = world.render_item(*ref_id)?;
                let tgt_px = world.render_item(*tgt_id)?;
                let logit_ids = model.slot_logit_ids(&mut g, &leaves, &ref_px, &tgt_px)?;
                for (s, &logits) in logit_ids.iter().enumerate() {
                    let row = g.transpose(logits)?;
                    let lse = g.logsumexp_rows(row)?;
                    let picked = g.slice_rows(logits, classes[s], 1)?;
                    let picked = g.reshape(picked, &[1])?;
                    terms.push(g.sub(lse, picked)?);
                }
            }
            let mut rows = Vec::with_capacity(terms.len());
            for &t in &terms {
                rows.push(g.reshape(t, &[1, 1])?);
            }
            let stacked = g.concat_rows(&rows)?;
            let total = g.sum_all(stacked);
            let loss = g.scale(total, 1.0 / chunk.len() as f64);
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Train {
                    param: "captioner loss".into(),
                    detail: format!("non-finite loss {loss_value}"),
                });
            }
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (name, id) in &map {
                if let Some(grad) = g.grad(*id) {
                    grads.insert(name.clone(), grad);
                }
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            epoch_total += loss_value * chunk.len() as f64;
        }
        loss_curve.push(epoch_total / samples.len() as f64);
    }

    let ckpt = model.to_checkpoint(Some(adam))?;
    Ok((ckpt, CaptionerTrainMetrics { loss_curve, skipped }))
}

/// Fraction of (triplet, slot) pairs whose predicted class matches the
/// ground-truth diff.
pub fn slot_accuracy(captioner: &Captioner, world: &World, triplets: &[Triplet]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in triplets {
        let tokens = world.vocab.to_tokens(&t.caption)?;
        let truth = parse(&world.slots, &tokens)?;
        let predicted = captioner.predict_diff(world, world.item(t.ref_id)?, world.item(t.tgt_id)?)?;
        for s in 0..world.slots.len() {
            total += 1;
            if truth.get(&s) == predicted.get(&s) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

// ── caption quality metrics ─────────────────────────────────────────

/// BLEU-1: clipped unigram precision times the brevity penalty
/// `exp(min(0, 1 - r/c))`, with `r` the closest reference length.
pub fn bleu1(candidate: &[u32], references: &[Vec<u32>]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Caption("empty candidate".into()));
    }
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::Caption("empty reference".into()));
    }
    let mut cand_counts: HashMap<u32, usize> = HashMap::new();
    for &t in candidate {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let mut clipped = 0usize;
    for (&token, &count) in &cand_counts {
        let max_ref = references
            .iter()
            .map(|r| r.iter().filter(|&&t| t == token).count())
            .max()
            .unwrap_or(0);
        clipped += count.min(max_ref);
    }
    let precision = clipped as f64 / candidate.len() as f64;

    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let d = (len as i64 - candidate.len() as i64).abs();
            (d, len)
        })
        .expect("non-empty references") as f64;
    let brevity = (1.0 - r / c).min(0.0).exp();
    Ok(precision * brevity)
}

/// ROUGE-L: F1 from the longest common subsequence.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Caption("empty input".into()));
    }
    let (n, m) = (candidate.len(), reference.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * (m + 1) + j] = if candidate[i - 1] == reference[j - 1] {
                dp[(i - 1) * (m + 1) + j - 1] + 1
            } else {
                dp[(i - 1) * (m + 1) + j].max(dp[i * (m + 1) + j - 1])
            };
        }
    }
    let lcs = dp[n * (m + 1) + m] as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / n as f64;
    let r = lcs / m as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean BLEU-1 / ROUGE-L of generated captions against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub bleu1: f64,
    pub rouge_l: f64,
    pub average: f64,
}

impl CaptionMetrics {
    pub fn new(bleu1: f64, rouge_l: f64) -> Self {
        CaptionMetrics { bleu1, rouge_l, average: 0.5 * (bleu1 + rouge_l) }
    }
}

/// Evaluates generated captions against the triplets' ground-truth text.
pub fn caption_metrics(
    captioner: &Captioner,
    world: &World,
    triplets: &[Triplet],
) -> Result<CaptionMetrics> {
    if triplets.is_empty() {
        return Err(Error::Config("no triplets to evaluate captions on".into()));
    }
    let mut bleu_total = 0.0;
    let mut rouge_total = 0.0;
    for t in triplets {
        let generated =
            generate_caption(captioner, world, world.item(t.ref_id)?, world.item(t.tgt_id)?)?;
        bleu_total += bleu1(&generated, std::slice::from_ref(&t.caption))?;
        rouge_total += rouge_l(&generated, &t.caption)?;
    }
    let n = triplets.len() as f64;
    Ok(CaptionMetrics::new(bleu_total / n, rouge_total / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthio::{make_triplets, split_triplets};

    #[test]
    fn bleu_identical_is_one_and_disjoint_is_zero() {
        let a = vec![3u32, 7, 9];
        assert_eq!(bleu1(&a, &[a.clone()]).unwrap(), 1.0);
        assert_eq!(bleu1(&a, &[vec![1, 2]]).unwrap(), 0.0);
        assert!(bleu1(&[], &[a.clone()]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty_matches_closed_form() {
        // Candidate "red dress" vs reference "red long dress":
        // precision 1, BP = exp(1 - 3/2).
        let candidate = vec![10u32, 12];
        let reference = vec![10u32, 11, 12];
        let expected = (1.0f64 - 1.5).exp();
        let got = bleu1(&candidate, &[reference]).unwrap();
        assert!((got - expected).abs() <= 1e-12, "bleu {got} vs {expected}");
    }

    #[test]
    fn bleu_clips_repeated_unigrams() {
        // Candidate repeats a token more often than any reference.
        let candidate = vec![5u32, 5, 5];
        let reference = vec![5u32, 1, 2];
        let got = bleu1(&candidate, &[reference]).unwrap();
        assert!((got - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn rouge_matches_hand_lcs() {
        let a = vec![1u32, 2, 3];
        assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
        // "a b c" vs "a c b": LCS 2, P = R = 2/3, F = 2/3.
        let got = rouge_l(&[1, 2, 3], &[1, 3, 2]).unwrap();
        assert!((got - 2.0 / 3.0).abs() <= 1e-12);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(rouge_l(&[], &[1]).is_err());
    }

    fn trained_captioner(seed: u64) -> (World, Vec<Triplet>, Captioner) {
        let world = World::generate(80, 3, 0.02, seed).unwrap();
        let triplets =
            make_triplets(&world.items, &world.slots, &world.vocab, 400, 2, seed).unwrap();
        let mut cfg = CaptionerConfig::for_world(&world);
        cfg.epochs = 12;
        let (ckpt, metrics) = train_captioner(&world, &triplets, &cfg, seed).unwrap();
        assert_eq!(metrics.skipped, 0);
        assert!(metrics.loss_curve.last().unwrap() < &metrics.loss_curve[0]);
        (world, triplets, Captioner::from_checkpoint(&ckpt).unwrap())
    }

    #[test]
    fn captioner_learns_held_out_slot_prediction() {
        let (world, triplets, captioner) = trained_captioner(41);
        let (_, _, test) = split_triplets(&triplets, 41);
        let acc = slot_accuracy(&captioner, &world, &test).unwrap();
        assert!(acc > 0.9, "held-out slot accuracy {acc}");
    }

    #[test]
    fn identical_pair_yields_the_sentinel_caption() {
        let (world, _, captioner) = trained_captioner(43);
        let item = world.item(0).unwrap();
        let caption = generate_caption(&captioner, &world, item, item).unwrap();
        let tokens = world.vocab.to_tokens(&caption).unwrap();
        assert_eq!(tokens, vec!["no".to_string(), "change".to_string()]);
    }

    #[test]
    fn an_untrained_captioner_still_sentinels_identical_pairs() {
        // Bias-free heads: zero feature difference means all-zero logits and
        // the tie rule picks "unchanged" for every slot.
        let world = World::generate(10, 3, 0.0, 47).unwrap();
        let captioner = Captioner::init(CaptionerConfig::for_world(&world), 47).unwrap();
        let item = world.item(3).unwrap();
        let caption = generate_caption(&captioner, &world, item, item).unwrap();
        assert_eq!(world.vocab.to_tokens(&caption).unwrap(), vec!["no", "change"]);
    }

    #[test]
    fn generated_captions_always_parse() {
        let (world, triplets, captioner) = trained_captioner(53);
        for t in triplets.iter().take(40) {
            let caption = generate_caption(
                &captioner,
                &world,
                world.item(t.ref_id).unwrap(),
                world.item(t.tgt_id).unwrap(),
            )
            .unwrap();
            let tokens = world.vocab.to_tokens(&caption).unwrap();
            assert!(parse(&world.slots, &tokens).is_ok());
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty_input() {
        let world = World::generate(30, 3, 0.0, 59).unwrap();
        let triplets = make_triplets(&world.items, &world.slots, &world.vocab, 60, 2, 59).unwrap();
        let mut cfg = CaptionerConfig::for_world(&world);
        cfg.epochs = 2;
        let (a, _) = train_captioner(&world, &triplets, &cfg, 59).unwrap();
        let (b, _) = train_captioner(&world, &triplets, &cfg, 59).unwrap();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        assert!(train_captioner(&world, &[], &cfg, 59).is_err());
    }

    #[test]
    fn flip_noise_is_deterministic_per_pair_and_changes_output() {
        let (world, triplets, captioner) = trained_captioner(61);
        let mut noisy = captioner.clone();
        noisy.config.flip_noise = 1.0;
        noisy.config.noise_seed = 9;
        let mut changed = 0;
        for t in triplets.iter().take(20) {
            let reference = world.item(t.ref_id).unwrap();
            let target = world.item(t.tgt_id).unwrap();
            let clean = generate_caption(&captioner, &world, reference, target).unwrap();
            let a = generate_caption(&noisy, &world, reference, target).unwrap();
            let b = generate_caption(&noisy, &world, reference, target).unwrap();
            assert_eq!(a, b);
            if a != clean {
                changed += 1;
            }
        }
        assert!(changed > 10, "flip noise changed only {changed}/20 captions");
    }
}
