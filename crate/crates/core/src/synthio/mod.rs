//! Seeded synthetic retrieval world: attribute items, rendered image
//! tensors, templated modification captions, triplets, and splits.

pub mod grammar;
pub mod io;
pub mod render;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeds::derive_seed;

pub use grammar::{
    apply_diff, diff_between, parse, realize, Diff, Slot, SlotSpec, Vocab, VARIANTS_PER_SLOT,
};
pub use render::{render, slot_band, RenderSpec};

/// Longest caption the grammar can produce (5 four-token clauses joined by
/// "and"); also the text encoder's default length budget.
pub const MAX_CAPTION_LEN: usize = 24;

/// A catalog entry: discrete attribute values, one per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: u32,
    pub attrs: Vec<u8>,
}

impl Item {
    /// Title: the bag of this item's attribute value words.
    pub fn title(&self, spec: &SlotSpec) -> Vec<String> {
        self.attrs
            .iter()
            .enumerate()
            .map(|(s, &v)| spec.slot(s).values[v as usize].clone())
            .collect()
    }

    /// Two-level taxon path derived from the coarsest attribute buckets.
    pub fn taxon(&self, spec: &SlotSpec) -> (String, String) {
        let f = spec.len();
        let last = &spec.slot(f - 1).values[self.attrs[f - 1] as usize];
        let prev = &spec.slot(f - 2).values[self.attrs[f - 2] as usize];
        (format!("f-{last}"), format!("g-{prev}-{last}"))
    }
}

/// Whether a triplet came from the source dataset or the captioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Pseudo,
}

/// A (reference, caption, target) training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub ref_id: u32,
    pub tgt_id: u32,
    pub caption: Vec<u32>,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Triplet {
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if self.ref_id == self.tgt_id {
            return Err(Error::Config(format!("triplet with ref == tgt ({})", self.ref_id)));
        }
        if self.caption.is_empty() || self.caption.len() > MAX_CAPTION_LEN {
            return Err(Error::Config(format!(
                "caption length {} outside [1, {MAX_CAPTION_LEN}]",
                self.caption.len()
            )));
        }
        if let Some(&bad) = self.caption.iter().find(|&&id| id as usize >= vocab_len) {
            return Err(Error::Vocab(format!("caption token {bad} out of vocabulary")));
        }
        if self.provenance == Provenance::Pseudo && self.score.is_none() {
            return Err(Error::Config("pseudo triplet without a score".into()));
        }
        Ok(())
    }
}

/// A retrieval query with its ground-truth target.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub ref_id: u32,
    pub caption: Vec<u32>,
    pub target_id: u32,
}

pub fn queries_of(triplets: &[Triplet]) -> Vec<Query> {
    triplets
        .iter()
        .map(|t| Query { ref_id: t.ref_id, caption: t.caption.clone(), target_id: t.tgt_id })
        .collect()
}

/// Samples `n_items` items with uniform attribute values. Attribute vectors
/// are kept distinct while the attribute space allows it.
pub fn generate_catalog(n_items: usize, spec: &SlotSpec, seed: u64) -> Result<Vec<Item>> {
    if n_items < 2 {
        return Err(Error::Config(format!("need at least 2 items, got {n_items}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "catalog"));
    let mut seen: std::collections::HashSet<Vec<u8>> = std::collections::HashSet::new();
    let mut items = Vec::with_capacity(n_items);
    for id in 0..n_items {
        let mut attrs: Vec<u8> = Vec::new();
        for attempt in 0..200 {
            attrs = (0..spec.len())
                .map(|s| rng.random_range(0..spec.slot(s).values.len()) as u8)
                .collect();
            if seen.insert(attrs.clone()) || attempt == 199 {
                break;
            }
        }
        items.push(Item { id: id as u32, attrs });
    }
    Ok(items)
}

/// Builds training triplets: pick a reference, pick a target item whose
/// attributes differ in 1..=`max_edits` slots, and realize the exact diff
/// through the template grammar.
pub fn make_triplets(
    catalog: &[Item],
    spec: &SlotSpec,
    vocab: &Vocab,
    n_triplets: usize,
    max_edits: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if max_edits == 0 || max_edits > spec.len() {
        return Err(Error::Config(format!(
            "max_edits must be in [1, {}], got {max_edits}",
            spec.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "triplets"));
    let mut out = Vec::with_capacity(n_triplets);
    let mut dead_refs = 0usize;
    while out.len() < n_triplets {
        let r = rng.random_range(0..catalog.len());
        let reference = &catalog[r];
        let candidates: Vec<usize> = catalog
            .iter()
            .enumerate()
            .filter(|(i, item)| {
                *i != r && {
                    let d = hamming(&reference.attrs, &item.attrs);
                    d >= 1 && d <= max_edits
                }
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            dead_refs += 1;
            if dead_refs > 1000 {
                return Err(Error::Config(
                    "catalog has no item pairs within the edit budget".into(),
                ));
            }
            continue;
        }
        let target = &catalog[candidates[rng.random_range(0..candidates.len())]];
        let diff = diff_between(&reference.attrs, &target.attrs);
        let variants: Vec<usize> =
            (0..diff.len()).map(|_| rng.random_range(0..VARIANTS_PER_SLOT)).collect();
        let caption = vocab.to_ids(&realize(spec, &diff, &variants))?;
        let triplet = Triplet {
            ref_id: reference.id,
            tgt_id: target.id,
            caption,
            provenance: Provenance::Original,
            score: None,
        };
        triplet.validate(vocab.len())?;
        out.push(triplet);
    }
    Ok(out)
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Seeded 70/10/20 split by triplet.
pub fn split_triplets(
    triplets: &[Triplet],
    seed: u64,
) -> (Vec<Triplet>, Vec<Triplet>, Vec<Triplet>) {
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    order.shuffle(&mut rng);
    let n = triplets.len();
    let train_end = n * 7 / 10;
    let val_end = n * 8 / 10;
    let pick = |range: &[usize]| range.iter().map(|&i| triplets[i].clone()).collect::<Vec<_>>();
    (pick(&order[..train_end]), pick(&order[train_end..val_end]), pick(&order[val_end..]))
}

/// A fully materialized synthetic world: schema, vocabulary, renderer, and
/// catalog, with id lookup.
#[derive(Debug, Clone)]
pub struct World {
    pub slots: SlotSpec,
    pub vocab: Vocab,
    pub render_spec: RenderSpec,
    pub items: Vec<Item>,
    by_id: HashMap<u32, usize>,
}

impl World {
    pub fn new(slots: SlotSpec, render_spec: RenderSpec, items: Vec<Item>) -> Result<Self> {
        let vocab = Vocab::for_slots(&slots);
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.attrs.len() != slots.len() {
                return Err(Error::Config(format!(
                    "item {} has {} attributes, schema has {}",
                    item.id,
                    item.attrs.len(),
                    slots.len()
                )));
            }
            if by_id.insert(item.id, i).is_some() {
                return Err(Error::Config(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(World { slots, vocab, render_spec, items, by_id })
    }

    /// Generates a seeded world with `f_slots` canonical slots.
    pub fn generate(n_items: usize, f_slots: usize, noise: f64, seed: u64) -> Result<Self> {
        let slots = SlotSpec::canonical(f_slots)?;
        let items = generate_catalog(n_items, &slots, seed)?;
        let render_spec = RenderSpec::new(derive_seed(seed, "render"), noise);
        World::new(slots, render_spec, items)
    }

    pub fn item(&self, id: u32) -> Result<&Item> {
        self.by_id.get(&id).map(|&i| &self.items[i]).ok_or(Error::UnknownId(id))
    }

    pub fn contains(&self, id: u32) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn render_item(&self, id: u32) -> Result<Tensor> {
        Ok(render(self.item(id)?, &self.slots, &self.render_spec))
    }

    /// All item ids in catalog order.
    pub fn ids(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_generation_is_deterministic() {
        let spec = SlotSpec::canonical(5).unwrap();
        let a = generate_catalog(500, &spec, 7).unwrap();
        let b = generate_catalog(500, &spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|i| i.attrs.len() == 5));
        let c = generate_catalog(500, &spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn catalog_rejects_tiny_counts() {
        let spec = SlotSpec::canonical(5).unwrap();
        assert!(generate_catalog(1, &spec, 7).is_err());
    }

    #[test]
    fn attribute_marginals_are_near_uniform_at_scale() {
        let spec = SlotSpec::canonical(5).unwrap();
        let items = generate_catalog(10_000, &spec, 11).unwrap();
        for s in 0..spec.len() {
            let v = spec.slot(s).values.len();
            let mut counts = vec![0usize; v];
            for item in &items {
                counts[item.attrs[s] as usize] += 1;
            }
            for &c in &counts {
                let freq = c as f64 / items.len() as f64;
                let uniform = 1.0 / v as f64;
                assert!(
                    (freq - uniform).abs() <= 0.05,
                    "slot {s} frequency {freq} vs uniform {uniform}"
                );
            }
        }
    }

    #[test]
    fn small_catalogs_have_distinct_renders() {
        let world = World::generate(50, 5, 0.0, 21).unwrap();
        let renders: Vec<_> = world.ids().iter().map(|&id| world.render_item(id).unwrap()).collect();
        for i in 0..renders.len() {
            for j in (i + 1)..renders.len() {
                assert_ne!(renders[i], renders[j], "items {i} and {j} render identically");
            }
        }
    }

    #[test]
    fn triplets_realize_the_exact_diff() {
        let world = World::generate(200, 5, 0.0, 13).unwrap();
        let triplets =
            make_triplets(&world.items, &world.slots, &world.vocab, 300, 3, 13).unwrap();
        assert_eq!(triplets.len(), 300);
        for t in &triplets {
            let reference = world.item(t.ref_id).unwrap();
            let target = world.item(t.tgt_id).unwrap();
            let tokens = world.vocab.to_tokens(&t.caption).unwrap();
            let diff = parse(&world.slots, &tokens).unwrap();
            assert_eq!(apply_diff(&reference.attrs, &diff), target.attrs);
            assert!(!diff.is_empty() && diff.len() <= 3);
        }
    }

    #[test]
    fn single_edit_triplets_have_single_clause_captions() {
        let world = World::generate(100, 5, 0.0, 15).unwrap();
        let triplets = make_triplets(&world.items, &world.slots, &world.vocab, 100, 1, 5).unwrap();
        for t in &triplets {
            let tokens = world.vocab.to_tokens(&t.caption).unwrap();
            assert!(!tokens.iter().any(|t| t == "and"), "multi-clause caption: {tokens:?}");
            assert_eq!(parse(&world.slots, &tokens).unwrap().len(), 1);
        }
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let world = World::generate(100, 5, 0.0, 17).unwrap();
        let triplets = make_triplets(&world.items, &world.slots, &world.vocab, 200, 2, 17).unwrap();
        let (tr1, va1, te1) = split_triplets(&triplets, 99);
        let (tr2, va2, te2) = split_triplets(&triplets, 99);
        assert_eq!((tr1.len(), va1.len(), te1.len()), (140, 20, 40));
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(te1, te2);
    }
}
