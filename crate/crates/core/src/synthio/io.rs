//! On-disk formats: items.jsonl, triplets.jsonl, pairs.jsonl, vocab.json.
//! All UTF-8, line-delimited where applicable; round-trips are byte-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthio::{Item, SlotSpec, Triplet, Vocab};

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: u32,
    attributes: BTreeMap<String, String>,
    title: Vec<String>,
    taxon: Vec<String>,
}

/// A mined unlabeled reference-target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ref_id: u32,
    pub tgt_id: u32,
    pub strategy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stat: Option<f64>,
}

/// A generated caption for an image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub ref_id: u32,
    pub tgt_id: u32,
    pub caption: Vec<u32>,
    pub model_hash: String,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

pub fn write_items(path: &Path, items: &[Item], spec: &SlotSpec) -> Result<()> {
    write_jsonl(
        path,
        items.iter().map(|item| {
            let attributes = item
                .attrs
                .iter()
                .enumerate()
                .map(|(s, &v)| {
                    (spec.slot(s).name.clone(), spec.slot(s).values[v as usize].clone())
                })
                .collect();
            let (family, genus) = item.taxon(spec);
            ItemRecord { id: item.id, attributes, title: item.title(spec), taxon: vec![family, genus] }
        }),
    )
}

/// Reads items.jsonl, recovering the slot schema from the attribute keys
/// (which must form a prefix of the canonical slots).
pub fn read_items(path: &Path) -> Result<(Vec<Item>, SlotSpec)> {
    let records: Vec<ItemRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} contains no items", path.display())));
    }
    let f = records[0].attributes.len();
    let spec = SlotSpec::canonical(f)?;
    for slot in spec.slots() {
        if !records[0].attributes.contains_key(&slot.name) {
            return Err(Error::Config(format!("items missing canonical slot `{}`", slot.name)));
        }
    }
    let mut items = Vec::with_capacity(records.len());
    for record in records {
        let mut attrs = vec![0u8; f];
        for (s, slot) in spec.slots().iter().enumerate() {
            let word = record
                .attributes
                .get(&slot.name)
                .ok_or_else(|| Error::Config(format!("item {} missing `{}`", record.id, slot.name)))?;
            attrs[s] = slot
                .values
                .iter()
                .position(|v| v == word)
                .ok_or_else(|| Error::Config(format!("unknown value `{word}` for `{}`", slot.name)))?
                as u8;
        }
        items.push(Item { id: record.id, attrs });
    }
    Ok((items, spec))
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_jsonl(path, triplets.iter())
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    read_jsonl(path)
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    write_jsonl(path, pairs.iter())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    read_jsonl(path)
}

pub fn write_captions(path: &Path, captions: &[CaptionRecord]) -> Result<()> {
    write_jsonl(path, captions.iter())
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    read_jsonl(path)
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer_pretty(&mut out, &VocabFile { tokens: vocab.tokens().to_vec() })?;
    out.push(b'\n');
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let file: VocabFile = serde_json::from_slice(&fs::read(path)?)?;
    Vocab::from_tokens(file.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthio::{generate_catalog, make_triplets, World};

    #[test]
    fn items_and_triplets_round_trip_byte_exact() {
        let dir = std::env::temp_dir().join(format!("limn-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let world = World::generate(40, 5, 0.0, 3).unwrap();
        let triplets = make_triplets(&world.items, &world.slots, &world.vocab, 60, 2, 3).unwrap();

        let items_path = dir.join("items.jsonl");
        let triplets_path = dir.join("triplets.jsonl");
        let vocab_path = dir.join("vocab.json");
        write_items(&items_path, &world.items, &world.slots).unwrap();
        write_triplets(&triplets_path, &triplets).unwrap();
        write_vocab(&vocab_path, &world.vocab).unwrap();

        let first = fs::read(&items_path).unwrap();
        let (items, spec) = read_items(&items_path).unwrap();
        assert_eq!(items, world.items);
        assert_eq!(spec, world.slots);
        write_items(&items_path, &items, &spec).unwrap();
        assert_eq!(first, fs::read(&items_path).unwrap());

        let first = fs::read(&triplets_path).unwrap();
        let loaded = read_triplets(&triplets_path).unwrap();
        assert_eq!(loaded, triplets);
        write_triplets(&triplets_path, &loaded).unwrap();
        assert_eq!(first, fs::read(&triplets_path).unwrap());

        let first = fs::read(&vocab_path).unwrap();
        let vocab = read_vocab(&vocab_path).unwrap();
        assert_eq!(vocab, world.vocab);
        write_vocab(&vocab_path, &vocab).unwrap();
        assert_eq!(first, fs::read(&vocab_path).unwrap());

        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn smaller_slot_schemas_round_trip() {
        let dir = std::env::temp_dir().join(format!("limn-io3-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let spec = SlotSpec::canonical(3).unwrap();
        let items = generate_catalog(20, &spec, 5).unwrap();
        let path = dir.join("items.jsonl");
        write_items(&path, &items, &spec).unwrap();
        let (loaded, loaded_spec) = read_items(&path).unwrap();
        assert_eq!(loaded, items);
        assert_eq!(loaded_spec.len(), 3);
        fs::remove_dir_all(&dir).ok();
    }
}
