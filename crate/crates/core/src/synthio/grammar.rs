//! The closed caption language: attribute slots, vocabulary, and the
//! invertible template grammar that realizes and parses modification text.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Slot table: name, value words, and two clause template variants.
/// `{v}` marks the value position.
const CANONICAL: &[(&str, &[&str], [&[&str]; 2])] = &[
    (
        "color",
        &["red", "blue", "green", "black", "white", "yellow", "purple", "orange"],
        [&["make", "the", "color", "{v}"], &["turn", "it", "{v}"]],
    ),
    (
        "pattern",
        &["plain", "striped", "floral", "dotted"],
        [&["make", "the", "pattern", "{v}"], &["switch", "pattern", "to", "{v}"]],
    ),
    (
        "sleeve",
        &["long", "short", "sleeveless"],
        [&["make", "the", "sleeves", "{v}"], &["use", "{v}", "sleeves"]],
    ),
    (
        "collar",
        &["round", "vneck", "high"],
        [&["make", "the", "collar", "{v}"], &["switch", "collar", "to", "{v}"]],
    ),
    (
        "length",
        &["mini", "knee", "maxi"],
        [&["make", "the", "length", "{v}"], &["change", "length", "to", "{v}"]],
    ),
];

const FUNCTION_WORDS: &[&str] = &[
    "make", "the", "color", "turn", "it", "pattern", "switch", "to", "sleeves", "use", "collar",
    "length", "change", "no", "and",
];

const SENTINEL: &[&str] = &["no", "change"];
const JOINER: &str = "and";
pub const PAD_TOKEN: &str = "<pad>";

/// Number of template variants per slot.
pub const VARIANTS_PER_SLOT: usize = 2;

/// A discrete attribute slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

/// The attribute schema of a synthetic world: a prefix of the canonical slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    slots: Vec<Slot>,
}

impl SlotSpec {
    /// The first `f` canonical slots, `2 <= f <= 5`.
    pub fn canonical(f: usize) -> Result<Self> {
        if !(2..=CANONICAL.len()).contains(&f) {
            return Err(Error::Config(format!(
                "slot count must be in [2, {}], got {f}",
                CANONICAL.len()
            )));
        }
        Ok(SlotSpec {
            slots: CANONICAL[..f]
                .iter()
                .map(|(name, values, _)| Slot {
                    name: (*name).to_string(),
                    values: values.iter().map(|v| (*v).to_string()).collect(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, idx: usize) -> &Slot {
        &self.slots[idx]
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot_by_name(&self, name: &str) -> Option<(usize, &Slot)> {
        self.slots.iter().enumerate().find(|(_, s)| s.name == name)
    }

    /// Total number of distinct attribute vectors.
    pub fn combinations(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).product()
    }

    fn templates(&self, slot_idx: usize) -> [&'static [&'static str]; 2] {
        CANONICAL[slot_idx].2
    }
}

/// A per-slot edit set: slot index → new value index.
pub type Diff = BTreeMap<usize, u8>;

/// Token ↔ id table. Id 0 is always the pad token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds the vocabulary for a slot schema: pad, function words, then
    /// value words in slot order.
    pub fn for_slots(spec: &SlotSpec) -> Self {
        let mut tokens: Vec<String> = vec![PAD_TOKEN.to_string()];
        tokens.extend(FUNCTION_WORDS.iter().map(|w| (*w).to_string()));
        for slot in spec.slots() {
            tokens.extend(slot.values.iter().cloned());
        }
        Self::from_tokens(tokens).expect("canonical vocabulary has no duplicates")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::Vocab(format!("token 0 must be `{PAD_TOKEN}`")));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown token `{token}`")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("id {id} out of vocabulary")))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_ids(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn to_tokens(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }
}

/// Renders an edit set as caption tokens. `variants[i]` picks the surface
/// template for the i-th clause in slot order. An empty diff yields the
/// sentinel "no change" caption.
pub fn realize(spec: &SlotSpec, diff: &Diff, variants: &[usize]) -> Vec<String> {
    if diff.is_empty() {
        return SENTINEL.iter().map(|t| (*t).to_string()).collect();
    }
    let mut out: Vec<String> = Vec::new();
    for (clause, (&slot_idx, &value_idx)) in diff.iter().enumerate() {
        if clause > 0 {
            out.push(JOINER.to_string());
        }
        let variant = variants.get(clause).copied().unwrap_or(0) % VARIANTS_PER_SLOT;
        let template = spec.templates(slot_idx)[variant];
        let value = &spec.slot(slot_idx).values[value_idx as usize];
        for &tok in template {
            out.push(if tok == "{v}" { value.clone() } else { tok.to_string() });
        }
    }
    out
}

/// Inverse of [`realize`]: recovers the exact edit set from caption tokens.
pub fn parse(spec: &SlotSpec, tokens: &[String]) -> Result<Diff> {
    if tokens.is_empty() {
        return Err(Error::Caption("empty caption".into()));
    }
    if tokens.len() == SENTINEL.len() && tokens.iter().zip(SENTINEL.iter()).all(|(a, b)| a == b) {
        return Ok(Diff::new());
    }
    let mut diff = Diff::new();
    for clause in tokens.split(|t| t == JOINER) {
        let (slot_idx, value_idx) = parse_clause(spec, clause)?;
        if diff.insert(slot_idx, value_idx).is_some() {
            return Err(Error::Caption(format!(
                "slot `{}` edited twice",
                spec.slot(slot_idx).name
            )));
        }
    }
    Ok(diff)
}

fn parse_clause(spec: &SlotSpec, clause: &[String]) -> Result<(usize, u8)> {
    for slot_idx in 0..spec.len() {
        'template: for template in spec.templates(slot_idx) {
            if template.len() != clause.len() {
                continue;
            }
            let mut value: Option<u8> = None;
            for (tok, &pattern) in clause.iter().zip(template.iter()) {
                if pattern == "{v}" {
                    match spec.slot(slot_idx).values.iter().position(|v| v == tok) {
                        Some(i) => value = Some(i as u8),
                        None => continue 'template,
                    }
                } else if tok != pattern {
                    continue 'template;
                }
            }
            if let Some(v) = value {
                return Ok((slot_idx, v));
            }
        }
    }
    Err(Error::Caption(format!("unrecognized clause: {}", clause.join(" "))))
}

/// Applies an edit set to an attribute vector.
pub fn apply_diff(attrs: &[u8], diff: &Diff) -> Vec<u8> {
    let mut out = attrs.to_vec();
    for (&slot, &value) in diff {
        out[slot] = value;
    }
    out
}

/// The edit set transforming `from` into `to`.
pub fn diff_between(from: &[u8], to: &[u8]) -> Diff {
    from.iter()
        .zip(to)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, (_, &b))| (i, b))
        .collect()
}
