//! Primitive concept inventory.
//!
//! Vision stores come straight from a container's mask blob. NLI stores are
//! derived from sentence-pair records: premise/hypothesis presence of the most
//! frequent words and of each observed POS tag, plus four word-overlap
//! concepts. When embeddings are supplied, every word concept also gets a
//! neighborhood (its nearest same-side word concepts) whose OR mask backs the
//! `NEIGHBORS` operator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitmask::Bitmask;
use crate::error::{Error, Result};
use crate::par;

/// Default neighborhood size for `NEIGHBORS`.
pub const DEFAULT_NEIGHBORS: usize = 5;
/// Default number of frequent words turned into concepts.
pub const DEFAULT_VOCAB_SIZE: usize = 2000;
/// Word-overlap thresholds; concept `overlap-X%` is set when overlap exceeds X%.
pub const OVERLAP_THRESHOLDS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Scene,
    Object,
    Part,
    Color,
    WordPremise,
    WordHypothesis,
    PosPremise,
    PosHypothesis,
    Overlap,
    Other,
}

impl Category {
    pub fn is_word(self) -> bool {
        matches!(self, Category::WordPremise | Category::WordHypothesis)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Vision,
    Nli,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub id: ConceptId,
    pub name: String,
    pub category: Category,
    pub mask: Bitmask,
}

impl Concept {
    /// The id is assigned when the concept is added to a store.
    pub fn new(name: impl Into<String>, category: Category, mask: Bitmask) -> Self {
        Self {
            id: ConceptId::default(),
            name: name.into(),
            category,
            mask,
        }
    }

    /// The underlying word of a word concept (`pre:dog` → `dog`).
    pub fn word(&self) -> Option<&str> {
        match self.category {
            Category::WordPremise => self.name.strip_prefix("pre:"),
            Category::WordHypothesis => self.name.strip_prefix("hyp:"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub members: Vec<ConceptId>,
    pub mask: Bitmask,
}

#[derive(Clone, Debug)]
pub struct ConceptStore {
    task: TaskKind,
    units: usize,
    concepts: Vec<Concept>,
    by_name: HashMap<String, ConceptId>,
    embeddings: Option<EmbeddingTable>,
    neighborhoods: BTreeMap<ConceptId, Neighborhood>,
}

impl ConceptStore {
    /// Assigns contiguous ids in order and validates names and mask lengths.
    pub fn new(task: TaskKind, units: usize, concepts: Vec<Concept>) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(concepts.len());
        let mut out = Vec::with_capacity(concepts.len());
        for (i, mut c) in concepts.into_iter().enumerate() {
            let id = ConceptId(u32::try_from(i).map_err(|_| Error::Config("too many concepts".into()))?);
            if c.mask.len() != units {
                return Err(Error::LengthMismatch {
                    left: units,
                    right: c.mask.len(),
                });
            }
            if by_name.insert(c.name.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate concept name {:?}", c.name)));
            }
            c.id = id;
            out.push(c);
        }
        Ok(Self {
            task,
            units,
            concepts: out,
            by_name,
            embeddings: None,
            neighborhoods: BTreeMap::new(),
        })
    }

    /// Attaches embeddings and precomputes `k`-word neighborhoods for every
    /// word concept whose word is in the table.
    pub fn with_embeddings(mut self, table: EmbeddingTable, k: usize) -> Result<Self> {
        if self.task != TaskKind::Nli {
            return Err(Error::Config(
                "NEIGHBORS requires an NLI concept store".into(),
            ));
        }
        if k == 0 {
            return Err(Error::Config("neighborhood size must be at least 1".into()));
        }
        self.embeddings = Some(table);
        let word_ids: Vec<ConceptId> = self
            .concepts
            .iter()
            .filter(|c| c.category.is_word())
            .map(|c| c.id)
            .collect();
        let found = par::map(&word_ids, |&id| {
            neighbors(id, &self, k).map(|n| n.map(|members| (id, members)))
        });
        let mut neighborhoods = BTreeMap::new();
        for entry in found {
            if let Some((id, members)) = entry? {
                let mut mask = Bitmask::zeros(self.units);
                for m in &members {
                    mask.or_assign(&self.concepts[m.index()].mask)?;
                }
                neighborhoods.insert(id, Neighborhood { members, mask });
            }
        }
        self.neighborhoods = neighborhoods;
        Ok(self)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, id: ConceptId) -> Result<&Concept> {
        self.concepts
            .get(id.index())
            .ok_or_else(|| Error::MissingConcept(format!("id {}", id.0)))
    }

    pub fn mask(&self, id: ConceptId) -> Result<&Bitmask> {
        self.concept(id).map(|c| &c.mask)
    }

    pub fn name(&self, id: ConceptId) -> Result<&str> {
        self.concept(id).map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<ConceptId> {
        self.by_name.get(name).copied()
    }

    pub fn embeddings(&self) -> Option<&EmbeddingTable> {
        self.embeddings.as_ref()
    }

    pub fn neighborhood(&self, id: ConceptId) -> Option<&Neighborhood> {
        self.neighborhoods.get(&id)
    }

    pub fn neighborhoods(&self) -> impl Iterator<Item = (ConceptId, &Neighborhood)> {
        self.neighborhoods.iter().map(|(&id, n)| (id, n))
    }

    pub fn neighbors_mask(&self, id: ConceptId) -> Result<&Bitmask> {
        let c = self.concept(id)?;
        if !c.category.is_word() {
            return Err(Error::InvalidOperator(format!(
                "NEIGHBORS is undefined for non-word concept {:?}",
                c.name
            )));
        }
        self.neighborhoods
            .get(&id)
            .map(|n| &n.mask)
            .ok_or_else(|| {
                Error::InvalidOperator(format!("no embedding neighborhood for {:?}", c.name))
            })
    }
}

/// Word vectors keyed by word.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "embedding for {word:?} has {} dims, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite embedding for {word:?}")));
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(Error::Data(format!("zero-norm embedding for {word:?}")));
        }
        self.vectors.insert(word, vector);
        Ok(())
    }

    /// Reads whitespace-separated `word v1 ... vd` lines. `d` is taken from
    /// the first line.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<embeddings>", e))?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let vector = fields
                .map(|f| {
                    f.parse::<f32>().map_err(|e| {
                        Error::Data(format!("embeddings line {}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            t.insert(word, vector)?;
        }
        table.ok_or_else(|| Error::Data("embedding table is empty".into()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// `1 - cos(a, b)`; `None` if either word is missing.
    pub fn cosine_distance(&self, a: &str, b: &str) -> Option<f64> {
        Some(cosine_distance(self.get(a)?, self.get(b)?))
    }
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// The `k` nearest same-side word concepts to `id` by cosine distance,
/// nearest first, ties broken by name.
///
/// Returns `Ok(None)` when the word has no embedding, in which case the
/// `NEIGHBORS` operator is not offered for it.
pub fn neighbors(id: ConceptId, store: &ConceptStore, k: usize) -> Result<Option<Vec<ConceptId>>> {
    let table = store
        .embeddings()
        .ok_or_else(|| Error::Config("concept store has no embeddings".into()))?;
    let query = store.concept(id)?;
    let Some(word) = query.word() else {
        return Err(Error::InvalidOperator(format!(
            "NEIGHBORS is undefined for non-word concept {:?}",
            query.name
        )));
    };
    let Some(qv) = table.get(word) else {
        return Ok(None);
    };
    let mut ranked: Vec<(f64, &str, ConceptId)> = store
        .concepts()
        .iter()
        .filter(|c| c.id != id && c.category == query.category)
        .filter_map(|c| {
            let v = table.get(c.word()?)?;
            Some((cosine_distance(qv, v), c.name.as_str(), c.id))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(Some(ranked.into_iter().take(k).map(|(_, _, id)| id).collect()))
}

/// One premise–hypothesis pair with tags and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentencePairRecord {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub premise_tags: Vec<String>,
    pub hypothesis_tags: Vec<String>,
    pub gold: String,
    pub predicted: String,
}

impl SentencePairRecord {
    pub fn validate(&self) -> Result<()> {
        if self.premise.len() != self.premise_tags.len()
            || self.hypothesis.len() != self.hypothesis_tags.len()
        {
            return Err(Error::Data(format!(
                "tag/token length mismatch (premise {}/{}, hypothesis {}/{})",
                self.premise.len(),
                self.premise_tags.len(),
                self.hypothesis.len(),
                self.hypothesis_tags.len()
            )));
        }
        Ok(())
    }
}

fn unique_lower(tokens: &[String]) -> BTreeSet<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// IoU between the unique lowercased words of premise and hypothesis.
/// Zero when both are empty.
pub fn word_overlap(record: &SentencePairRecord) -> f64 {
    let p = unique_lower(&record.premise);
    let h = unique_lower(&record.hypothesis);
    let union = p.union(&h).count();
    if union == 0 {
        return 0.0;
    }
    p.intersection(&h).count() as f64 / union as f64
}

/// Whether the pair's word overlap strictly exceeds `threshold`.
pub fn overlap_feature(record: &SentencePairRecord, threshold: f64) -> bool {
    word_overlap(record) > threshold
}

pub fn overlap_concept_name(threshold: f64) -> String {
    format!("overlap-{}%", (threshold * 100.0).round() as i64)
}

#[derive(Clone, Copy, Debug)]
pub struct NliConceptConfig {
    pub vocab_size: usize,
    pub neighbors: usize,
}

impl Default for NliConceptConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            neighbors: DEFAULT_NEIGHBORS,
        }
    }
}

/// Derives the NLI concept inventory from sentence pairs.
///
/// Words are ranked by token frequency over premises and hypotheses jointly
/// (ties by word). Concept order: `pre:w`/`hyp:w` per vocabulary word in rank
/// order, then `pre:T`/`hyp:T` per observed tag in sorted order, then the
/// overlap concepts. A tag concept whose name would collide with a word
/// concept is named `pre:tag:T` instead.
pub fn build_nli_concepts(
    records: &[SentencePairRecord],
    config: &NliConceptConfig,
    embeddings: Option<EmbeddingTable>,
) -> Result<ConceptStore> {
    if records.is_empty() {
        return Err(Error::Data("no sentence records".into()));
    }
    for r in records {
        r.validate()?;
    }
    let n = records.len();

    let mut freq: HashMap<String, u64> = HashMap::new();
    let mut tags: BTreeSet<&str> = BTreeSet::new();
    for r in records {
        for t in r.premise.iter().chain(&r.hypothesis) {
            *freq.entry(t.to_lowercase()).or_default() += 1;
        }
        tags.extend(r.premise_tags.iter().map(String::as_str));
        tags.extend(r.hypothesis_tags.iter().map(String::as_str));
    }
    let mut words: Vec<(String, u64)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words.truncate(config.vocab_size);

    let rank: HashMap<&str, usize> = words
        .iter()
        .enumerate()
        .map(|(i, (w, _))| (w.as_str(), i))
        .collect();
    let mut premise_masks = vec![Bitmask::zeros(n); words.len()];
    let mut hypothesis_masks = vec![Bitmask::zeros(n); words.len()];
    for (i, r) in records.iter().enumerate() {
        for t in &r.premise {
            if let Some(&w) = rank.get(t.to_lowercase().as_str()) {
                premise_masks[w].set(i, true);
            }
        }
        for t in &r.hypothesis {
            if let Some(&w) = rank.get(t.to_lowercase().as_str()) {
                hypothesis_masks[w].set(i, true);
            }
        }
    }

    let mut concepts = Vec::new();
    let mut taken = BTreeSet::new();
    for (((word, _), pm), hm) in words.iter().zip(premise_masks).zip(hypothesis_masks) {
        for (name, cat, mask) in [
            (format!("pre:{word}"), Category::WordPremise, pm),
            (format!("hyp:{word}"), Category::WordHypothesis, hm),
        ] {
            taken.insert(name.clone());
            concepts.push(Concept::new(name, cat, mask));
        }
    }
    for tag in &tags {
        for (side, cat) in [("pre", Category::PosPremise), ("hyp", Category::PosHypothesis)] {
            let mut mask = Bitmask::zeros(n);
            for (i, r) in records.iter().enumerate() {
                let rtags = if cat == Category::PosPremise {
                    &r.premise_tags
                } else {
                    &r.hypothesis_tags
                };
                if rtags.iter().any(|t| t == tag) {
                    mask.set(i, true);
                }
            }
            let mut name = format!("{side}:{tag}");
            if taken.contains(&name) {
                name = format!("{side}:tag:{tag}");
            }
            concepts.push(Concept::new(name, cat, mask));
        }
    }
    let overlaps: Vec<f64> = records.iter().map(word_overlap).collect();
    for t in OVERLAP_THRESHOLDS {
        let mask = Bitmask::from_bools(overlaps.iter().map(|&o| o > t));
        concepts.push(Concept::new(overlap_concept_name(t), Category::Overlap, mask));
    }

    let store = ConceptStore::new(TaskKind::Nli, n, concepts)?;
    match embeddings {
        Some(table) => store.with_embeddings(table, config.neighbors),
        None => Ok(store),
    }
}

/// Loads a vision concept store from a container directory.
pub fn load_vision_concepts(path: &Path) -> Result<ConceptStore> {
    let container = crate::container::Container::open(path)?;
    if container.manifest().task != TaskKind::Vision {
        return Err(Error::Format(format!(
            "{} is not a vision container",
            path.display()
        )));
    }
    container.load_concepts()
}
