//! On-disk dataset container: one directory holding `manifest.json` and
//! sibling blobs.
//!
//! | blob            | contents                                                   |
//! |-----------------|------------------------------------------------------------|
//! | concept masks   | packed masks in concept order, `byte_len(units)` each      |
//! | activations     | `f32` little-endian, neuron-major                          |
//! | predictions     | CSV with `gold,predicted`, one row per input               |
//! | class weights   | `f32` little-endian, `neurons × classes`, neuron-major     |
//! | records         | one JSON sentence-pair record per line                     |
//! | embeddings      | text, `word v1 .. vd` per line                             |
//!
//! Vision activations are either raw `activation_grid` grids per image
//! (upsampled to `image_grid` at load) or already at mask resolution.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{ClassWeights, PredictionRecord};
use crate::bitmask::Bitmask;
use crate::concepts::{
    build_nli_concepts, Category, Concept, ConceptStore, EmbeddingTable, NliConceptConfig,
    SentencePairRecord, TaskKind, DEFAULT_NEIGHBORS,
};
use crate::error::{Error, Result};
use crate::thresholding::{ActivationTensor, NeuronId};

pub const FORMAT_MAGIC: &str = "compexp-container";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn cells(self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobFiles {
    pub concepts: String,
    pub activations: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
}

impl Default for BlobFiles {
    fn default() -> Self {
        Self {
            concepts: "concepts.bin".into(),
            activations: "activations.bin".into(),
            predictions: None,
            class_weights: None,
            records: None,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub task: TaskKind,
    /// Images (vision) or sentence pairs (NLI).
    pub inputs: usize,
    /// Sample units: `inputs × image_grid` pixels, or `inputs`.
    pub units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_grid: Option<GridDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_grid: Option<GridDims>,
    pub dtype: String,
    pub concepts: Vec<ConceptEntry>,
    pub neurons: Vec<NeuronId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    pub blobs: BlobFiles,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl Manifest {
    pub fn new(task: TaskKind, inputs: usize, image_grid: Option<GridDims>) -> Self {
        let units = inputs * image_grid.map_or(1, GridDims::cells);
        Self {
            format: FORMAT_MAGIC.into(),
            version: FORMAT_VERSION,
            task,
            inputs,
            units,
            image_grid,
            activation_grid: None,
            dtype: DTYPE_F32LE.into(),
            concepts: Vec::new(),
            neurons: Vec::new(),
            classes: Vec::new(),
            blobs: BlobFiles::default(),
            metadata: serde_json::Value::Null,
        }
    }

    /// Units per input: pixels per image, or 1.
    pub fn units_per_input(&self) -> usize {
        self.image_grid.map_or(1, GridDims::cells)
    }

    /// Activation values stored per neuron.
    pub fn activation_len(&self) -> usize {
        match self.activation_grid {
            Some(g) => self.inputs * g.cells(),
            None => self.units,
        }
    }

    pub fn mask_dims(&self) -> Option<(usize, usize)> {
        self.image_grid.map(|g| (g.height, g.width))
    }

    fn check(&self) -> Result<()> {
        if self.dtype != DTYPE_F32LE {
            return Err(Error::Format(format!("unsupported dtype {:?}", self.dtype)));
        }
        match self.task {
            TaskKind::Vision if self.image_grid.is_none() => {
                return Err(Error::Format("vision manifest without image_grid".into()));
            }
            TaskKind::Nli if self.image_grid.is_some() || self.activation_grid.is_some() => {
                return Err(Error::Format("NLI manifest with image dimensions".into()));
            }
            _ => {}
        }
        if self.inputs * self.units_per_input() != self.units {
            return Err(Error::Format(format!(
                "units {} != inputs {} x {} units per input",
                self.units,
                self.inputs,
                self.units_per_input()
            )));
        }
        if self.units == 0 {
            return Err(Error::Format("container has no units".into()));
        }
        if let Some(g) = self.activation_grid {
            if g.cells() == 0 {
                return Err(Error::Format("empty activation grid".into()));
            }
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.concepts {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Format(format!("duplicate concept name {:?}", c.name)));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for n in &self.neurons {
            if !ids.insert(*n) {
                return Err(Error::Format(format!("duplicate neuron id {}", n.0)));
            }
        }
        if self.concepts.is_empty() && self.blobs.records.is_none() {
            return Err(Error::Format("no concept table and no sentence records".into()));
        }
        if self.blobs.class_weights.is_some() && self.classes.is_empty() {
            return Err(Error::Format("class weights blob without class names".into()));
        }
        Ok(())
    }
}

/// Everything a container holds, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerData {
    pub manifest: Manifest,
    /// One mask per manifest concept.
    pub concept_masks: Vec<Bitmask>,
    /// One vector per manifest neuron, `activation_len` values each.
    pub activations: Vec<Vec<f32>>,
    pub predictions: Option<Vec<PredictionRecord>>,
    /// `neurons × classes`, neuron-major.
    pub class_weights: Option<Vec<f32>>,
    pub records: Option<Vec<SentencePairRecord>>,
    /// Embedding file contents.
    pub embeddings: Option<String>,
}

impl ContainerData {
    /// Writes the container into `dir`, creating it if needed. Blob file
    /// names are normalized to the defaults for present blobs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = self.manifest.clone();
        manifest.blobs = BlobFiles {
            predictions: self.predictions.as_ref().map(|_| "predictions.csv".into()),
            class_weights: self.class_weights.as_ref().map(|_| "class_weights.bin".into()),
            records: self.records.as_ref().map(|_| "records.jsonl".into()),
            embeddings: self.embeddings.as_ref().map(|_| "embeddings.txt".into()),
            ..BlobFiles::default()
        };
        manifest.check()?;
        self.check_shapes(&manifest)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut bytes = Vec::with_capacity(self.concept_masks.len() * Bitmask::byte_len(manifest.units));
        for m in &self.concept_masks {
            m.write_le_bytes(&mut bytes);
        }
        write_file(&dir.join(&manifest.blobs.concepts), &bytes)?;

        write_file(&dir.join(&manifest.blobs.activations), &f32_bytes(self.activations.iter().flatten()))?;

        if let (Some(p), Some(name)) = (&self.predictions, &manifest.blobs.predictions) {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            for r in p {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let (Some(cw), Some(name)) = (&self.class_weights, &manifest.blobs.class_weights) {
            write_file(&dir.join(name), &f32_bytes(cw))?;
        }
        if let (Some(recs), Some(name)) = (&self.records, &manifest.blobs.records) {
            let mut out = Vec::new();
            for r in recs {
                serde_json::to_writer(&mut out, r)?;
                out.push(b'\n');
            }
            write_file(&dir.join(name), &out)?;
        }
        if let (Some(text), Some(name)) = (&self.embeddings, &manifest.blobs.embeddings) {
            write_file(&dir.join(name), text.as_bytes())?;
        }
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_file(&dir.join(MANIFEST_FILE), &json)
    }

    fn check_shapes(&self, m: &Manifest) -> Result<()> {
        let shape = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what}: {got} entries, manifest implies {want}")))
            }
        };
        shape("concept masks", self.concept_masks.len(), m.concepts.len())?;
        if let Some(bad) = self.concept_masks.iter().find(|b| b.len() != m.units) {
            return Err(Error::LengthMismatch {
                left: bad.len(),
                right: m.units,
            });
        }
        shape("activations", self.activations.len(), m.neurons.len())?;
        for a in &self.activations {
            shape("activation values", a.len(), m.activation_len())?;
        }
        if let Some(p) = &self.predictions {
            shape("predictions", p.len(), m.inputs)?;
        }
        if let Some(cw) = &self.class_weights {
            shape("class weights", cw.len(), m.neurons.len() * m.classes.len())?;
        }
        if let Some(r) = &self.records {
            shape("records", r.len(), m.inputs)?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes<'a>(values: impl IntoIterator<Item = &'a f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Counts returned by [`validate_container`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContainerSummary {
    pub task: TaskKind,
    pub inputs: usize,
    pub units: usize,
    pub concepts: usize,
    pub neurons: usize,
    pub predictions: bool,
    pub class_weights: bool,
    pub records: bool,
    pub embeddings: bool,
}

/// An opened container. Only the manifest is read eagerly.
#[derive(Clone, Debug)]
pub struct Container {
    root: PathBuf,
    manifest: Manifest,
}

impl Container {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if found != FORMAT_MAGIC {
            return Err(Error::BadMagic {
                expected: FORMAT_MAGIC.into(),
                found: found.into(),
            });
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::BadVersion {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        manifest.check()?;
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn blob(&self, label: &str, name: &str, expected: u64) -> Result<Vec<u8>> {
        let path = self.root.join(name);
        let actual = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        if actual != expected {
            return Err(Error::SizeMismatch {
                blob: format!("{label} ({name})"),
                expected,
                actual,
            });
        }
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn load_concept_masks(&self) -> Result<Vec<Bitmask>> {
        let m = &self.manifest;
        let per = Bitmask::byte_len(m.units);
        let bytes = self.blob("concept masks", &m.blobs.concepts, (per * m.concepts.len()) as u64)?;
        bytes
            .chunks_exact(per.max(1))
            .take(m.concepts.len())
            .enumerate()
            .map(|(i, chunk)| {
                Bitmask::from_le_bytes(m.units, chunk)
                    .map_err(|_| Error::Format(format!("concept {:?}: mask has bits past the unit count", m.concepts[i].name)))
            })
            .collect()
    }

    /// Concept store, with NEIGHBORS neighborhoods when embeddings exist.
    /// An NLI container without a concept table has its concepts derived
    /// from the sentence records.
    pub fn load_concepts(&self) -> Result<ConceptStore> {
        let m = &self.manifest;
        let embeddings = self.load_embeddings()?;
        if m.concepts.is_empty() {
            let records = self
                .load_records()?
                .ok_or_else(|| Error::Format("no concept table and no sentence records".into()))?;
            return build_nli_concepts(&records, &NliConceptConfig::default(), embeddings);
        }
        let concepts = m
            .concepts
            .iter()
            .zip(self.load_concept_masks()?)
            .map(|(c, mask)| Concept::new(c.name.clone(), c.category, mask))
            .collect();
        let store = ConceptStore::new(m.task, m.units, concepts)?;
        match (m.task, embeddings) {
            (TaskKind::Nli, Some(table)) => store.with_embeddings(table, DEFAULT_NEIGHBORS),
            _ => Ok(store),
        }
    }

    pub fn load_activation_values(&self) -> Result<Vec<Vec<f32>>> {
        let m = &self.manifest;
        let per = m.activation_len();
        let bytes = self.blob("activations", &m.blobs.activations, (per * m.neurons.len() * 4) as u64)?;
        Ok(bytes.chunks_exact((per * 4).max(1)).take(m.neurons.len()).map(f32_values).collect())
    }

    /// Activation tensors in manifest neuron order. Non-finite values are
    /// reported with the neuron id.
    pub fn load_activations(&self) -> Result<Vec<ActivationTensor>> {
        let m = &self.manifest;
        let values = self.load_activation_values()?;
        m.neurons
            .iter()
            .zip(values)
            .map(|(&id, v)| match (m.task, m.activation_grid, m.image_grid) {
                (TaskKind::Vision, Some(g), _) | (TaskKind::Vision, None, Some(g)) => {
                    ActivationTensor::spatial(id, m.inputs, g.height, g.width, v)
                }
                _ => ActivationTensor::scalar(id, v),
            })
            .collect()
    }

    pub fn load_predictions(&self) -> Result<Option<Vec<PredictionRecord>>> {
        let Some(name) = &self.manifest.blobs.predictions else {
            return Ok(None);
        };
        let path = self.root.join(name);
        let mut rdr = csv::Reader::from_path(&path)?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<PredictionRecord>, _>>()?;
        if rows.len() != self.manifest.inputs {
            return Err(Error::Format(format!(
                "predictions ({name}): {} rows, expected {}",
                rows.len(),
                self.manifest.inputs
            )));
        }
        Ok(Some(rows))
    }

    /// Predictions blob, or else the labels carried by the sentence records.
    pub fn load_labels(&self) -> Result<Option<Vec<PredictionRecord>>> {
        if let Some(p) = self.load_predictions()? {
            return Ok(Some(p));
        }
        Ok(self.load_records()?.map(|recs| {
            recs.into_iter()
                .map(|r| PredictionRecord {
                    gold: r.gold,
                    predicted: r.predicted,
                })
                .collect()
        }))
    }

    pub fn load_class_weights(&self) -> Result<Option<ClassWeights>> {
        let m = &self.manifest;
        let Some(name) = &m.blobs.class_weights else {
            return Ok(None);
        };
        let expected = (m.neurons.len() * m.classes.len() * 4) as u64;
        let values = f32_values(&self.blob("class weights", name, expected)?);
        ClassWeights::new(m.neurons.len(), m.classes.clone(), values).map(Some)
    }

    pub fn load_records(&self) -> Result<Option<Vec<SentencePairRecord>>> {
        let Some(name) = &self.manifest.blobs.records else {
            return Ok(None);
        };
        let path = self.root.join(name);
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SentencePairRecord = serde_json::from_str(&line)?;
            rec.validate()?;
            out.push(rec);
        }
        if out.len() != self.manifest.inputs {
            return Err(Error::Format(format!(
                "records ({name}): {} records, expected {}",
                out.len(),
                self.manifest.inputs
            )));
        }
        Ok(Some(out))
    }

    pub fn load_embeddings(&self) -> Result<Option<EmbeddingTable>> {
        match &self.manifest.blobs.embeddings {
            Some(name) => EmbeddingTable::from_path(&self.root.join(name)).map(Some),
            None => Ok(None),
        }
    }

    fn load_embedding_text(&self) -> Result<Option<String>> {
        match &self.manifest.blobs.embeddings {
            Some(name) => {
                let path = self.root.join(name);
                fs::read_to_string(&path).map(Some).map_err(|e| Error::io(&path, e))
            }
            None => Ok(None),
        }
    }

    /// Reads every blob.
    pub fn read_all(&self) -> Result<ContainerData> {
        let class_weights = match &self.manifest.blobs.class_weights {
            Some(_) => self.load_class_weights()?.map(|w| w.values().to_vec()),
            None => None,
        };
        Ok(ContainerData {
            manifest: self.manifest.clone(),
            concept_masks: self.load_concept_masks()?,
            activations: self.load_activation_values()?,
            predictions: self.load_predictions()?,
            class_weights,
            records: self.load_records()?,
            embeddings: self.load_embedding_text()?,
        })
    }
}

/// Full structural validation of the container at `dir`.
pub fn validate_container(dir: &Path) -> Result<ContainerSummary> {
    let c = Container::open(dir)?;
    let m = c.manifest();
    c.load_concept_masks()?;
    for (id, values) in m.neurons.iter().zip(c.load_activation_values()?) {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { neuron: id.0, index });
        }
    }
    let predictions = c.load_predictions()?.is_some();
    let class_weights = c.load_class_weights()?.is_some();
    let records = c.load_records()?.is_some();
    let embeddings = c.load_embeddings()?.is_some();
    c.load_concepts()?;
    Ok(ContainerSummary {
        task: m.task,
        inputs: m.inputs,
        units: m.units,
        concepts: m.concepts.len(),
        neurons: m.neurons.len(),
        predictions,
        class_weights,
        records,
        embeddings,
    })
}
