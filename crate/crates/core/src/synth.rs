//! Synthetic datasets with planted formulas.
//!
//! Each primitive is an independent Bernoulli(`density`) mask. Each neuron
//! gets a random formula over distinct primitives, grown left to right with
//! AND, OR, AND NOT or OR NOT, redrawn until its active fraction lies in
//! `[min_fraction, max_fraction]`. The neuron mask is that formula's mask
//! with every bit flipped with probability `noise`. Activations are 0 for
//! inactive units and uniform in `[0.5, 1)` for active ones, so positive
//! thresholding recovers the noisy mask exactly.

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitmask::Bitmask;
use crate::concepts::{Category, Concept, ConceptId, ConceptStore, TaskKind};
use crate::container::{ConceptEntry, ContainerData, Manifest};
use crate::error::{Error, Result};
use crate::formula::{Connective, EvalCache, Formula};
use crate::thresholding::{NeuronId, NeuronMask, ThresholdMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub units: usize,
    pub primitives: usize,
    pub neurons: usize,
    pub planted_length: usize,
    pub noise: f64,
    pub density: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            units: 4096,
            primitives: 20,
            neurons: 16,
            planted_length: 3,
            noise: 0.0,
            density: 0.4,
            min_fraction: 0.2,
            max_fraction: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.primitives == 0 || self.neurons == 0 || self.planted_length == 0 {
            return Err(Error::Config("units, primitives, neurons and planted length must be positive".into()));
        }
        if self.planted_length > self.primitives {
            return Err(Error::Config(format!(
                "planted length {} exceeds the {} available primitives",
                self.planted_length, self.primitives
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1)", self.density)));
        }
        if !(0.0..1.0).contains(&self.min_fraction) || !(self.min_fraction < self.max_fraction && self.max_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "planted fraction bounds [{}, {}] are not a subrange of [0, 1]",
                self.min_fraction, self.max_fraction
            )));
        }
        if self.neurons > u32::MAX as usize {
            return Err(Error::Config("too many neurons".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedNeuron {
    pub neuron: NeuronId,
    pub formula: Formula,
    /// Mask of `formula`, before noise.
    pub clean: Bitmask,
    pub mask: Bitmask,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub store: ConceptStore,
    pub planted: Vec<PlantedNeuron>,
}

/// Bernoulli(`p`) mask, 16 bits of randomness per unit.
fn bernoulli_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Bitmask {
    let cut = (p * 65536.0).round() as u32;
    let mut words = vec![0u64; len.div_ceil(64)];
    for (wi, w) in words.iter_mut().enumerate() {
        let bits = (len - wi * 64).min(64);
        let mut out = 0u64;
        for chunk in 0..bits.div_ceil(4) {
            let r = rng.next_u64();
            for j in 0..4 {
                let b = chunk * 4 + j;
                if b < bits && ((r >> (16 * j)) as u32 & 0xffff) < cut {
                    out |= 1 << b;
                }
            }
        }
        *w = out;
    }
    Bitmask::from_words(len, words).expect("pad bits clear")
}

pub fn concept_name(i: usize, primitives: usize) -> String {
    let width = primitives.saturating_sub(1).to_string().len().max(2);
    format!("c{i:0width$}")
}

const MAX_DRAWS: usize = 1000;

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concepts: Vec<Concept> = (0..spec.primitives)
        .map(|i| {
            let mut mask = bernoulli_mask(&mut rng, spec.units, spec.density);
            if !mask.any() {
                mask.set(rng.random_range(0..spec.units), true);
            }
            Concept::new(concept_name(i, spec.primitives), Category::Other, mask)
        })
        .collect();
    let store = ConceptStore::new(TaskKind::Nli, spec.units, concepts)?;

    let mut planted = Vec::with_capacity(spec.neurons);
    for n in 0..spec.neurons {
        let (formula, clean) = plant(&mut rng, &store, spec)?;
        let mut mask = clean.clone();
        if spec.noise > 0.0 {
            let flips = bernoulli_mask(&mut rng, spec.units, spec.noise);
            mask = mask.xor(&flips)?;
        }
        planted.push(PlantedNeuron {
            neuron: NeuronId(n as u32),
            formula,
            clean,
            mask,
        });
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        store,
        planted,
    })
}

/// Random formula whose active fraction lies within the `SynthSpec` fraction bounds.
fn plant(rng: &mut ChaCha8Rng, store: &ConceptStore, spec: &SynthSpec) -> Result<(Formula, Bitmask)> {
    let units = spec.units as f64;
    for _ in 0..MAX_DRAWS {
        let ids = sample(rng, spec.primitives, spec.planted_length);
        let mut f = Formula::primitive(ConceptId(ids.index(0) as u32));
        for k in 1..spec.planted_length {
            let lit = Formula::primitive(ConceptId(ids.index(k) as u32));
            let op = if rng.random_bool(0.5) { Connective::And } else { Connective::Or };
            let rhs = if rng.random_bool(0.5) { Formula::not(lit) } else { lit };
            f = f.compose(op, rhs);
        }
        let mask = f.evaluate(store, &mut EvalCache::new())?;
        let frac = mask.popcount() as f64 / units;
        if mask.any() && frac >= spec.min_fraction && frac <= spec.max_fraction {
            return Ok((f, mask));
        }
    }
    Err(Error::Config(format!(
        "no formula of length {} over {} primitives (density {}) reached an active fraction in [{}, {}]",
        spec.planted_length, spec.primitives, spec.density, spec.min_fraction, spec.max_fraction
    )))
}

impl SynthDataset {
    pub fn neuron_masks(&self) -> Vec<NeuronMask> {
        self.planted
            .iter()
            .map(|p| NeuronMask {
                neuron: p.neuron,
                mask: p.mask.clone(),
                threshold: 0.0,
                mode: ThresholdMode::Positive,
            })
            .collect()
    }

    /// Container holding the primitives, activations and planted formulas.
    pub fn to_container(&self) -> Result<ContainerData> {
        let mut manifest = Manifest::new(TaskKind::Nli, self.spec.units, None);
        manifest.concepts = self
            .store
            .concepts()
            .iter()
            .map(|c| ConceptEntry {
                name: c.name.clone(),
                category: c.category,
            })
            .collect();
        manifest.neurons = self.planted.iter().map(|p| p.neuron).collect();
        let planted = self
            .planted
            .iter()
            .map(|p| {
                Ok(serde_json::json!({
                    "neuron": p.neuron,
                    "formula": p.formula.render(&self.store)?,
                    "key": p.formula.canonical_key(),
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        manifest.metadata = serde_json::json!({
            "generator": "synth",
            "spec": self.spec,
            "planted": planted,
        });

        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_ac71);
        let activations = self
            .planted
            .iter()
            .map(|p| {
                (0..self.spec.units)
                    .map(|i| if p.mask.get(i) { rng.random_range(0.5f32..1.0) } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(ContainerData {
            manifest,
            concept_masks: self.store.concepts().iter().map(|c| c.mask.clone()).collect(),
            activations,
            predictions: None,
            class_weights: None,
            records: None,
            embeddings: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::Container;

    fn spec(noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            units: 2000,
            primitives: 8,
            neurons: 4,
            noise,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&spec(0.02, 3)).unwrap().to_container().unwrap().write(a.path()).unwrap();
        generate(&spec(0.02, 3)).unwrap().to_container().unwrap().write(b.path()).unwrap();
        for f in ["manifest.json", "concepts.bin", "activations.bin"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let c = generate(&spec(0.02, 4)).unwrap();
        assert_ne!(c.planted[0].mask, generate(&spec(0.02, 3)).unwrap().planted[0].mask);
    }

    #[test]
    fn noiseless_mask_is_formula() {
        let d = generate(&spec(0.0, 1)).unwrap();
        for p in &d.planted {
            assert_eq!(p.formula.length(), 3);
            let frac = p.clean.popcount() as f64 / 2000.0;
            assert!((0.2..=0.6).contains(&frac), "{frac}");
            assert_eq!(p.mask, p.formula.evaluate(&d.store, &mut EvalCache::new()).unwrap());
            let ids = p.formula.concept_ids();
            let mut uniq = ids.clone();
            uniq.dedup();
            assert_eq!(uniq.len(), ids.len());
        }
    }

    #[test]
    fn noise_rate_matches_expectation() {
        let d = generate(&SynthSpec {
            units: 50_000,
            neurons: 8,
            noise: 0.02,
            ..SynthSpec::default()
        })
        .unwrap();
        for p in &d.planted {
            let flipped = p.mask.xor(&p.clean).unwrap().popcount() as f64 / 50_000.0;
            assert!((flipped - 0.02).abs() <= 0.01, "{flipped}");
        }
    }

    #[test]
    fn density_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = bernoulli_mask(&mut rng, 100_003, 0.25);
        let frac = m.popcount() as f64 / 100_003.0;
        assert!((frac - 0.25).abs() < 0.01, "{frac}");
    }

    #[test]
    fn contradictory_spec_is_config_error() {
        let bad = SynthSpec {
            primitives: 2,
            planted_length: 3,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let unreachable = SynthSpec {
            planted_length: 1,
            density: 0.05,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&unreachable), Err(Error::Config(_))));
    }

    #[test]
    fn container_activations_threshold_to_mask() {
        let d = generate(&spec(0.02, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.to_container().unwrap().write(dir.path()).unwrap();
        let c = Container::open(dir.path()).unwrap();
        let acts = c.load_activations().unwrap();
        for (a, p) in acts.iter().zip(&d.planted) {
            let m = crate::thresholding::positive_threshold(a).unwrap();
            assert_eq!(m.mask, p.mask);
        }
        let planted = &c.manifest().metadata["planted"];
        assert_eq!(planted.as_array().unwrap().len(), 4);
        let text = planted[0]["formula"].as_str().unwrap();
        let store = c.load_concepts().unwrap();
        assert_eq!(Formula::parse(text, &store).unwrap(), d.planted[0].formula);
    }
}
