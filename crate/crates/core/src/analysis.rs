//! Analyses over explanation results: dead-neuron filtering, accuracy when a
//! neuron fires and its correlation with IoU, concept uniqueness, and the
//! neurons that contribute most to an output class.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bitmask::Bitmask;
use crate::error::{Error, Result};
use crate::formula::CanonicalKey;
use crate::search::ExplanationResult;
use crate::thresholding::{NeuronId, NeuronMask};

/// Default minimum number of active units for a neuron to be analyzed.
pub const DEFAULT_MIN_ACTIVATIONS: u64 = 500;

/// Keeps neurons with at least `min_count` active units.
pub fn filter_active(mut masks: Vec<NeuronMask>, min_count: u64) -> Vec<NeuronMask> {
    masks.retain(|m| m.mask.popcount() >= min_count);
    masks
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub gold: String,
    pub predicted: String,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.gold == self.predicted
    }
}

/// One bit per input: set when any of the input's `units_per_input` units is
/// active.
pub fn input_activity(mask: &Bitmask, units_per_input: usize) -> Result<Bitmask> {
    if units_per_input == 1 {
        return Ok(mask.clone());
    }
    mask.any_per_group(units_per_input)
}

/// Model accuracy over the inputs where `active` is set. `None` when the
/// neuron is never active.
pub fn neuron_accuracy(active: &Bitmask, preds: &[PredictionRecord]) -> Result<Option<f64>> {
    if active.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: active.len(),
            right: preds.len(),
        });
    }
    let (mut seen, mut correct) = (0u64, 0u64);
    for i in active.iter_ones() {
        seen += 1;
        correct += u64::from(preds[i].is_correct());
    }
    Ok((seen > 0).then(|| correct as f64 / seen as f64))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in correlation input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson over pairs, dropping any pair with a missing side.
pub fn pearson_pairs(x: &[Option<f64>], y: &[Option<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    pearson(&xs, &ys)
}

/// IoU-vs-accuracy correlation at every max formula length, using each
/// result's best-so-far curve. `accuracy[i]` belongs to `results[i]`.
pub fn correlation_by_length(
    results: &[ExplanationResult],
    accuracy: &[Option<f64>],
) -> Result<Vec<Option<f64>>> {
    if results.len() != accuracy.len() {
        return Err(Error::LengthMismatch {
            left: results.len(),
            right: accuracy.len(),
        });
    }
    let curves: Vec<Vec<f64>> = results.iter().map(|r| r.iou_curve()).collect();
    correlation_by_length_from_curves(&curves, accuracy)
}

pub fn correlation_by_length_from_curves(
    curves: &[Vec<f64>],
    accuracy: &[Option<f64>],
) -> Result<Vec<Option<f64>>> {
    let max_len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..max_len)
        .map(|l| {
            let ious: Vec<Option<f64>> = curves.iter().map(|c| c.get(l).copied()).collect();
            match pearson_pairs(&ious, accuracy) {
                Ok(r) => Ok(Some(r)),
                Err(Error::UndefinedCorrelation(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessStats {
    pub neurons: usize,
    pub distinct: usize,
    /// Mean number of neurons per distinct concept.
    pub mean_count: f64,
    /// Percentage of distinct concepts that explain exactly one neuron.
    pub percent_unique: f64,
    /// occurrences → number of concepts with that many occurrences
    pub histogram: BTreeMap<usize, usize>,
    /// Most repeated concepts, most frequent first (ties by key).
    pub top: Vec<(CanonicalKey, usize)>,
}

pub fn uniqueness_stats<'a, I>(keys: I, top_k: usize) -> Result<UniquenessStats>
where
    I: IntoIterator<Item = &'a CanonicalKey>,
{
    let mut counts: HashMap<&CanonicalKey, usize> = HashMap::new();
    let mut neurons = 0;
    for k in keys {
        *counts.entry(k).or_default() += 1;
        neurons += 1;
    }
    if neurons == 0 {
        return Err(Error::Degenerate("no explanations to summarize".into()));
    }
    let distinct = counts.len();
    let unique = counts.values().filter(|&&c| c == 1).count();
    let mut histogram = BTreeMap::new();
    for &c in counts.values() {
        *histogram.entry(c).or_default() += 1;
    }
    let mut top: Vec<(CanonicalKey, usize)> =
        counts.into_iter().map(|(k, c)| (k.clone(), c)).collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top.truncate(top_k);
    Ok(UniquenessStats {
        neurons,
        distinct,
        mean_count: neurons as f64 / distinct as f64,
        percent_unique: 100.0 * unique as f64 / distinct as f64,
        histogram,
        top,
    })
}

/// Uniqueness of each result's best formula.
pub fn uniqueness_of(results: &[ExplanationResult], top_k: usize) -> Result<UniquenessStats> {
    uniqueness_stats(results.iter().map(|r| &r.best.key), top_k)
}

/// Uniqueness at each max formula length `1..=N`.
pub fn uniqueness_by_length(results: &[ExplanationResult], top_k: usize) -> Result<Vec<UniquenessStats>> {
    let max_len = results.iter().map(|r| r.per_length.len()).max().unwrap_or(0);
    (0..max_len)
        .map(|l| {
            uniqueness_stats(
                results.iter().filter_map(|r| r.per_length.get(l).map(|e| &e.key)),
                top_k,
            )
        })
        .collect()
}

/// Final-layer weights, `neurons × classes`, neuron-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    neurons: usize,
    class_names: Vec<String>,
    values: Vec<f32>,
}

impl ClassWeights {
    pub fn new(neurons: usize, class_names: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != neurons * class_names.len() {
            return Err(Error::Shape(format!(
                "{} weights do not form a {neurons}x{} matrix",
                values.len(),
                class_names.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite class weight at index {i}")));
        }
        Ok(Self {
            neurons,
            class_names,
            values,
        })
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn weight(&self, neuron: usize, class: usize) -> f32 {
        self.values[neuron * self.classes() + class]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// The `k` neurons with the largest weight into `class`, ties by neuron id.
pub fn class_contributions(weights: &ClassWeights, class: usize, k: usize) -> Result<Vec<(NeuronId, f32)>> {
    if class >= weights.classes() {
        return Err(Error::Config(format!(
            "class {class} out of range ({} classes)",
            weights.classes()
        )));
    }
    let mut ranked: Vec<(NeuronId, f32)> = (0..weights.neurons())
        .map(|n| (NeuronId(n as u32), weights.weight(n, class)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thresholding::ThresholdMode;
    use proptest::prelude::*;

    fn nm(id: u32, ones: usize, len: usize) -> NeuronMask {
        NeuronMask {
            neuron: NeuronId(id),
            mask: Bitmask::from_indices(len, 0..ones).unwrap(),
            threshold: 0.0,
            mode: ThresholdMode::Positive,
        }
    }

    fn pred(ok: bool) -> PredictionRecord {
        PredictionRecord {
            gold: "a".into(),
            predicted: if ok { "a".into() } else { "b".into() },
        }
    }

    #[test]
    fn filter_boundaries() {
        let masks = vec![nm(0, 499, 1000), nm(1, 500, 1000), nm(2, 0, 1000)];
        let kept: Vec<u32> = filter_active(masks.clone(), 500).iter().map(|m| m.neuron.0).collect();
        assert_eq!(kept, [1]);
        assert_eq!(filter_active(masks, 0).len(), 3);
    }

    #[test]
    fn accuracy_counts() {
        let active = Bitmask::from_bit_str("111100").unwrap();
        let preds = [pred(true), pred(true), pred(false), pred(true), pred(false), pred(false)];
        assert_eq!(neuron_accuracy(&active, &preds).unwrap(), Some(0.75));
        let all_ok = vec![pred(true); 6];
        assert_eq!(neuron_accuracy(&Bitmask::from_bit_str("010010").unwrap(), &all_ok).unwrap(), Some(1.0));
        assert_eq!(neuron_accuracy(&Bitmask::zeros(6), &preds).unwrap(), None);
        assert!(neuron_accuracy(&Bitmask::zeros(5), &preds).is_err());
    }

    #[test]
    fn any_pixel_reduction() {
        let pixels = Bitmask::from_bit_str("0000 0010 1111").unwrap();
        assert_eq!(input_activity(&pixels, 4).unwrap(), Bitmask::from_bit_str("011").unwrap());
    }

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let lin: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &lin).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        // closed form: Σdxdy = 4, Σdx² = Σdy² = 5
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::UndefinedCorrelation(_))));
        let r = pearson_pairs(
            &[Some(1.0), None, Some(2.0), Some(3.0), Some(4.0)],
            &[Some(1.0), Some(9.0), Some(3.0), Some(2.0), Some(4.0)],
        )
        .unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    fn keys(names: &[&str]) -> Vec<CanonicalKey> {
        use crate::concepts::ConceptId;
        use crate::formula::Formula;
        let ids: Vec<u32> = names.iter().map(|n| n.as_bytes()[0] as u32).collect();
        ids.into_iter().map(|i| Formula::Primitive(ConceptId(i)).canonical_key()).collect()
    }

    #[test]
    fn uniqueness_fixtures() {
        let k = keys(&["A", "A", "B", "C"]);
        let s = uniqueness_stats(&k, 10).unwrap();
        assert!((s.mean_count - 4.0 / 3.0).abs() < 1e-9);
        assert!((s.percent_unique - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(s.top[0], (k[0].clone(), 2));
        assert_eq!(s.histogram, BTreeMap::from([(1, 2), (2, 1)]));

        let s = uniqueness_stats(&keys(&["A", "B", "C"]), 10).unwrap();
        assert_eq!((s.mean_count, s.percent_unique), (1.0, 100.0));
        let s = uniqueness_stats(&keys(&["A", "A", "A"]), 10).unwrap();
        assert_eq!((s.mean_count, s.percent_unique), (3.0, 0.0));
        assert!(uniqueness_stats(&[], 10).is_err());
    }

    #[test]
    fn contribution_ranking() {
        let w = ClassWeights::new(3, vec!["c0".into()], vec![0.1, 0.9, -0.5]).unwrap();
        assert_eq!(class_contributions(&w, 0, 2).unwrap(), [(NeuronId(1), 0.9), (NeuronId(0), 0.1)]);
        assert!(class_contributions(&w, 0, 0).unwrap().is_empty());
        assert!(class_contributions(&w, 1, 2).is_err());
        let tied = ClassWeights::new(3, vec!["x".into(), "y".into()], vec![0.5, 0.0, 0.7, 0.0, 0.7, 0.0]).unwrap();
        assert_eq!(class_contributions(&tied, 0, 3).unwrap(), [(NeuronId(1), 0.7), (NeuronId(2), 0.7), (NeuronId(0), 0.5)]);
        assert!(ClassWeights::new(2, vec!["x".into()], vec![1.0]).is_err());
        assert!(ClassWeights::new(1, vec!["x".into()], vec![f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..50),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(r) = pearson(&x, &y) {
                let xt: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
                let yneg: Vec<f64> = y.iter().map(|v| -v).collect();
                prop_assert!((pearson(&xt, &y).unwrap() - r).abs() < 1e-9);
                prop_assert!((pearson(&x, &yneg).unwrap() + r).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn uniqueness_mean_times_distinct_is_count(ids in proptest::collection::vec(0u8..5, 1..40)) {
            let names: Vec<String> = ids.iter().map(|i| ((b'A' + i) as char).to_string()).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let s = uniqueness_stats(&keys(&refs), 3).unwrap();
            prop_assert!((s.mean_count * s.distinct as f64 - s.neurons as f64).abs() < 1e-9);
        }
    }
}
