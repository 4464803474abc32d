//! Compositional explanations of neurons.
//!
//! A neuron is explained by the logical form over binary concept masks
//! (AND, OR, NOT, NEIGHBORS) whose mask best matches the neuron's thresholded
//! activation mask by intersection over union. Candidates are found by beam
//! search and scored incrementally with fused popcount kernels.
//!
//! ```
//! use compexp::bitmask::Bitmask;
//! use compexp::concepts::{Category, Concept, ConceptStore, TaskKind};
//! use compexp::search::{explain_neuron, SearchConfig};
//! use compexp::thresholding::{NeuronId, NeuronMask, ThresholdMode};
//!
//! let concepts = vec![
//!     Concept::new("water", Category::Object, Bitmask::from_bit_str("1100").unwrap()),
//!     Concept::new("sky", Category::Object, Bitmask::from_bit_str("0010").unwrap()),
//! ];
//! let store = ConceptStore::new(TaskKind::Vision, 4, concepts).unwrap();
//! let neuron = NeuronMask {
//!     neuron: NeuronId(0),
//!     mask: Bitmask::from_bit_str("1110").unwrap(),
//!     threshold: 0.0,
//!     mode: ThresholdMode::Positive,
//! };
//! let result = explain_neuron(&neuron, &store, &SearchConfig::default()).unwrap();
//! assert_eq!(result.best.formula.render(&store).unwrap(), "water OR sky");
//! assert_eq!(result.best.iou.value(), 1.0);
//! ```

pub mod analysis;
pub mod bitmask;
pub mod concepts;
pub mod container;
pub mod error;
pub mod formula;
pub mod report;
pub mod search;
pub mod synth;
pub mod thresholding;

mod par;

pub use error::{Error, Result};
pub use par::{is_parallel, with_jobs};
