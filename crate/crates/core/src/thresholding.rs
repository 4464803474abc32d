//! Activation tensors and their conversion to binary neuron masks.
//!
//! Spatial activations are bilinearly upsampled to mask resolution first,
//! then thresholded over all units of the probing set at once.
//!
//! Upsampling uses half-pixel centers: output index `i` maps to source
//! coordinate `(i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`, and
//! each axis interpolates as `a + t * (b - a)` in `f32`, clamped to
//! `[min(a, b), max(a, b)]`. Each pair of source rows is interpolated
//! horizontally first, then the two results vertically.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitmask::Bitmask;
use crate::error::{Error, Result};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NeuronId(pub u32);

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values do not form a {height}x{width} grid",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Activations {
    /// One value per input.
    Scalar(Vec<f32>),
    /// `images` grids of `height × width`, image-major then row-major.
    Spatial {
        images: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    pub neuron: NeuronId,
    pub data: Activations,
}

fn check_finite(neuron: NeuronId, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            neuron: neuron.0,
            index,
        }),
        None => Ok(()),
    }
}

impl ActivationTensor {
    pub fn scalar(neuron: NeuronId, values: Vec<f32>) -> Result<Self> {
        check_finite(neuron, &values)?;
        Ok(Self {
            neuron,
            data: Activations::Scalar(values),
        })
    }

    pub fn spatial(
        neuron: NeuronId,
        images: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != images * height * width {
            return Err(Error::Shape(format!(
                "{} values do not form {images} grids of {height}x{width}",
                values.len()
            )));
        }
        check_finite(neuron, &values)?;
        Ok(Self {
            neuron,
            data: Activations::Spatial {
                images,
                height,
                width,
                values,
            },
        })
    }

    /// All values in sample-unit order.
    pub fn values(&self) -> &[f32] {
        match &self.data {
            Activations::Scalar(v) => v,
            Activations::Spatial { values, .. } => values,
        }
    }

    pub fn units(&self) -> usize {
        self.values().len()
    }

    /// Upsamples every image grid to `height × width`. Scalar tensors are
    /// returned unchanged.
    pub fn upsampled(&self, height: usize, width: usize) -> Result<ActivationTensor> {
        match &self.data {
            Activations::Scalar(_) => Ok(self.clone()),
            Activations::Spatial {
                images,
                height: h,
                width: w,
                values,
            } => {
                let mut out = Vec::with_capacity(images * height * width);
                for img in values.chunks_exact(h * w) {
                    upsample_into(img, *h, *w, height, width, &mut out)?;
                }
                Ok(ActivationTensor {
                    neuron: self.neuron,
                    data: Activations::Spatial {
                        images: *images,
                        height,
                        width,
                        values: out,
                    },
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThresholdMode {
    Quantile { p: f64 },
    Positive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronMask {
    pub neuron: NeuronId,
    pub mask: Bitmask,
    pub threshold: f32,
    pub mode: ThresholdMode,
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f32,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f32 / output as f32;
    let max = (input - 1) as f32;
    (0..output)
        .map(|i| {
            let x = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                t: x - lo as f32,
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

fn upsample_into(
    src: &[f32],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    out: &mut Vec<f32>,
) -> Result<()> {
    if height == 0 || width == 0 || src.len() != height * width {
        return Err(Error::Shape("empty activation grid".into()));
    }
    if out_h < height || out_w < width {
        return Err(Error::Shape(format!(
            "cannot upsample {height}x{width} to smaller {out_h}x{out_w}"
        )));
    }
    let rows = taps(height, out_h);
    let cols = taps(width, out_w);
    for r in &rows {
        let (top, bottom) = (&src[r.lo * width..][..width], &src[r.hi * width..][..width]);
        for c in &cols {
            let upper = lerp(top[c.lo], top[c.hi], c.t);
            let lower = lerp(bottom[c.lo], bottom[c.hi], c.t);
            out.push(lerp(upper, lower, r.t));
        }
    }
    Ok(())
}

pub fn upsample_bilinear(grid: &Grid, height: usize, width: usize) -> Result<Grid> {
    let mut out = Vec::with_capacity(height * width);
    upsample_into(&grid.values, grid.height, grid.width, height, width, &mut out)?;
    Grid::new(height, width, out)
}

/// Largest count `c` of strictly-greater values with `c / n <= p`.
fn max_active(n: usize, p: f64) -> usize {
    let nf = n as f64;
    let mut c = ((p * nf).floor() as usize).min(n);
    while c < n && ((c + 1) as f64) / nf <= p {
        c += 1;
    }
    while c > 0 && (c as f64) / nf > p {
        c -= 1;
    }
    c
}

/// Smallest value `v` in `values` such that the fraction of values strictly
/// greater than `v` is at most `p`.
pub fn quantile_value(values: &[f32], p: f64) -> Result<f32> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("quantile {p} must lie in (0, 1)")));
    }
    if values.is_empty() {
        return Err(Error::Degenerate("no activations to threshold".into()));
    }
    let n = values.len();
    // normalize -0.0 so the total order agrees with `>`
    let mut scratch: Vec<f32> = values.iter().map(|v| v + 0.0).collect();
    let k = n - max_active(n, p) - 1;
    let (_, kth, _) = scratch.select_nth_unstable_by(k, f32::total_cmp);
    Ok(*kth)
}

/// Optional uniform subsample used to estimate the quantile threshold on very
/// large probing sets. The mask itself is still computed over every unit.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuantileOptions {
    pub subsample: Option<Subsample>,
}

#[derive(Clone, Copy, Debug)]
pub struct Subsample {
    pub size: usize,
    pub seed: u64,
}

fn mask_above(values: &[f32], threshold: f32) -> Bitmask {
    Bitmask::from_bools(values.iter().map(|&v| v > threshold))
}

pub fn quantile_threshold(acts: &ActivationTensor, p: f64) -> Result<NeuronMask> {
    quantile_threshold_with(acts, p, &QuantileOptions::default())
}

pub fn quantile_threshold_with(
    acts: &ActivationTensor,
    p: f64,
    opts: &QuantileOptions,
) -> Result<NeuronMask> {
    let values = acts.values();
    check_finite(acts.neuron, values)?;
    let sample: Cow<[f32]> = match opts.subsample {
        Some(Subsample { size, seed }) if size > 0 && size < values.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Cow::Owned(
                (0..size)
                    .map(|_| values[rng.random_range(0..values.len())])
                    .collect(),
            )
        }
        _ => Cow::Borrowed(values),
    };
    let threshold = quantile_value(&sample, p)?;
    Ok(NeuronMask {
        neuron: acts.neuron,
        mask: mask_above(values, threshold),
        threshold,
        mode: ThresholdMode::Quantile { p },
    })
}

/// Mask of strictly positive activations.
pub fn positive_threshold(acts: &ActivationTensor) -> Result<NeuronMask> {
    let values = acts.values();
    check_finite(acts.neuron, values)?;
    Ok(NeuronMask {
        neuron: acts.neuron,
        mask: mask_above(values, 0.0),
        threshold: 0.0,
        mode: ThresholdMode::Positive,
    })
}

/// Upsample (spatial tensors only) to `mask_dims` then threshold.
pub fn threshold_neuron(
    acts: &ActivationTensor,
    mode: ThresholdMode,
    mask_dims: Option<(usize, usize)>,
    opts: &QuantileOptions,
) -> Result<NeuronMask> {
    let up;
    let acts = match (&acts.data, mask_dims) {
        (Activations::Spatial { .. }, Some((h, w))) => {
            up = acts.upsampled(h, w)?;
            &up
        }
        _ => acts,
    };
    match mode {
        ThresholdMode::Quantile { p } => quantile_threshold_with(acts, p, opts),
        ThresholdMode::Positive => positive_threshold(acts),
    }
}

/// [`threshold_neuron`] over many neurons, in input order.
pub fn threshold_all(
    acts: &[ActivationTensor],
    mode: ThresholdMode,
    mask_dims: Option<(usize, usize)>,
    opts: &QuantileOptions,
) -> Result<Vec<NeuronMask>> {
    crate::par::map(acts, |a| threshold_neuron(a, mode, mask_dims, opts))
        .into_iter()
        .collect()
}
