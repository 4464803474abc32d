//! Packed binary vectors over sample units.
//!
//! Bit `i` lives in word `i / 64` at bit position `i % 64` (LSB-first), and
//! words serialize little-endian. Bits at positions `>= len` are always zero.
//! This layout is shared with the on-disk container format.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

const WORD_BITS: usize = u64::BITS as usize;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitmask {
    len: usize,
    words: Vec<u64>,
}

#[inline]
fn word_count(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Mask of valid bits in the final word, or `!0` when `len` is a multiple of 64.
#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => !0,
        r => (1u64 << r) - 1,
    }
}

impl Bitmask {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; word_count(len)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self {
            len,
            words: vec![!0; word_count(len)],
        };
        m.clear_padding();
        m
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for b in bits {
            if len % WORD_BITS == 0 {
                words.push(0);
            }
            if b {
                *words.last_mut().unwrap() |= 1 << (len % WORD_BITS);
            }
            len += 1;
        }
        Self { len, words }
    }

    /// Builds a mask from the indices of set bits.
    pub fn from_indices<I: IntoIterator<Item = usize>>(len: usize, ones: I) -> Result<Self> {
        let mut m = Self::zeros(len);
        for i in ones {
            if i >= len {
                return Err(Error::Shape(format!("bit index {i} out of range for length {len}")));
            }
            m.set(i, true);
        }
        Ok(m)
    }

    /// Wraps packed words. Rejects a wrong word count or stray padding bits.
    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != word_count(len) {
            return Err(Error::Shape(format!(
                "{} words cannot hold exactly {len} bits",
                words.len()
            )));
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(len) != 0 {
                return Err(Error::Format(format!(
                    "padding bits set beyond length {len}"
                )));
            }
        }
        Ok(Self { len, words })
    }

    /// Parses a `0`/`1` string, index 0 first. Handy in tests and fixtures.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Parse {
                    pos: 0,
                    msg: format!("unexpected character {other:?} in bit string"),
                }),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bools)
    }

    pub fn from_le_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        let expected = word_count(len) * 8;
        if bytes.len() != expected {
            return Err(Error::Shape(format!(
                "{} bytes cannot hold a {len}-bit mask (need {expected})",
                bytes.len()
            )));
        }
        let words = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_words(len, words)
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        out.reserve(self.words.len() * 8);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    /// Serialized size in bytes of a mask over `len` units.
    pub fn byte_len(len: usize) -> usize {
        word_count(len) * 8
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        let bit = 1u64 << (i % WORD_BITS);
        let w = &mut self.words[i / WORD_BITS];
        if value {
            *w |= bit;
        } else {
            *w &= !bit;
        }
    }

    pub fn popcount(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn any(&self) -> bool {
        self.words.iter().any(|&w| w != 0)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let tz = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * WORD_BITS + tz)
            })
        })
    }

    fn check_len(&self, other: &Bitmask) -> Result<()> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(())
    }

    fn clear_padding(&mut self) {
        let mask = tail_mask(self.len);
        if let Some(last) = self.words.last_mut() {
            *last &= mask;
        }
    }

    fn zip_with(&self, other: &Bitmask, f: impl Fn(u64, u64) -> u64) -> Result<Bitmask> {
        self.check_len(other)?;
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let mut out = Bitmask {
            len: self.len,
            words,
        };
        out.clear_padding();
        Ok(out)
    }

    pub fn and(&self, other: &Bitmask) -> Result<Bitmask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Bitmask) -> Result<Bitmask> {
        self.zip_with(other, |a, b| a | b)
    }

    /// `self ∧ ¬other`
    pub fn and_not(&self, other: &Bitmask) -> Result<Bitmask> {
        self.zip_with(other, |a, b| a & !b)
    }

    /// `self ∨ ¬other`
    pub fn or_not(&self, other: &Bitmask) -> Result<Bitmask> {
        self.zip_with(other, |a, b| a | !b)
    }

    pub fn xor(&self, other: &Bitmask) -> Result<Bitmask> {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn not(&self) -> Bitmask {
        let mut out = Bitmask {
            len: self.len,
            words: self.words.iter().map(|w| !w).collect(),
        };
        out.clear_padding();
        out
    }

    pub fn or_assign(&mut self, other: &Bitmask) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Bitmask) -> Result<u64> {
        self.check_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| u64::from((a & b).count_ones()))
            .sum())
    }

    pub fn union_count(&self, other: &Bitmask) -> Result<u64> {
        self.check_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| u64::from((a | b).count_ones()))
            .sum())
    }

    /// Exact IoU as an integer ratio.
    pub fn iou_score(&self, other: &Bitmask) -> Result<Iou> {
        self.check_len(other)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += u64::from((a & b).count_ones());
            union += u64::from((a | b).count_ones());
        }
        Ok(Iou::new(inter, union))
    }

    /// Intersection over union. Two empty masks score exactly 0.
    pub fn iou(&self, other: &Bitmask) -> Result<f64> {
        self.iou_score(other).map(|s| s.value())
    }

    /// Collapses a sample-major mask into one bit per group of `group` units,
    /// set when any unit in the group is set.
    pub fn any_per_group(&self, group: usize) -> Result<Bitmask> {
        if group == 0 || !self.len.is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "cannot split {} units into groups of {group}",
                self.len
            )));
        }
        let groups = self.len / group;
        let mut out = Bitmask::zeros(groups);
        for i in self.iter_ones() {
            out.set(i / group, true);
        }
        Ok(out)
    }

    /// Expands one bit per group into `group` identical bits.
    pub fn broadcast_groups(&self, group: usize) -> Bitmask {
        let mut out = Bitmask::zeros(self.len * group);
        for g in self.iter_ones() {
            for i in g * group..(g + 1) * group {
                out.set(i, true);
            }
        }
        out
    }
}

impl fmt::Debug for Bitmask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 128 {
            let bits: String = (0..self.len)
                .map(|i| if self.get(i) { '1' } else { '0' })
                .collect();
            write!(f, "Bitmask({bits})")
        } else {
            write!(f, "Bitmask(len={}, popcount={})", self.len, self.popcount())
        }
    }
}

/// IoU held as `intersection / union`, compared exactly by cross-multiplication.
#[derive(Clone, Copy, Debug, Default)]
pub struct Iou {
    pub intersection: u64,
    pub union: u64,
}

impl Iou {
    pub fn new(intersection: u64, union: u64) -> Self {
        debug_assert!(intersection <= union);
        Self {
            intersection,
            union,
        }
    }

    pub fn value(self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

impl Ord for Iou {
    fn cmp(&self, other: &Self) -> Ordering {
        // empty union counts as 0/1
        let (a_num, a_den) = (self.intersection, self.union.max(1));
        let (b_num, b_den) = (other.intersection, other.union.max(1));
        (u128::from(a_num) * u128::from(b_den)).cmp(&(u128::from(b_num) * u128::from(a_den)))
    }
}

impl PartialEq for Iou {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Iou {}

impl PartialOrd for Iou {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Counts `(|base ∧ lit|, |target ∧ base ∧ lit|)` in one pass.
///
/// Together with per-mask totals these two counts determine the IoU of all
/// four compositions `base AND lit`, `base OR lit`, `base AND NOT lit` and
/// `base OR NOT lit` against `target` (see [`CompositionCounts`]).
pub fn fused_counts(target: &Bitmask, base: &Bitmask, lit: &Bitmask) -> Result<(u64, u64)> {
    target.check_len(base)?;
    target.check_len(lit)?;
    Ok(kernel::fused_counts(&target.words, &base.words, &lit.words))
}

/// Per-mask totals that, combined with [`fused_counts`], score compositions.
#[derive(Clone, Copy, Debug)]
pub struct CompositionCounts {
    pub units: u64,
    pub target: u64,
    pub base: u64,
    pub target_base: u64,
    pub lit: u64,
    pub target_lit: u64,
}

impl CompositionCounts {
    /// IoU of each composition in the order AND, OR, AND NOT, OR NOT.
    pub fn scores(&self, base_lit: u64, target_base_lit: u64) -> [Iou; 4] {
        let CompositionCounts {
            units,
            target,
            base,
            target_base,
            lit,
            target_lit,
        } = *self;
        let iou = |inter: u64, size: u64| Iou::new(inter, target + size - inter);
        // base ∧ lit
        let and = iou(target_base_lit, base_lit);
        // base ∨ lit
        let or = iou(
            target_base + target_lit - target_base_lit,
            base + lit - base_lit,
        );
        // base ∧ ¬lit
        let and_not = iou(target_base - target_base_lit, base - base_lit);
        // base ∨ ¬lit
        let or_not = iou(
            target - target_lit + target_base_lit,
            units - lit + base_lit,
        );
        [and, or, and_not, or_not]
    }
}

mod kernel {
    #[inline(always)]
    fn fused_generic(target: &[u64], base: &[u64], lit: &[u64]) -> (u64, u64) {
        let mut bl = 0u64;
        let mut tbl = 0u64;
        for ((&t, &b), &l) in target.iter().zip(base).zip(lit) {
            let x = b & l;
            bl += u64::from(x.count_ones());
            tbl += u64::from((x & t).count_ones());
        }
        (bl, tbl)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "popcnt")]
    unsafe fn fused_popcnt(target: &[u64], base: &[u64], lit: &[u64]) -> (u64, u64) {
        fused_generic(target, base, lit)
    }

    pub(super) fn fused_counts(target: &[u64], base: &[u64], lit: &[u64]) -> (u64, u64) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("popcnt") {
                // SAFETY: the CPU supports popcnt, checked above.
                return unsafe { fused_popcnt(target, base, lit) };
            }
        }
        fused_generic(target, base, lit)
    }
}
