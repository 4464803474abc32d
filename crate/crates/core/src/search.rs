//! Beam search for the logical form that best matches a neuron mask.
//!
//! The beam starts from every literal (each primitive, plus `NEIGHBORS(p)`
//! where a neighborhood exists). Each step composes every beam formula `F`
//! with every literal `P` as `F AND P`, `F OR P`, `F AND NOT P` and
//! `F OR NOT P`, deduplicates by canonical key and keeps the top `B`.
//! Candidates are ranked by IoU (descending), then length (ascending), then
//! canonical key. The answer is the best candidate seen at any length.
//!
//! Scoring never materializes a candidate: [`fused_counts`] yields two
//! popcounts per (formula, literal) pair, from which all four compositions
//! are scored exactly. Only the `B` survivors of a step are materialized, each
//! with a single bitwise pass over its parent and literal masks.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitmask::{fused_counts, Bitmask, CompositionCounts, Iou};
use crate::concepts::{ConceptStore, TaskKind};
use crate::error::{Error, Result};
use crate::formula::{CanonicalKey, Connective, EvalCache, Formula};
use crate::par;
use crate::thresholding::{NeuronId, NeuronMask, ThresholdMode};

pub const DEFAULT_BEAM_SIZE: usize = 10;
pub const DEFAULT_MAX_LENGTH: usize = 10;
/// Default candidate budget for [`exhaustive_explain`].
pub const DEFAULT_EXHAUSTIVE_BUDGET: u128 = 5_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSet {
    pub and: bool,
    pub or: bool,
    pub not: bool,
    pub neighbors: bool,
}

impl OperatorSet {
    pub const VISION: OperatorSet = OperatorSet {
        and: true,
        or: true,
        not: true,
        neighbors: false,
    };
    pub const NLI: OperatorSet = OperatorSet {
        and: true,
        or: true,
        not: true,
        neighbors: true,
    };

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Vision => Self::VISION,
            TaskKind::Nli => Self::NLI,
        }
    }

    /// Compositions allowed under this set, in scoring order.
    fn moves(&self) -> Vec<Move> {
        Move::ALL
            .into_iter()
            .filter(|m| {
                let base = match m.op {
                    Connective::And => self.and,
                    Connective::Or => self.or,
                };
                base && (!m.negated || self.not)
            })
            .collect()
    }
}

impl fmt::Display for OperatorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.and, "and"),
            (self.or, "or"),
            (self.not, "not"),
            (self.neighbors, "neighbors"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for OperatorSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = OperatorSet {
            and: false,
            or: false,
            not: false,
            neighbors: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "and" => set.and = true,
                "or" => set.or = true,
                "not" => set.not = true,
                "neighbors" => set.neighbors = true,
                other => return Err(Error::Config(format!("unknown operator {other:?}"))),
            }
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Move {
    op: Connective,
    negated: bool,
}

impl Move {
    /// Same order as [`CompositionCounts::scores`].
    const ALL: [Move; 4] = [
        Move { op: Connective::And, negated: false },
        Move { op: Connective::Or, negated: false },
        Move { op: Connective::And, negated: true },
        Move { op: Connective::Or, negated: true },
    ];

    fn index(self) -> usize {
        match (self.op, self.negated) {
            (Connective::And, false) => 0,
            (Connective::Or, false) => 1,
            (Connective::And, true) => 2,
            (Connective::Or, true) => 3,
        }
    }

    fn apply(self, base: &Formula, lit: &Formula) -> Formula {
        let rhs = if self.negated {
            Formula::not(lit.clone())
        } else {
            lit.clone()
        };
        base.clone().compose(self.op, rhs)
    }

    fn apply_mask(self, base: &Bitmask, lit: &Bitmask) -> Result<Bitmask> {
        match (self.op, self.negated) {
            (Connective::And, false) => base.and(lit),
            (Connective::Or, false) => base.or(lit),
            (Connective::And, true) => base.and_not(lit),
            (Connective::Or, true) => base.or_not(lit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub max_length: usize,
    pub beam_size: usize,
    pub operators: OperatorSet,
    pub results_per_neuron: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_length: DEFAULT_MAX_LENGTH,
            beam_size: DEFAULT_BEAM_SIZE,
            operators: OperatorSet::VISION,
            results_per_neuron: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, store: &ConceptStore) -> Result<()> {
        if self.max_length == 0 || self.beam_size == 0 || self.results_per_neuron == 0 {
            return Err(Error::Config(
                "max length, beam size and results per neuron must be at least 1".into(),
            ));
        }
        if self.operators.neighbors && store.task() != TaskKind::Nli {
            return Err(Error::Config(
                "NEIGHBORS is only available for NLI concept stores".into(),
            ));
        }
        if store.is_empty() {
            return Err(Error::Config("concept store is empty".into()));
        }
        Ok(())
    }
}

/// A formula with its exact score against one neuron.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Explanation {
    pub formula: Formula,
    pub key: CanonicalKey,
    pub iou: Iou,
}

impl Explanation {
    fn new(formula: Formula, iou: Iou) -> Self {
        let key = formula.canonical_key();
        Self { formula, key, iou }
    }

    pub fn length(&self) -> usize {
        self.formula.length()
    }

    /// Ranking order: higher IoU, then shorter, then smaller key.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .iou
            .cmp(&self.iou)
            .then_with(|| self.length().cmp(&other.length()))
            .then_with(|| self.key.cmp(&other.key))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInfo {
    #[serde(flatten)]
    pub mode: ThresholdMode,
    pub value: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationResult {
    pub neuron: NeuronId,
    /// Best formula of any length up to the configured maximum.
    pub best: Explanation,
    /// Entry `l - 1` is the best formula of length at most `l`.
    pub per_length: Vec<Explanation>,
    /// Top entries of the final beam, `results_per_neuron` of them at most.
    pub alternatives: Vec<Explanation>,
    pub config: SearchConfig,
    pub threshold: ThresholdInfo,
    pub active_count: u64,
}

impl ExplanationResult {
    /// Best-so-far IoU for lengths `1..=max_length`.
    pub fn iou_curve(&self) -> Vec<f64> {
        self.per_length.iter().map(|e| e.iou.value()).collect()
    }
}

struct Literal<'a> {
    formula: Formula,
    mask: &'a Bitmask,
    size: u64,
    with_target: u64,
}

fn literals<'a>(store: &'a ConceptStore, ops: &OperatorSet, target: &Bitmask) -> Result<Vec<Literal<'a>>> {
    let mut out: Vec<(Formula, &Bitmask)> = store
        .concepts()
        .iter()
        .map(|c| (Formula::Primitive(c.id), &c.mask))
        .collect();
    if ops.neighbors {
        out.extend(
            store
                .neighborhoods()
                .map(|(id, n)| (Formula::Neighbors(id), &n.mask)),
        );
    }
    let counted = par::map(&out, |(_, m)| -> Result<(u64, u64)> {
        Ok((m.popcount(), target.intersection_count(m)?))
    });
    out.into_iter()
        .zip(counted)
        .map(|((formula, mask), c)| {
            let (size, with_target) = c?;
            Ok(Literal {
                formula,
                mask,
                size,
                with_target,
            })
        })
        .collect()
}

struct BeamEntry {
    exp: Explanation,
    mask: Bitmask,
    size: u64,
    with_target: u64,
}

impl BeamEntry {
    fn new(exp: Explanation, mask: Bitmask, target: &Bitmask) -> Result<Self> {
        let size = mask.popcount();
        let with_target = target.intersection_count(&mask)?;
        Ok(Self {
            exp,
            mask,
            size,
            with_target,
        })
    }
}

/// A scored but not yet materialized candidate.
#[derive(Clone, Copy, Debug)]
struct Pending {
    parent: usize,
    literal: usize,
    mv: Move,
    iou: Iou,
}

fn check_inputs(neuron: &NeuronMask, store: &ConceptStore) -> Result<()> {
    if neuron.mask.len() != store.units() {
        return Err(Error::LengthMismatch {
            left: neuron.mask.len(),
            right: store.units(),
        });
    }
    if !neuron.mask.any() {
        return Err(Error::Degenerate(format!(
            "neuron {} is never active",
            neuron.neuron.0
        )));
    }
    Ok(())
}

/// Picks up to `limit` candidates with distinct keys in ranking order.
/// Keys are only built for IoU tiers that can reach the cut.
fn select_top(
    mut pending: Vec<Pending>,
    limit: usize,
    beam: &[BeamEntry],
    lits: &[Literal<'_>],
) -> Vec<(Pending, Explanation)> {
    pending.sort_by_key(|c| std::cmp::Reverse(c.iou));
    let mut chosen = Vec::with_capacity(limit.min(pending.len()));
    let mut start = 0;
    while start < pending.len() && chosen.len() < limit {
        let tier_iou = pending[start].iou;
        let end = start
            + pending[start..]
                .iter()
                .take_while(|p| p.iou == tier_iou)
                .count();
        let mut tier: Vec<(Pending, Explanation)> = pending[start..end]
            .iter()
            .map(|p| {
                let f = p.mv.apply(&beam[p.parent].exp.formula, &lits[p.literal].formula);
                (*p, Explanation::new(f, p.iou))
            })
            .collect();
        // stable: among equal keys the first generated wins
        tier.sort_by(|a, b| a.1.key.cmp(&b.1.key));
        tier.dedup_by(|b, a| a.1.key == b.1.key);
        chosen.extend(tier.into_iter().take(limit - chosen.len()));
        start = end;
    }
    chosen
}

/// Explains one neuron by beam search over logical forms.
pub fn explain_neuron(
    neuron: &NeuronMask,
    store: &ConceptStore,
    cfg: &SearchConfig,
) -> Result<ExplanationResult> {
    cfg.validate(store)?;
    check_inputs(neuron, store)?;
    let target = &neuron.mask;
    let target_count = target.popcount();
    let units = target.len() as u64;
    let lits = literals(store, &cfg.operators, target)?;
    let moves = cfg.operators.moves();

    // length 1: score every literal, keep the top B
    let initial: Vec<Explanation> = lits
        .iter()
        .map(|l| {
            let iou = Iou::new(l.with_target, target_count + l.size - l.with_target);
            Explanation::new(l.formula.clone(), iou)
        })
        .collect();
    let mut order: Vec<usize> = (0..initial.len()).collect();
    order.sort_by(|&a, &b| initial[a].rank_cmp(&initial[b]).then(a.cmp(&b)));
    order.dedup_by(|b, a| initial[*a].key == initial[*b].key);
    order.truncate(cfg.beam_size);
    let mut beam = Vec::with_capacity(order.len());
    for &i in &order {
        beam.push(BeamEntry::new(initial[i].clone(), lits[i].mask.clone(), target)?);
    }

    let mut best = beam[0].exp.clone();
    let mut per_length = vec![best.clone()];

    for _length in 2..=cfg.max_length {
        if moves.is_empty() {
            per_length.push(best.clone());
            continue;
        }
        let pairs = beam.len() * lits.len();
        let scored = par::map_range(pairs, |idx| -> Result<[Iou; 4]> {
            let (bi, li) = (idx / lits.len(), idx % lits.len());
            let (b, l) = (&beam[bi], &lits[li]);
            let (base_lit, target_base_lit) = fused_counts(target, &b.mask, l.mask)?;
            let counts = CompositionCounts {
                units,
                target: target_count,
                base: b.size,
                target_base: b.with_target,
                lit: l.size,
                target_lit: l.with_target,
            };
            Ok(counts.scores(base_lit, target_base_lit))
        });
        let mut pending = Vec::with_capacity(pairs * moves.len());
        for (idx, s) in scored.into_iter().enumerate() {
            let s = s?;
            let (parent, literal) = (idx / lits.len(), idx % lits.len());
            for &mv in &moves {
                pending.push(Pending {
                    parent,
                    literal,
                    mv,
                    iou: s[mv.index()],
                });
            }
        }
        let chosen = select_top(pending, cfg.beam_size, &beam, &lits);
        let next = par::map(&chosen, |(p, exp)| -> Result<BeamEntry> {
            let mask = p.mv.apply_mask(&beam[p.parent].mask, lits[p.literal].mask)?;
            debug_assert_eq!(target.iou_score(&mask)?, p.iou);
            BeamEntry::new(exp.clone(), mask, target)
        });
        beam = next.into_iter().collect::<Result<Vec<_>>>()?;
        if beam[0].exp.rank_cmp(&best) == Ordering::Less {
            best = beam[0].exp.clone();
        }
        per_length.push(best.clone());
    }

    let alternatives = beam
        .iter()
        .take(cfg.results_per_neuron)
        .map(|e| e.exp.clone())
        .collect();
    Ok(ExplanationResult {
        neuron: neuron.neuron,
        best,
        per_length,
        alternatives,
        config: cfg.clone(),
        threshold: ThresholdInfo {
            mode: neuron.mode,
            value: neuron.threshold,
        },
        active_count: target_count,
    })
}

/// Single best primitive (or neighborhood) by IoU.
pub fn explain_netdissect(
    neuron: &NeuronMask,
    store: &ConceptStore,
    cfg: &SearchConfig,
) -> Result<ExplanationResult> {
    let cfg = SearchConfig {
        max_length: 1,
        ..cfg.clone()
    };
    explain_neuron(neuron, store, &cfg)
}

/// Number of formulas of length `1..=max_length` in the search grammar.
pub fn grammar_size(literals: usize, moves: usize, max_length: usize) -> u128 {
    let (l, m) = (literals as u128, moves as u128);
    let mut total = 0u128;
    let mut at_length = l;
    for len in 1..=max_length {
        if len > 1 {
            at_length = at_length.saturating_mul(m.saturating_mul(l));
        }
        total = total.saturating_add(at_length);
    }
    total
}

/// True argmax over every grammar formula up to `max_length <= 3`, scored by
/// direct tree evaluation. Used to verify the beam.
pub fn exhaustive_explain(
    neuron: &NeuronMask,
    store: &ConceptStore,
    max_length: usize,
    operators: OperatorSet,
    budget: u128,
) -> Result<ExplanationResult> {
    if !(1..=3).contains(&max_length) {
        return Err(Error::Config(format!(
            "exhaustive search supports max length 1..=3, got {max_length}"
        )));
    }
    let cfg = SearchConfig {
        max_length,
        beam_size: usize::MAX,
        operators,
        results_per_neuron: 1,
    };
    cfg.validate(store)?;
    check_inputs(neuron, store)?;
    let target = &neuron.mask;

    let mut lits: Vec<Formula> = store.concepts().iter().map(|c| Formula::Primitive(c.id)).collect();
    if operators.neighbors {
        lits.extend(store.neighborhoods().map(|(id, _)| Formula::Neighbors(id)));
    }
    let moves = operators.moves();
    let needed = grammar_size(lits.len(), moves.len(), max_length);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }

    let score = |f: &Formula| -> Result<Explanation> {
        let mask = f.evaluate(store, &mut EvalCache::new())?;
        Ok(Explanation::new(f.clone(), target.iou_score(&mask)?))
    };
    let mut level: Vec<Formula> = lits.clone();
    let mut per_length: Vec<Explanation> = Vec::with_capacity(max_length);
    let mut best: Option<Explanation> = None;
    for length in 1..=max_length {
        if length > 1 {
            level = level
                .iter()
                .flat_map(|f| {
                    let moves = &moves;
                    lits.iter()
                        .flat_map(move |l| moves.iter().map(move |mv| mv.apply(f, l)))
                })
                .collect();
        }
        let scored: Vec<Result<Explanation>> = par::map(&level, score);
        for e in scored {
            let e = e?;
            if best.as_ref().is_none_or(|b| e.rank_cmp(b) == Ordering::Less) {
                best = Some(e);
            }
        }
        per_length.push(best.clone().expect("at least one literal"));
    }
    let best = best.expect("at least one literal");
    Ok(ExplanationResult {
        neuron: neuron.neuron,
        alternatives: vec![best.clone()],
        best,
        per_length,
        config: cfg,
        threshold: ThresholdInfo {
            mode: neuron.mode,
            value: neuron.threshold,
        },
        active_count: target.popcount(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronFailure {
    pub neuron: NeuronId,
    pub reason: String,
}

pub type NeuronOutcome = std::result::Result<ExplanationResult, NeuronFailure>;

/// Explains every neuron, ordered by neuron id. A failing neuron yields a
/// failure record instead of aborting the sweep.
pub fn explain_all(
    neurons: &[NeuronMask],
    store: &ConceptStore,
    cfg: &SearchConfig,
) -> Result<Vec<NeuronOutcome>> {
    cfg.validate(store)?;
    let mut order: Vec<&NeuronMask> = neurons.iter().collect();
    order.sort_by_key(|n| n.neuron);
    Ok(par::map(&order, |n| {
        explain_neuron(n, store, cfg).map_err(|e| NeuronFailure {
            neuron: n.neuron,
            reason: e.to_string(),
        })
    }))
}
