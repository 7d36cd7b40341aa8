//! Generators: i.i.d. and periodic baselines, the uncombinable pair built
//! from an index set of oscillating density, and the oscillating-velocity
//! models whose energy observable nevertheless stabilizes.
//!
//! All generators are pure functions of the element index.

use std::f64::consts::{FRAC_PI_2, LN_2};

use serde::{Deserialize, Serialize};

use crate::collective::{Label, LabelSource, LabelVec};
use crate::combining::{pair, PairedSequence};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Emits label 1 with probability `p`, else 0.
#[derive(Debug, Clone, Copy)]
pub struct Bernoulli {
    p: f64,
    stream: Stream,
}

impl Bernoulli {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        Self::with_stream(p, Stream::new(seed))
    }

    pub fn with_stream(p: f64, stream: Stream) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "p = {p} is not a probability"
            )));
        }
        Ok(Bernoulli { p, stream })
    }
}

impl LabelSource for Bernoulli {
    fn alphabet_size(&self) -> usize {
        2
    }
    fn label_at(&self, index: u64) -> Label {
        Label(self.stream.bernoulli_at(index, self.p) as u32)
    }
}

/// i.i.d. draws from a finite distribution given by nonnegative weights.
#[derive(Debug, Clone)]
pub struct Categorical {
    cumulative: Vec<f64>,
    stream: Stream,
}

impl Categorical {
    pub fn new(weights: &[f64], seed: u64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "weights must be a nonempty list of finite nonnegative numbers".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Categorical {
            cumulative,
            stream: Stream::new(seed),
        })
    }
}

impl LabelSource for Categorical {
    fn alphabet_size(&self) -> usize {
        self.cumulative.len()
    }
    fn label_at(&self, index: u64) -> Label {
        let u = self.stream.f64_at(index);
        let k = self.cumulative.partition_point(|&c| c <= u);
        Label(k.min(self.cumulative.len() - 1) as u32)
    }
}

/// Label `v` with probability `probs[x]` given a driving sequence `x`, else 0.
/// Produces a binary sequence dependent on `x` by construction.
#[derive(Debug, Clone)]
pub struct ConditionalBernoulli<S> {
    driver: S,
    probs: Vec<f64>,
    stream: Stream,
}

impl<S: LabelSource> ConditionalBernoulli<S> {
    pub fn new(driver: S, probs: Vec<f64>, seed: u64) -> Result<Self> {
        if probs.len() != driver.alphabet_size() {
            return Err(Error::InvalidArgument(format!(
                "{} conditional probabilities for a driver with {} labels",
                probs.len(),
                driver.alphabet_size()
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "conditional probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(ConditionalBernoulli {
            driver,
            probs,
            stream: Stream::new(seed),
        })
    }
}

impl<S: LabelSource> LabelSource for ConditionalBernoulli<S> {
    fn alphabet_size(&self) -> usize {
        2
    }
    fn label_at(&self, index: u64) -> Label {
        let p = self.probs[self.driver.label_at(index).index()];
        Label(self.stream.bernoulli_at(index, p) as u32)
    }
    fn len(&self) -> Option<u64> {
        self.driver.len()
    }
}

/// Repeats a fixed pattern forever.
#[derive(Debug, Clone)]
pub struct Periodic {
    pattern: Vec<Label>,
    alphabet: usize,
}

impl Periodic {
    pub fn new(alphabet: usize, pattern: Vec<Label>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::InvalidArgument("periodic pattern is empty".into()));
        }
        LabelVec::new(alphabet, pattern.clone())?;
        Ok(Periodic { pattern, alphabet })
    }

    pub fn constant(alphabet: usize, label: Label) -> Result<Self> {
        Self::new(alphabet, vec![label])
    }
}

impl LabelSource for Periodic {
    fn alphabet_size(&self) -> usize {
        self.alphabet
    }
    fn label_at(&self, index: u64) -> Label {
        self.pattern[(index % self.pattern.len() as u64) as usize]
    }
}

/// Dyadic block of a 0-based index: block 0 is `[0, 2)`, block `k >= 1` is
/// `[2^k, 2^(k+1))`. A prefix of length `2^m` is exactly blocks `0..m`.
/// Returns `(k, start, len)`.
#[inline]
pub fn dyadic_block(index: u64) -> (u32, u64, u64) {
    if index < 2 {
        (0, 0, 2)
    } else {
        let k = 63 - index.leading_zeros();
        (k, 1 << k, 1 << k)
    }
}

/// Constant label within each dyadic block, cycling through `pattern` by block number.
#[derive(Debug, Clone)]
pub struct DyadicBlocks {
    pattern: Vec<Label>,
    alphabet: usize,
}

impl DyadicBlocks {
    pub fn new(alphabet: usize, pattern: Vec<Label>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::InvalidArgument("block pattern is empty".into()));
        }
        LabelVec::new(alphabet, pattern.clone())?;
        Ok(DyadicBlocks { pattern, alphabet })
    }
}

impl LabelSource for DyadicBlocks {
    fn alphabet_size(&self) -> usize {
        self.alphabet
    }
    fn label_at(&self, index: u64) -> Label {
        let (k, _, _) = dyadic_block(index);
        self.pattern[k as usize % self.pattern.len()]
    }
}

/// A subset `C` of the even positive integers with oscillating density.
///
/// An even `j` belongs to `C` iff `pattern[floor(log2 j) mod len]` is set.
/// The default pattern `[true, false]` includes the even numbers of the
/// blocks `[2^(2k), 2^(2k+1))` and excludes those of `[2^(2k+1), 2^(2k+2))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    pub pattern: Vec<bool>,
}

impl Default for IndexSet {
    fn default() -> Self {
        IndexSet {
            pattern: vec![true, false],
        }
    }
}

impl IndexSet {
    pub fn new(pattern: Vec<bool>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::InvalidArgument("index-set pattern is empty".into()));
        }
        Ok(IndexSet { pattern })
    }

    fn block_included(&self, exponent: u32) -> bool {
        self.pattern[exponent as usize % self.pattern.len()]
    }

    /// Membership of the 1-based position `j`.
    pub fn contains(&self, j: u64) -> bool {
        j >= 2 && j.is_multiple_of(2) && self.block_included(63 - j.leading_zeros())
    }

    /// `|C ∩ {1, .., n}|` in `O(log n)`.
    pub fn count_up_to(&self, n: u64) -> u64 {
        if n < 2 {
            return 0;
        }
        let top = 63 - n.leading_zeros();
        // Block e >= 1 holds 2^(e-1) even numbers; block 0 = {1} holds none.
        let full: u64 = (1..top)
            .filter(|&e| self.block_included(e))
            .map(|e| 1u64 << (e - 1))
            .sum();
        let partial = if self.block_included(top) {
            n / 2 - (1u64 << (top - 1)) + 1
        } else {
            0
        };
        full + partial
    }
}

/// Indicator of `D`, the even numbers: label 1 at even 1-based positions.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvenPositions;

impl LabelSource for EvenPositions {
    fn alphabet_size(&self) -> usize {
        2
    }
    fn label_at(&self, index: u64) -> Label {
        Label((index + 1).is_multiple_of(2) as u32)
    }
}

/// Indicator of `M = C ∪ {2n - 1 : 2n ∉ C}`. `M` holds exactly one element
/// of every pair `{2n - 1, 2n}`.
#[derive(Debug, Clone, Default)]
pub struct CompanionSet {
    set: IndexSet,
}

impl CompanionSet {
    pub fn new(set: IndexSet) -> Self {
        CompanionSet { set }
    }

    pub fn contains(&self, j: u64) -> bool {
        if j.is_multiple_of(2) {
            self.set.contains(j)
        } else {
            !self.set.contains(j + 1)
        }
    }
}

impl LabelSource for CompanionSet {
    fn alphabet_size(&self) -> usize {
        2
    }
    fn label_at(&self, index: u64) -> Label {
        Label(self.contains(index + 1) as u32)
    }
}

/// The uncombinable pair: `x` marks `(omega_a = s, lambda = k)` on the even
/// trials, `y` marks `(omega_b = q, lambda = k)` on `M`. Both marginals have
/// frequency 1/2, while the joint frequency is the density of `C`, which
/// oscillates.
///
/// Label 1 means "marked state present", 0 "absent".
pub fn example31_pair(set: IndexSet) -> PairedSequence<EvenPositions, CompanionSet> {
    pair(EvenPositions, CompanionSet::new(set))
}

/// Phase sequence driving the oscillating-velocity models. Phases are
/// constant within each dyadic block (see [`dyadic_block`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PhaseSchedule {
    /// `phi = 0` on even blocks and `pi/2` on odd blocks.
    DyadicAlternating,
    /// `phi_N = omega * ln N`, evaluated at the block scale `N = 2^k`.
    Log { omega: f64 },
    /// Fixed phase; no oscillation.
    Constant { phi: f64 },
}

impl PhaseSchedule {
    pub fn phase(&self, block: u32) -> f64 {
        match *self {
            PhaseSchedule::DyadicAlternating => {
                if block.is_multiple_of(2) {
                    0.0
                } else {
                    FRAC_PI_2
                }
            }
            PhaseSchedule::Log { omega } => omega * block as f64 * LN_2,
            PhaseSchedule::Constant { phi } => phi,
        }
    }

    /// `sin^2(phi)` for the block; exactly 0 or 1 for the alternating schedule.
    pub fn sin_sq(&self, block: u32) -> f64 {
        match self {
            PhaseSchedule::DyadicAlternating => (block % 2) as f64,
            _ => self.phase(block).sin().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VelocityKind {
    /// `v ∈ {+1, -1}`.
    TwoValue,
    /// `v ∈ {+1, -1, +1/2, -1/2}`.
    FourValue,
}

const TWO_VALUE_VELOCITIES: [f64; 2] = [1.0, -1.0];
const FOUR_VALUE_VELOCITIES: [f64; 4] = [1.0, -1.0, 0.5, -0.5];

/// Low-discrepancy selection: among positions `0, 1, ..` the `q`-th is a hit
/// iff `floor((q+1) s) > floor(q s)`, so the first `r` positions hold
/// exactly `floor(r s)` hits.
#[inline]
fn spread_hit(q: u64, s: f64) -> bool {
    ((q + 1) as f64 * s).floor() > (q as f64 * s).floor()
}

/// Particle velocities whose relative frequencies follow `sin^2(phi_N)`.
///
/// The arrangement is deterministic. In block `k` with `s = sin^2(phi_k)`:
///
/// * TWO_VALUE: `+1` at the low-discrepancy hits of density `s`, else `-1`.
/// * FOUR_VALUE: even positions carry the `E = 1/2` pair `{+1, -1}` and odd
///   positions the `E = 1/8` pair `{+1/2, -1/2}`. Within the even positions
///   `+1` takes the hits of density `s`; within the odd positions `-1/2`
///   does. Hence `nu(+1) ≈ nu(-1/2) ≈ s/2`, `nu(-1) ≈ nu(+1/2) ≈ (1-s)/2`,
///   and the first `N` elements contain exactly `ceil(N/2)` energy-1/2 states.
///
/// Labels index [`Appendix1Velocity::velocities`]: `+1, -1` then `+1/2, -1/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appendix1Velocity {
    pub kind: VelocityKind,
    pub schedule: PhaseSchedule,
}

pub fn appendix1_velocity(kind: VelocityKind, schedule: PhaseSchedule) -> Appendix1Velocity {
    Appendix1Velocity { kind, schedule }
}

impl Appendix1Velocity {
    pub fn velocities(&self) -> &'static [f64] {
        match self.kind {
            VelocityKind::TwoValue => &TWO_VALUE_VELOCITIES,
            VelocityKind::FourValue => &FOUR_VALUE_VELOCITIES,
        }
    }

    pub fn velocity_at(&self, index: u64) -> f64 {
        self.velocities()[self.label_at(index).index()]
    }
}

impl LabelSource for Appendix1Velocity {
    fn alphabet_size(&self) -> usize {
        self.velocities().len()
    }

    fn label_at(&self, index: u64) -> Label {
        let (k, start, _) = dyadic_block(index);
        let s = self.schedule.sin_sq(k);
        let r = index - start;
        match self.kind {
            VelocityKind::TwoValue => Label(if spread_hit(r, s) { 0 } else { 1 }),
            VelocityKind::FourValue => {
                let q = r / 2;
                let hit = spread_hit(q, s);
                Label(match (r.is_multiple_of(2), hit) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 3,
                    (false, false) => 2,
                })
            }
        }
    }
}

/// Energy label for `E = v^2/2 = 1/2`.
pub const ENERGY_HALF: Label = Label(0);
/// Energy label for `E = v^2/2 = 1/8`.
pub const ENERGY_EIGHTH: Label = Label(1);

/// The energy values indexed by energy label.
pub const ENERGY_VALUES: [f64; 2] = [0.5, 0.125];

/// Energy label of a velocity in `{±1, ±1/2}`.
pub fn energy_of(v: f64) -> Result<Label> {
    if v == 1.0 || v == -1.0 {
        Ok(ENERGY_HALF)
    } else if v == 0.5 || v == -0.5 {
        Ok(ENERGY_EIGHTH)
    } else {
        Err(Error::InvalidLabel(format!(
            "velocity {v} is not one of ±1, ±1/2"
        )))
    }
}

/// Pointwise relabelling of a velocity list by energy.
pub fn energy_map_values(velocities: &[f64]) -> Result<LabelVec> {
    let labels = velocities
        .iter()
        .map(|&v| energy_of(v))
        .collect::<Result<Vec<_>>>()?;
    LabelVec::new(2, labels)
}

/// Lazy energy relabelling of a velocity-labelled source.
#[derive(Debug, Clone)]
pub struct EnergyMap<S> {
    source: S,
    table: Vec<Label>,
}

/// `velocities[label]` is the velocity that `label` stands for in `source`.
pub fn energy_map<S: LabelSource>(source: S, velocities: &[f64]) -> Result<EnergyMap<S>> {
    if velocities.len() != source.alphabet_size() {
        return Err(Error::InvalidArgument(format!(
            "{} velocities for a source with {} labels",
            velocities.len(),
            source.alphabet_size()
        )));
    }
    let table = velocities
        .iter()
        .map(|&v| energy_of(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnergyMap { source, table })
}

impl<S: LabelSource> LabelSource for EnergyMap<S> {
    fn alphabet_size(&self) -> usize {
        2
    }
    fn label_at(&self, index: u64) -> Label {
        self.table[self.source.label_at(index).index()]
    }
    fn len(&self) -> Option<u64> {
        self.source.len()
    }
}
