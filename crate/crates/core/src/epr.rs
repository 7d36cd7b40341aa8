//! Contextual hidden-variable testbed for the EPR-Bohm experiment.
//!
//! Each trial `j` draws a particle hidden value `lambda_j ∈ {0..M}` and
//! apparatus microstates `omega_a, omega_b ∈ {0..T}`; deterministic models
//! then evaluate `A = A(omega_a, lambda)` and `B = B(omega_b, lambda)`.
//! The singlet reference model samples outcome pairs straight from
//! `p(e1, e2 | a, b) = (1 - e1 e2 cos(a - b)) / 4` with a dummy `lambda`.
//!
//! Sign convention: `sign(0) = +1`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collective::{validate_checkpoints, FrequencyTrace, Label, LabelVec};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "+1")]
    Plus,
    #[serde(rename = "-1")]
    Minus,
}

impl Outcome {
    pub const BOTH: [Outcome; 2] = [Outcome::Plus, Outcome::Minus];

    /// `sign(x)` with `sign(0) = +1`.
    #[inline]
    pub fn from_sign(x: f64) -> Self {
        if x >= 0.0 {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }

    pub fn from_value(v: i32) -> Option<Self> {
        match v {
            1 => Some(Outcome::Plus),
            -1 => Some(Outcome::Minus),
            _ => None,
        }
    }

    #[inline]
    pub fn value(self) -> i32 {
        match self {
            Outcome::Plus => 1,
            Outcome::Minus => -1,
        }
    }

    /// 0 for `+1`, 1 for `-1`.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }

    #[inline]
    pub fn flip(self) -> Self {
        match self {
            Outcome::Plus => Outcome::Minus,
            Outcome::Minus => Outcome::Plus,
        }
    }
}

/// Measurement angles in radians: `a, a'` for the first wing, `b, b'` for the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angles {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl Angles {
    pub fn new(a: f64, a_prime: f64, b: f64, b_prime: f64) -> Self {
        Angles {
            a,
            a_prime,
            b,
            b_prime,
        }
    }

    /// `(0, pi/2, pi/4, 3pi/4)`: maximal singlet violation, and `|S| = 2`
    /// for the sign model.
    pub fn chsh_optimal() -> Self {
        Angles::new(0.0, FRAC_PI_2, FRAC_PI_4, 3.0 * FRAC_PI_4)
    }

    pub fn setting(&self, wing: Wing, index: usize) -> f64 {
        match (wing, index) {
            (Wing::First, 0) => self.a,
            (Wing::First, _) => self.a_prime,
            (Wing::Second, 0) => self.b,
            (Wing::Second, _) => self.b_prime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wing {
    First,
    Second,
}

/// Setting indices: 0 selects the unprimed setting, 1 the primed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SettingPair {
    pub first: usize,
    pub second: usize,
}

impl SettingPair {
    pub const fn new(first: usize, second: usize) -> Self {
        SettingPair { first, second }
    }

    fn validate(self) -> Result<Self> {
        if self.first > 1 || self.second > 1 {
            return Err(Error::InvalidArgument(format!(
                "setting indices must be 0 or 1, got ({}, {})",
                self.first, self.second
            )));
        }
        Ok(self)
    }
}

/// `(a,b), (a,b'), (a',b), (a',b')` and their signs in `S`.
pub const CHSH_TERMS: [(SettingPair, i32); 4] = [
    (SettingPair::new(0, 0), 1),
    (SettingPair::new(0, 1), -1),
    (SettingPair::new(1, 0), 1),
    (SettingPair::new(1, 1), 1),
];

/// `S` for a fixed assignment of ±1 values to `A, A', B, B'`.
pub fn deterministic_chsh(a: i32, a_prime: i32, b: i32, b_prime: i32) -> i32 {
    a * b - a * b_prime + a_prime * b + a_prime * b_prime
}

/// Sizes of the particle hidden-value set `Λ` and the apparatus microstate set `Ω`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub hidden: usize,
    pub apparatus: usize,
}

/// The sign model: `lambda` uniform on a midpoint angle grid,
/// `A = sign(cos(lambda - a))`, `B = -sign(cos(lambda - b))`.
///
/// With `apparatus_states = T > 1`, microstate `s` shifts the local
/// measurement angle by `jitter * (2s/(T-1) - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignModel {
    #[serde(default = "SignModel::default_grid")]
    pub grid: usize,
    #[serde(default = "SignModel::default_apparatus")]
    pub apparatus_states: usize,
    #[serde(default)]
    pub jitter: f64,
}

impl Default for SignModel {
    fn default() -> Self {
        SignModel {
            grid: Self::default_grid(),
            apparatus_states: 1,
            jitter: 0.0,
        }
    }
}

impl SignModel {
    fn default_grid() -> usize {
        720
    }

    fn default_apparatus() -> usize {
        1
    }

    /// Grid point `k`: `2 pi (k + 1/2) / grid`. Midpoints avoid landing
    /// exactly on the sign boundaries of the usual rational-multiple-of-pi
    /// settings.
    pub fn lambda(&self, k: usize) -> f64 {
        TAU * (k as f64 + 0.5) / self.grid as f64
    }

    fn angle_offset(&self, s: usize) -> f64 {
        if self.apparatus_states <= 1 {
            0.0
        } else {
            self.jitter * (2.0 * s as f64 / (self.apparatus_states - 1) as f64 - 1.0)
        }
    }
}

/// `outcome[s][k]` for one setting of one wing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable(pub Vec<Vec<Outcome>>);

/// Arbitrary finite outcome tables `A(omega, lambda)` per setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomTable {
    /// Relative weights of the hidden values `lambda = 0..M`.
    pub hidden_weights: Vec<f64>,
    pub apparatus_states: usize,
    /// Tables for settings `a`, `a'`.
    pub first: [OutcomeTable; 2],
    /// Tables for settings `b`, `b'`.
    pub second: [OutcomeTable; 2],
}

impl CustomTable {
    pub fn validate(&self) -> Result<()> {
        let m = self.hidden_weights.len();
        if m == 0 || self.apparatus_states == 0 {
            return Err(Error::InvalidModel("state spaces must be nonempty".into()));
        }
        if self
            .hidden_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
            || self.hidden_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidModel(
                "hidden weights must be nonnegative with positive sum".into(),
            ));
        }
        for table in self.first.iter().chain(&self.second) {
            if table.0.len() != self.apparatus_states || table.0.iter().any(|row| row.len() != m) {
                return Err(Error::InvalidModel(format!(
                    "outcome tables must be {} x {} (apparatus x hidden)",
                    self.apparatus_states, m
                )));
            }
        }
        Ok(())
    }

    fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.hidden_weights.iter().sum();
        self.hidden_weights.iter().map(|w| w / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    LocalDeterministic(SignModel),
    QmSinglet,
    CustomTable(CustomTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EprModel {
    pub kind: ModelKind,
    pub angles: Angles,
}

/// One trial: hidden value, both microstates and both outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub lambda: u32,
    pub omega_a: u32,
    pub omega_b: u32,
    pub a: Outcome,
    pub b: Outcome,
}

const TAG_LAMBDA: u64 = 1;
const TAG_OMEGA_FIRST: u64 = 2;
const TAG_OMEGA_SECOND: u64 = 3;
const TAG_QM_FIRST: u64 = 4;
const TAG_QM_RELATION: u64 = 5;
const TAG_CHSH_PAIR: u64 = 100;

struct TrialStreams {
    lambda: Stream,
    omega_first: Stream,
    omega_second: Stream,
    qm_first: Stream,
    qm_relation: Stream,
}

impl TrialStreams {
    fn new(root: Stream) -> Self {
        TrialStreams {
            lambda: root.substream(TAG_LAMBDA),
            omega_first: root.substream(TAG_OMEGA_FIRST),
            omega_second: root.substream(TAG_OMEGA_SECOND),
            qm_first: root.substream(TAG_QM_FIRST),
            qm_relation: root.substream(TAG_QM_RELATION),
        }
    }
}

impl EprModel {
    pub fn new(kind: ModelKind, angles: Angles) -> Result<Self> {
        let model = EprModel { kind, angles };
        model.validate()?;
        Ok(model)
    }

    pub fn local_sign(angles: Angles) -> Self {
        EprModel {
            kind: ModelKind::LocalDeterministic(SignModel::default()),
            angles,
        }
    }

    pub fn qm_singlet(angles: Angles) -> Self {
        EprModel {
            kind: ModelKind::QmSinglet,
            angles,
        }
    }

    pub fn with_angles(&self, angles: Angles) -> Self {
        EprModel {
            kind: self.kind.clone(),
            angles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.angles;
        if ![a.a, a.a_prime, a.b, a.b_prime]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::InvalidModel("angles must be finite".into()));
        }
        match &self.kind {
            ModelKind::LocalDeterministic(m) => {
                if m.grid == 0 || m.apparatus_states == 0 || !m.jitter.is_finite() {
                    return Err(Error::InvalidModel(
                        "sign model needs grid >= 1, apparatus_states >= 1 and finite jitter"
                            .into(),
                    ));
                }
                if m.grid > u32::MAX as usize || m.apparatus_states > u32::MAX as usize {
                    return Err(Error::InvalidModel(
                        "state spaces are limited to 2^32 elements".into(),
                    ));
                }
                Ok(())
            }
            ModelKind::QmSinglet => Ok(()),
            ModelKind::CustomTable(t) => t.validate(),
        }
    }

    pub fn state_space(&self) -> StateSpace {
        match &self.kind {
            ModelKind::LocalDeterministic(m) => StateSpace {
                hidden: m.grid,
                apparatus: m.apparatus_states,
            },
            ModelKind::QmSinglet => StateSpace {
                hidden: 1,
                apparatus: 1,
            },
            ModelKind::CustomTable(t) => StateSpace {
                hidden: t.hidden_weights.len(),
                apparatus: t.apparatus_states,
            },
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.kind, ModelKind::QmSinglet)
    }

    /// `A(omega, lambda)` for a setting of one wing. Depends only on the
    /// local setting; `None` for the singlet model, which has no outcome map.
    pub fn outcome(
        &self,
        wing: Wing,
        setting: usize,
        omega: usize,
        lambda: usize,
    ) -> Option<Outcome> {
        match &self.kind {
            ModelKind::LocalDeterministic(m) => {
                let theta = self.angles.setting(wing, setting) + m.angle_offset(omega);
                let local = Outcome::from_sign((m.lambda(lambda) - theta).cos());
                Some(match wing {
                    Wing::First => local,
                    Wing::Second => local.flip(),
                })
            }
            ModelKind::QmSinglet => None,
            ModelKind::CustomTable(t) => {
                let tables = match wing {
                    Wing::First => &t.first,
                    Wing::Second => &t.second,
                };
                Some(tables[setting.min(1)].0[omega][lambda])
            }
        }
    }

    /// Mean outcome over uniformly distributed microstates, for a fixed `lambda`.
    fn mean_outcome(&self, wing: Wing, setting: usize, lambda: usize) -> f64 {
        let t = self.state_space().apparatus;
        let sum: i64 = (0..t)
            .map(|s| self.outcome(wing, setting, s, lambda).unwrap().value() as i64)
            .sum();
        sum as f64 / t as f64
    }

    fn hidden_weights(&self) -> HiddenWeights {
        match &self.kind {
            ModelKind::CustomTable(t) => HiddenWeights::Explicit(t.normalized_weights()),
            _ => HiddenWeights::Uniform(self.state_space().hidden),
        }
    }

    /// Exact expectation `E(x, y)`: a finite sum over the `Λ × Ω` grid for
    /// deterministic models, `-cos(x - y)` for the singlet.
    pub fn exact_correlation(&self, pair: SettingPair) -> f64 {
        if !self.is_deterministic() {
            let d = self.angles.setting(Wing::First, pair.first)
                - self.angles.setting(Wing::Second, pair.second);
            return -d.cos();
        }
        let weights = self.hidden_weights();
        weights.sum(|k| {
            self.mean_outcome(Wing::First, pair.first, k)
                * self.mean_outcome(Wing::Second, pair.second, k)
        })
    }

    /// Exact `S`, summed per hidden value so that each summand is a CHSH
    /// combination of local mean outcomes.
    pub fn exact_chsh(&self) -> f64 {
        if !self.is_deterministic() {
            return CHSH_TERMS
                .iter()
                .map(|&(p, sign)| sign as f64 * self.exact_correlation(p))
                .sum();
        }
        let weights = self.hidden_weights();
        weights.sum(|k| {
            let a = self.mean_outcome(Wing::First, 0, k);
            let a2 = self.mean_outcome(Wing::First, 1, k);
            let b = self.mean_outcome(Wing::Second, 0, k);
            let b2 = self.mean_outcome(Wing::Second, 1, k);
            a * (b - b2) + a2 * (b + b2)
        })
    }

    fn sample_lambda(&self, streams: &TrialStreams, j: u64, cumulative: &[f64]) -> usize {
        match &self.kind {
            ModelKind::QmSinglet => 0,
            ModelKind::LocalDeterministic(m) => streams.lambda.below_at(j, m.grid as u64) as usize,
            ModelKind::CustomTable(_) => {
                let u = streams.lambda.f64_at(j);
                cumulative
                    .partition_point(|&c| c <= u)
                    .min(cumulative.len() - 1)
            }
        }
    }

    fn cumulative_weights(&self) -> Vec<f64> {
        match &self.kind {
            ModelKind::CustomTable(t) => {
                let mut acc = 0.0;
                t.normalized_weights()
                    .into_iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    fn trial(
        &self,
        pair: SettingPair,
        streams: &TrialStreams,
        cumulative: &[f64],
        j: u64,
    ) -> Trial {
        let lambda = self.sample_lambda(streams, j, cumulative);
        let t = self.state_space().apparatus as u64;
        let omega_a = streams.omega_first.below_at(j, t) as usize;
        let omega_b = streams.omega_second.below_at(j, t) as usize;
        let (a, b) = match &self.kind {
            ModelKind::QmSinglet => {
                let d = self.angles.setting(Wing::First, pair.first)
                    - self.angles.setting(Wing::Second, pair.second);
                let a = if streams.qm_first.bernoulli_at(j, 0.5) {
                    Outcome::Plus
                } else {
                    Outcome::Minus
                };
                // p(e2 = e1) = (1 - cos d) / 2
                let same = streams.qm_relation.bernoulli_at(j, (1.0 - d.cos()) / 2.0);
                (a, if same { a } else { a.flip() })
            }
            _ => (
                self.outcome(Wing::First, pair.first, omega_a, lambda)
                    .unwrap(),
                self.outcome(Wing::Second, pair.second, omega_b, lambda)
                    .unwrap(),
            ),
        };
        Trial {
            lambda: lambda as u32,
            omega_a: omega_a as u32,
            omega_b: omega_b as u32,
            a,
            b,
        }
    }

    /// Preimage slices `sigma(e; k)` of one observable.
    pub fn preimage(&self, wing: Wing, setting: usize) -> Result<PreimageSet> {
        if !self.is_deterministic() {
            return Err(Error::InvalidModel(
                "the singlet model has no outcome map A(omega, lambda)".into(),
            ));
        }
        let space = self.state_space();
        Ok(PreimageSet::from_fn(
            space.apparatus,
            space.hidden,
            |s, k| self.outcome(wing, setting, s, k).unwrap(),
        ))
    }
}

enum HiddenWeights {
    Uniform(usize),
    Explicit(Vec<f64>),
}

impl HiddenWeights {
    fn sum(&self, f: impl Fn(usize) -> f64) -> f64 {
        match self {
            // Sum first, divide once: keeps sums of small integers exact.
            HiddenWeights::Uniform(m) => (0..*m).map(&f).sum::<f64>() / *m as f64,
            HiddenWeights::Explicit(w) => w.iter().enumerate().map(|(k, w)| w * f(k)).sum(),
        }
    }
}

/// Triangle correlation of the continuum sign model: `-1 + 2|d|/pi`, `d`
/// wrapped into `[-pi, pi]`.
pub fn triangle_correlation(delta: f64) -> f64 {
    let d = (delta + PI).rem_euclid(TAU) - PI;
    -1.0 + 2.0 * d.abs() / PI
}

/// Empirical correlation of one setting pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    #[serde(rename = "E")]
    pub e: f64,
    pub stderr: f64,
    #[serde(rename = "N")]
    pub n: u64,
}

impl CorrelationEntry {
    fn from_product_sum(sum: i64, n: u64) -> Self {
        let e = sum as f64 / n as f64;
        CorrelationEntry {
            e,
            stderr: ((1.0 - e * e).max(0.0) / n as f64).sqrt(),
            n,
        }
    }
}

/// Result of one setting pair: the labelled sequences `x_{A,lambda}`,
/// `x_{B,lambda}` (as trials) and the correlation estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EprRun {
    pub pair: SettingPair,
    pub space: StateSpace,
    pub trials: Vec<Trial>,
    pub correlation: CorrelationEntry,
}

impl EprRun {
    /// `x_{A,lambda}` as `(A_j, lambda_j)`.
    pub fn x_a_lambda(&self) -> Vec<(Outcome, usize)> {
        self.trials
            .iter()
            .map(|t| (t.a, t.lambda as usize))
            .collect()
    }

    pub fn x_b_lambda(&self) -> Vec<(Outcome, usize)> {
        self.trials
            .iter()
            .map(|t| (t.b, t.lambda as usize))
            .collect()
    }

    /// `(A, lambda)` labels `e * M + k`, alphabet `2M`.
    pub fn outcome_lambda_labels(&self, wing: Wing) -> LabelVec {
        let m = self.space.hidden;
        let labels = self
            .trials
            .iter()
            .map(|t| {
                let e = match wing {
                    Wing::First => t.a,
                    Wing::Second => t.b,
                };
                Label((e.index() * m) as u32 + t.lambda)
            })
            .collect();
        LabelVec::new(2 * m, labels).expect("labels are in range")
    }

    /// `(omega, lambda)` labels `s * M + k`, alphabet `TM`.
    pub fn omega_lambda_labels(&self, wing: Wing) -> LabelVec {
        let m = self.space.hidden;
        let labels = self
            .trials
            .iter()
            .map(|t| {
                let s = match wing {
                    Wing::First => t.omega_a,
                    Wing::Second => t.omega_b,
                };
                Label(s * m as u32 + t.lambda)
            })
            .collect();
        LabelVec::new(self.space.apparatus * m, labels).expect("labels are in range")
    }
}

fn check_trials(n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    Ok(())
}

/// Runs `n` trials of one setting pair. Trials are independent given
/// `(seed, j)` and are generated in parallel.
pub fn run_epr(model: &EprModel, pair: SettingPair, n: u64, seed: u64) -> Result<EprRun> {
    model.validate()?;
    check_trials(n)?;
    let pair = pair.validate()?;
    let streams = TrialStreams::new(Stream::new(seed));
    let cumulative = model.cumulative_weights();
    let trials: Vec<Trial> = (0..n)
        .into_par_iter()
        .map(|j| model.trial(pair, &streams, &cumulative, j))
        .collect();
    let sum: i64 = trials
        .iter()
        .map(|t| (t.a.value() * t.b.value()) as i64)
        .sum();
    Ok(EprRun {
        pair,
        space: model.state_space(),
        trials,
        correlation: CorrelationEntry::from_product_sum(sum, n),
    })
}

fn correlation_only(model: &EprModel, pair: SettingPair, n: u64, root: Stream) -> CorrelationEntry {
    let streams = TrialStreams::new(root);
    let cumulative = model.cumulative_weights();
    let sum: i64 = (0..n)
        .into_par_iter()
        .map(|j| {
            let t = model.trial(pair, &streams, &cumulative, j);
            (t.a.value() * t.b.value()) as i64
        })
        .sum();
    CorrelationEntry::from_product_sum(sum, n)
}

/// CHSH estimate `S = E(a,b) - E(a,b') + E(a',b) + E(a',b')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    #[serde(rename = "E_ab")]
    pub e_ab: f64,
    #[serde(rename = "E_ab'")]
    pub e_ab_prime: f64,
    #[serde(rename = "E_a'b")]
    pub e_a_prime_b: f64,
    #[serde(rename = "E_a'b'")]
    pub e_a_prime_b_prime: f64,
    #[serde(rename = "S")]
    pub s: f64,
    /// `|S|`; the singlet sign convention makes `S` itself negative.
    #[serde(rename = "abs_S")]
    pub abs_s: f64,
    #[serde(rename = "stderr_S")]
    pub stderr_s: f64,
    /// Standard errors of the four correlations, in the order above.
    #[serde(rename = "stderr_E")]
    pub stderr_terms: [f64; 4],
    /// Trials per setting pair.
    #[serde(rename = "N")]
    pub n: u64,
}

impl CorrelationReport {
    pub fn correlations(&self) -> [f64; 4] {
        [
            self.e_ab,
            self.e_ab_prime,
            self.e_a_prime_b,
            self.e_a_prime_b_prime,
        ]
    }

    pub const CSV_HEADER: &'static str = "E_ab,E_ab',E_a'b,E_a'b',S,abs_S,stderr_S,N";

    pub fn csv_row(&self) -> String {
        use crate::fmt::sig17;
        format!(
            "{},{},{},{},{},{},{},{}",
            sig17(self.e_ab),
            sig17(self.e_ab_prime),
            sig17(self.e_a_prime_b),
            sig17(self.e_a_prime_b_prime),
            sig17(self.s),
            sig17(self.abs_s),
            sig17(self.stderr_s),
            self.n
        )
    }
}

/// Estimates all four correlations with `n` trials each; pair `i` uses the
/// independent stream `Stream::new(seed).substream(100 + i)`.
pub fn chsh(model: &EprModel, n: u64, seed: u64) -> Result<CorrelationReport> {
    model.validate()?;
    check_trials(n)?;
    let root = Stream::new(seed);
    let entries: Vec<CorrelationEntry> = CHSH_TERMS
        .iter()
        .enumerate()
        .map(|(i, &(pair, _))| {
            correlation_only(model, pair, n, root.substream(TAG_CHSH_PAIR + i as u64))
        })
        .collect();
    let s: f64 = entries
        .iter()
        .zip(CHSH_TERMS.iter())
        .map(|(e, &(_, sign))| sign as f64 * e.e)
        .sum();
    let stderr_s = entries
        .iter()
        .map(|e| e.stderr * e.stderr)
        .sum::<f64>()
        .sqrt();
    Ok(CorrelationReport {
        e_ab: entries[0].e,
        e_ab_prime: entries[1].e,
        e_a_prime_b: entries[2].e,
        e_a_prime_b_prime: entries[3].e,
        s,
        abs_s: s.abs(),
        stderr_s,
        stderr_terms: [
            entries[0].stderr,
            entries[1].stderr,
            entries[2].stderr,
            entries[3].stderr,
        ],
        n,
    })
}

/// The sets `sigma_A(e; k) = { s : A(s, k) = e }` of one observable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreimageSet {
    apparatus: usize,
    hidden: usize,
    /// `outcome[s * hidden + k]`.
    outcome: Vec<Outcome>,
}

impl PreimageSet {
    pub fn from_fn(apparatus: usize, hidden: usize, f: impl Fn(usize, usize) -> Outcome) -> Self {
        let mut outcome = Vec::with_capacity(apparatus * hidden);
        for s in 0..apparatus {
            for k in 0..hidden {
                outcome.push(f(s, k));
            }
        }
        PreimageSet {
            apparatus,
            hidden,
            outcome,
        }
    }

    /// Builds the preimage from explicit slices: `slices[k] = [sigma(+1; k), sigma(-1; k)]`.
    /// For every `k` the two slices must partition `{0..apparatus}`.
    pub fn from_slices(apparatus: usize, slices: &[[Vec<usize>; 2]]) -> Result<Self> {
        if apparatus == 0 || slices.is_empty() {
            return Err(Error::InvalidModel("state spaces must be nonempty".into()));
        }
        let hidden = slices.len();
        let mut outcome = vec![None; apparatus * hidden];
        for (k, pair) in slices.iter().enumerate() {
            for (e, members) in Outcome::BOTH.iter().zip(pair) {
                for &s in members {
                    if s >= apparatus {
                        return Err(Error::InvalidModel(format!(
                            "microstate {s} outside Ω of size {apparatus} (lambda = {k})"
                        )));
                    }
                    let slot = &mut outcome[s * hidden + k];
                    if slot.is_some() {
                        return Err(Error::InvalidModel(format!(
                            "microstate {s} appears twice in the slices for lambda = {k}"
                        )));
                    }
                    *slot = Some(*e);
                }
            }
            if let Some(s) = (0..apparatus).find(|&s| outcome[s * hidden + k].is_none()) {
                return Err(Error::InvalidModel(format!(
                    "microstate {s} is in no slice for lambda = {k}"
                )));
            }
        }
        Ok(PreimageSet {
            apparatus,
            hidden,
            outcome: outcome.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn space(&self) -> StateSpace {
        StateSpace {
            hidden: self.hidden,
            apparatus: self.apparatus,
        }
    }

    pub fn outcome(&self, omega: usize, lambda: usize) -> Outcome {
        self.outcome[omega * self.hidden + lambda]
    }

    /// `sigma(e; k)`.
    pub fn slice(&self, e: Outcome, lambda: usize) -> Vec<usize> {
        (0..self.apparatus)
            .filter(|&s| self.outcome(s, lambda) == e)
            .collect()
    }
}

/// Maps a trace over `(omega, lambda)` labels `s * M + k` to a trace over
/// `(A, lambda)` labels `e * M + k`, using
/// `n_N(A = e, lambda = k) = sum_{s in sigma(e; k)} n_N(omega = s, lambda = k)`.
pub fn coarse_grain(trace: &FrequencyTrace, preimage: &PreimageSet) -> Result<FrequencyTrace> {
    let StateSpace { hidden, apparatus } = preimage.space();
    if trace.alphabet != hidden * apparatus {
        return Err(Error::InvalidArgument(format!(
            "trace has {} labels but Ω × Λ has {}",
            trace.alphabet,
            hidden * apparatus
        )));
    }
    let points = trace
        .points
        .iter()
        .map(|p| {
            let mut coarse = vec![0u64; 2 * hidden];
            for s in 0..apparatus {
                for k in 0..hidden {
                    let e = preimage.outcome(s, k);
                    coarse[e.index() * hidden + k] += p.counts[s * hidden + k];
                }
            }
            (p.n, coarse)
        })
        .collect();
    FrequencyTrace::from_points(2 * hidden, points)
}

/// Factorization defect of one cell `(e1, k, e2)`, conditioned on `lambda = k`:
/// `|nu(A=e1, B=e2 | k) - nu(A=e1 | k) nu(B=e2 | k)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellDefect {
    pub a: Outcome,
    pub lambda: usize,
    pub b: Outcome,
    pub defect: f64,
    /// Delta-method standard error of the defect estimate.
    pub stderr: f64,
    /// Number of trials with `lambda = k`.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectPoint {
    pub n: u64,
    /// The cell attaining the maximum; `None` when every cell is empty.
    pub max: Option<CellDefect>,
    pub cells: Vec<CellDefect>,
}

impl DefectPoint {
    pub fn defect(&self) -> Option<f64> {
        self.max.map(|c| c.defect)
    }
}

/// Cell defects from the 2x2 counts `[++, +-, -+, --]` of one `lambda` value.
pub(crate) fn defects_from_counts(counts: [u64; 4], lambda: usize) -> Vec<CellDefect> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let n = total as f64;
    let mut cells = Vec::with_capacity(4);
    for ea in Outcome::BOTH {
        for eb in Outcome::BOTH {
            let ab = counts[ea.index() * 2 + eb.index()] as f64 / n;
            let pa = (counts[ea.index() * 2] + counts[ea.index() * 2 + 1]) as f64 / n;
            let pb = (counts[eb.index()] + counts[2 + eb.index()]) as f64 / n;
            // Influence function of ab - pa pb for indicators x, y:
            // psi = x y - pb x - pa y.
            let outcomes = [(ab, 1.0 - pb - pa), (pa - ab, -pb), (pb - ab, -pa)];
            let mean: f64 = outcomes.iter().map(|(p, v)| p * v).sum();
            let second: f64 = outcomes.iter().map(|(p, v)| p * v * v).sum();
            let var = (second - mean * mean).max(0.0);
            cells.push(CellDefect {
                a: ea,
                lambda,
                b: eb,
                defect: (ab - pa * pb).abs(),
                stderr: (var / n).sqrt(),
                support: total,
            });
        }
    }
    cells
}

fn max_cell(cells: &[CellDefect]) -> Option<CellDefect> {
    cells
        .iter()
        .copied()
        .fold(None, |best: Option<CellDefect>, c| match best {
            Some(b) if b.defect >= c.defect => Some(b),
            _ => Some(c),
        })
}

/// Factorization defect of the paired sequences `x_{A,lambda}` and
/// `x_{B,lambda}` at each checkpoint. Cells whose `lambda` has not yet
/// occurred are absent and excluded from the maximum.
pub fn factorization_defect(
    za: &[(Outcome, usize)],
    zb: &[(Outcome, usize)],
    hidden: usize,
    checkpoints: &[u64],
) -> Result<Vec<DefectPoint>> {
    validate_checkpoints(checkpoints)?;
    if za.len() != zb.len() {
        return Err(Error::InvalidArgument(format!(
            "sequences have different lengths ({} and {})",
            za.len(),
            zb.len()
        )));
    }
    let last = *checkpoints.last().unwrap();
    if (za.len() as u64) < last {
        return Err(Error::InvalidArgument(format!(
            "sequences have {} elements but the last checkpoint is {last}",
            za.len()
        )));
    }
    let mut counts = vec![[0u64; 4]; hidden];
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0usize;
    for (j, ((a, ka), (b, kb))) in za.iter().zip(zb).enumerate().take(last as usize) {
        if ka != kb {
            return Err(Error::InvalidArgument(format!(
                "trial {j}: hidden values differ ({ka} vs {kb})"
            )));
        }
        if *ka >= hidden {
            return Err(Error::InvalidLabel(format!(
                "hidden value {ka} outside Λ of size {hidden}"
            )));
        }
        counts[*ka][a.index() * 2 + b.index()] += 1;
        if j as u64 + 1 == checkpoints[next] {
            let cells: Vec<CellDefect> = counts
                .iter()
                .enumerate()
                .flat_map(|(k, c)| defects_from_counts(*c, k))
                .collect();
            out.push(DefectPoint {
                n: checkpoints[next],
                max: max_cell(&cells),
                cells,
            });
            next += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::frequency_trace;

    #[test]
    fn sign_convention() {
        assert_eq!(Outcome::from_sign(0.0), Outcome::Plus);
        assert_eq!(Outcome::from_sign(-0.0), Outcome::Plus);
        assert_eq!(Outcome::from_sign(-1e-300), Outcome::Minus);
    }

    #[test]
    fn equal_settings_anticorrelate() {
        let m = EprModel::local_sign(Angles::new(0.3, 0.0, 0.3, 0.0));
        let run = run_epr(&m, SettingPair::new(0, 0), 5000, 1).unwrap();
        assert_eq!(run.correlation.e, -1.0);
        let q = EprModel::qm_singlet(Angles::new(0.3, 0.0, 0.3, 0.0));
        let run = run_epr(&q, SettingPair::new(0, 0), 5000, 1).unwrap();
        assert!(run.trials.iter().all(|t| t.a != t.b));
    }

    #[test]
    fn grid_sum_equals_triangle_on_grid_multiples() {
        let step = TAU / 720.0;
        for i in 0..=360 {
            let d = i as f64 * step;
            let m = EprModel::local_sign(Angles::new(0.0, 0.0, d, 0.0));
            let exact = m.exact_correlation(SettingPair::new(0, 0));
            assert!(
                (exact - triangle_correlation(d)).abs() < 1e-12,
                "d={d}: {exact}"
            );
        }
    }

    #[test]
    fn orthogonal_settings_give_zero() {
        let m = EprModel::local_sign(Angles::new(0.0, 0.0, FRAC_PI_2, 0.0));
        assert_eq!(m.exact_correlation(SettingPair::new(0, 0)), 0.0);
        let run = run_epr(&m, SettingPair::new(0, 0), 40_000, 9).unwrap();
        assert!(
            run.correlation.e.abs() <= 3.0 / 200.0,
            "{}",
            run.correlation.e
        );
    }

    #[test]
    fn deterministic_assignments() {
        for bits in 0..16 {
            let v = |i: i32| if bits >> i & 1 == 1 { 1 } else { -1 };
            let s = deterministic_chsh(v(0), v(1), v(2), v(3));
            assert!(s == 2 || s == -2);
        }
    }

    #[test]
    fn preimage_partition_validation() {
        let ok = PreimageSet::from_slices(2, &[[vec![0], vec![1]], [vec![0, 1], vec![]]]).unwrap();
        assert_eq!(ok.slice(Outcome::Plus, 1), vec![0, 1]);
        let missing = PreimageSet::from_slices(2, &[[vec![0], vec![]]]);
        assert!(matches!(missing, Err(Error::InvalidModel(_))));
        let twice = PreimageSet::from_slices(2, &[[vec![0, 1], vec![1]]]);
        assert!(matches!(twice, Err(Error::InvalidModel(_))));
        let outside = PreimageSet::from_slices(2, &[[vec![0, 2], vec![1]]]);
        assert!(outside.is_err());
    }

    #[test]
    fn single_microstate_coarse_grain() {
        let pre = PreimageSet::from_fn(1, 3, |_, _| Outcome::Plus);
        let seq = LabelVec::from_indices(3, &[0, 1, 2, 2, 1, 2]).unwrap();
        let micro = frequency_trace(&seq, &[3, 6]).unwrap();
        let coarse = coarse_grain(&micro, &pre).unwrap();
        for (c, m) in coarse.points.iter().zip(&micro.points) {
            assert_eq!(&c.counts[..3], &m.counts[..]);
            assert_eq!(&c.counts[3..], &[0, 0, 0]);
        }
        let wrong = PreimageSet::from_fn(2, 3, |_, _| Outcome::Plus);
        assert!(coarse_grain(&micro, &wrong).is_err());
    }

    #[test]
    fn anticorrelated_defect_is_a_quarter() {
        let za: Vec<(Outcome, usize)> = (0..1000)
            .map(|j| {
                (
                    if j % 2 == 0 {
                        Outcome::Plus
                    } else {
                        Outcome::Minus
                    },
                    0,
                )
            })
            .collect();
        let zb: Vec<(Outcome, usize)> = za.iter().map(|(e, k)| (e.flip(), *k)).collect();
        let d = factorization_defect(&za, &zb, 1, &[1000]).unwrap();
        let max = d[0].max.unwrap();
        assert_eq!(max.defect, 0.25);
        assert_eq!(max.stderr, 0.0);
    }

    #[test]
    fn defect_rejects_mismatched_lambda() {
        let za = vec![(Outcome::Plus, 0), (Outcome::Plus, 1)];
        let zb = vec![(Outcome::Plus, 0), (Outcome::Plus, 0)];
        assert!(factorization_defect(&za, &zb, 2, &[2]).is_err());
    }

    #[test]
    fn empty_cells_are_absent() {
        let za = vec![(Outcome::Plus, 0), (Outcome::Minus, 0)];
        let zb = vec![(Outcome::Plus, 0), (Outcome::Minus, 0)];
        let d = factorization_defect(&za, &zb, 3, &[2]).unwrap();
        assert_eq!(d[0].cells.len(), 4);
        assert!(d[0].cells.iter().all(|c| c.lambda == 0));
    }

    #[test]
    fn custom_table_validation() {
        let row = |v: Outcome| OutcomeTable(vec![vec![v, v]]);
        let t = CustomTable {
            hidden_weights: vec![1.0, 1.0],
            apparatus_states: 1,
            first: [row(Outcome::Plus), row(Outcome::Minus)],
            second: [row(Outcome::Plus), OutcomeTable(vec![vec![Outcome::Plus]])],
        };
        assert!(EprModel::new(ModelKind::CustomTable(t), Angles::chsh_optimal()).is_err());
    }
}
