//! Labels, label sequences, exact counting and the finite-N stabilization proxy.
//!
//! A sequence `x = (x_1, x_2, ...)` over a finite label set `L` is a
//! collective when every relative frequency `nu_N(alpha) = n_N(alpha) / N`
//! converges. No finite prefix can decide that, so [`detect_stabilization`]
//! applies a spread test over the last `K` checkpoints of a
//! [`FrequencyTrace`]. All identities are carried by the integer counts; the
//! floating frequencies are derived values.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig17;

/// Index into a declared finite label set `{0, .., m-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl Label {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A deterministic, random-access label sequence.
///
/// Implementors are pure functions of the (0-based) index, so the same
/// source always yields the same sequence and may be read concurrently.
pub trait LabelSource: Send + Sync {
    /// Size of the label set `|L|`. Every emitted label is below it.
    fn alphabet_size(&self) -> usize;

    fn label_at(&self, index: u64) -> Label;

    /// Number of available elements; `None` for unbounded generators.
    fn len(&self) -> Option<u64> {
        None
    }

    fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    fn materialize(&self, len: u64) -> Vec<Label> {
        (0..len).map(|i| self.label_at(i)).collect()
    }
}

impl<T: LabelSource + ?Sized> LabelSource for &T {
    fn alphabet_size(&self) -> usize {
        (**self).alphabet_size()
    }
    fn label_at(&self, index: u64) -> Label {
        (**self).label_at(index)
    }
    fn len(&self) -> Option<u64> {
        (**self).len()
    }
}

impl<T: LabelSource + ?Sized> LabelSource for Box<T> {
    fn alphabet_size(&self) -> usize {
        (**self).alphabet_size()
    }
    fn label_at(&self, index: u64) -> Label {
        (**self).label_at(index)
    }
    fn len(&self) -> Option<u64> {
        (**self).len()
    }
}

impl<T: LabelSource + ?Sized> LabelSource for Arc<T> {
    fn alphabet_size(&self) -> usize {
        (**self).alphabet_size()
    }
    fn label_at(&self, index: u64) -> Label {
        (**self).label_at(index)
    }
    fn len(&self) -> Option<u64> {
        (**self).len()
    }
}

/// A finite, materialized label sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVec {
    alphabet: usize,
    labels: Vec<Label>,
}

impl LabelVec {
    pub fn new(alphabet: usize, labels: Vec<Label>) -> Result<Self> {
        if alphabet == 0 {
            return Err(Error::InvalidArgument("label set must be nonempty".into()));
        }
        if let Some(bad) = labels.iter().find(|l| l.index() >= alphabet) {
            return Err(Error::InvalidLabel(format!(
                "label {bad} outside label set of size {alphabet}"
            )));
        }
        Ok(LabelVec { alphabet, labels })
    }

    pub fn from_indices(alphabet: usize, indices: &[u32]) -> Result<Self> {
        Self::new(alphabet, indices.iter().map(|&i| Label(i)).collect())
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }
}

impl LabelSource for LabelVec {
    fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    fn label_at(&self, index: u64) -> Label {
        self.labels[index as usize]
    }

    fn len(&self) -> Option<u64> {
        Some(self.labels.len() as u64)
    }
}

/// A strictly increasing list of positive sample sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Checkpoints(Vec<u64>);

impl Checkpoints {
    pub fn new(points: Vec<u64>) -> Result<Self> {
        validate_checkpoints(&points)?;
        Ok(Checkpoints(points))
    }

    /// `N = 2^lo, 2^(lo+1), .., 2^hi`.
    pub fn dyadic(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi || hi > 62 {
            return Err(Error::InvalidArgument(format!(
                "dyadic range {lo}..{hi} must satisfy lo <= hi <= 62"
            )));
        }
        Ok(Checkpoints((lo..=hi).map(|e| 1u64 << e).collect()))
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn last(&self) -> u64 {
        *self.0.last().expect("checkpoints are nonempty")
    }
}

impl std::ops::Deref for Checkpoints {
    type Target = [u64];
    fn deref(&self) -> &[u64] {
        &self.0
    }
}

impl FromStr for Checkpoints {
    type Err = Error;

    /// Accepts `dyadic:a:b` or a comma-separated list such as `10,100,1000`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("dyadic:") {
            let mut parts = rest.split(':');
            let (Some(lo), Some(hi), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("expected dyadic:a:b, got {s:?}")));
            };
            let lo = lo
                .parse::<u32>()
                .map_err(|e| Error::Parse(format!("dyadic lower exponent {lo:?}: {e}")))?;
            let hi = hi
                .parse::<u32>()
                .map_err(|e| Error::Parse(format!("dyadic upper exponent {hi:?}: {e}")))?;
            return Checkpoints::dyadic(lo, hi);
        }
        let points = s
            .split(',')
            .map(|p| {
                let p = p.trim();
                p.parse::<u64>()
                    .map_err(|e| Error::Parse(format!("checkpoint {p:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Checkpoints::new(points)
    }
}

impl TryFrom<String> for Checkpoints {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Checkpoints> for String {
    fn from(c: Checkpoints) -> String {
        c.to_string()
    }
}

impl fmt::Display for Checkpoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dyadic = self.0.iter().all(|n| n.is_power_of_two())
            && self.0.windows(2).all(|w| w[1] == 2 * w[0]);
        if dyadic {
            let lo = self.0[0].trailing_zeros();
            let hi = self.last().trailing_zeros();
            return write!(f, "dyadic:{lo}:{hi}");
        }
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

pub(crate) fn validate_checkpoints(points: &[u64]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("checkpoint list is empty".into()));
    }
    if points[0] == 0 {
        return Err(Error::InvalidArgument("checkpoints must be >= 1".into()));
    }
    if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "checkpoints must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Counts and relative frequencies at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub n: u64,
    pub counts: Vec<u64>,
    pub freqs: Vec<f64>,
}

impl TracePoint {
    fn from_counts(n: u64, counts: Vec<u64>) -> Self {
        let freqs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        TracePoint { n, counts, freqs }
    }
}

/// Checkpointed relative frequencies `nu_N(alpha)` of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTrace {
    pub alphabet: usize,
    pub points: Vec<TracePoint>,
}

impl FrequencyTrace {
    /// Single streaming pass over `labels`, snapshotting counts at each checkpoint.
    pub fn accumulate<I>(alphabet: usize, labels: I, checkpoints: &[u64]) -> Result<Self>
    where
        I: IntoIterator<Item = Label>,
    {
        validate_checkpoints(checkpoints)?;
        if alphabet == 0 {
            return Err(Error::InvalidArgument("label set must be nonempty".into()));
        }
        let mut counts = vec![0u64; alphabet];
        let mut points = Vec::with_capacity(checkpoints.len());
        let mut next = checkpoints.iter().copied().peekable();
        let mut seen = 0u64;
        let mut labels = labels.into_iter();
        while let Some(&target) = next.peek() {
            while seen < target {
                let Some(label) = labels.next() else {
                    return Err(Error::InvalidArgument(format!(
                        "sequence ended after {seen} elements, before checkpoint {target}"
                    )));
                };
                let slot = counts.get_mut(label.index()).ok_or_else(|| {
                    Error::InvalidLabel(format!(
                        "label {label} outside label set of size {alphabet}"
                    ))
                })?;
                *slot += 1;
                seen += 1;
            }
            points.push(TracePoint::from_counts(target, counts.clone()));
            next.next();
        }
        Ok(FrequencyTrace { alphabet, points })
    }

    /// Builds a trace from precomputed counts, checking the exact-count invariants.
    pub fn from_points(alphabet: usize, counts: Vec<(u64, Vec<u64>)>) -> Result<Self> {
        let ns: Vec<u64> = counts.iter().map(|(n, _)| *n).collect();
        validate_checkpoints(&ns)?;
        let mut points = Vec::with_capacity(counts.len());
        let mut prev: Option<&Vec<u64>> = None;
        for (n, c) in &counts {
            if c.len() != alphabet {
                return Err(Error::InvalidArgument(format!(
                    "count vector of length {} for label set of size {alphabet}",
                    c.len()
                )));
            }
            if c.iter().sum::<u64>() != *n {
                return Err(Error::InvalidArgument(format!(
                    "counts at N={n} do not sum to N"
                )));
            }
            if let Some(p) = prev {
                if p.iter().zip(c).any(|(a, b)| b < a) {
                    return Err(Error::InvalidArgument(format!("counts decrease at N={n}")));
                }
            }
            prev = Some(c);
        }
        for (n, c) in counts {
            points.push(TracePoint::from_counts(n, c));
        }
        Ok(FrequencyTrace { alphabet, points })
    }

    pub fn checkpoints(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.n).collect()
    }

    pub fn point(&self, n: u64) -> Result<&TracePoint> {
        self.points
            .binary_search_by_key(&n, |p| p.n)
            .map(|i| &self.points[i])
            .map_err(|_| Error::CheckpointNotFound(n))
    }

    pub fn last(&self) -> &TracePoint {
        self.points.last().expect("traces are nonempty")
    }

    /// Frequencies of one label across checkpoints.
    pub fn series(&self, label: Label) -> Vec<f64> {
        self.points.iter().map(|p| p.freqs[label.index()]).collect()
    }

    /// CSV with header `N,label,count,freq`, one row per (checkpoint, label).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "N,label,count,freq")?;
        for p in &self.points {
            for (label, (&c, &f)) in p.counts.iter().zip(&p.freqs).enumerate() {
                writeln!(w, "{},{},{},{}", p.n, label, c, sig17(f))?;
            }
        }
        Ok(())
    }
}

/// Exact frequency trace of `seq` at the given checkpoints.
pub fn frequency_trace<S: LabelSource + ?Sized>(
    seq: &S,
    checkpoints: &[u64],
) -> Result<FrequencyTrace> {
    validate_checkpoints(checkpoints)?;
    let last = *checkpoints.last().unwrap();
    if let Some(len) = seq.len() {
        if len < last {
            return Err(Error::InvalidArgument(format!(
                "sequence has {len} elements but the last checkpoint is {last}"
            )));
        }
    }
    FrequencyTrace::accumulate(
        seq.alphabet_size(),
        (0..last).map(|i| seq.label_at(i)),
        checkpoints,
    )
}

/// `nu_N(B)` for an event `B` (a set of labels) at a recorded checkpoint.
///
/// The counts of the member labels are summed as integers before dividing,
/// so additivity holds exactly at the count level.
pub fn event_frequency(trace: &FrequencyTrace, event: &[Label], n: u64) -> Result<f64> {
    let point = trace.point(n)?;
    let members: BTreeSet<Label> = event.iter().copied().collect();
    let mut total = 0u64;
    for label in members {
        let c = point.counts.get(label.index()).ok_or_else(|| {
            Error::InvalidLabel(format!(
                "label {label} outside label set of size {}",
                trace.alphabet
            ))
        })?;
        total += c;
    }
    Ok(total as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizationParams {
    /// Maximal admissible spread of a frequency across the tail window.
    pub epsilon: f64,
    /// Number of trailing checkpoints in the window (`K`).
    pub window: usize,
}

impl Default for StabilizationParams {
    fn default() -> Self {
        StabilizationParams {
            epsilon: 0.01,
            window: 4,
        }
    }
}

impl StabilizationParams {
    pub fn new(epsilon: f64, window: usize) -> Result<Self> {
        let p = StabilizationParams { epsilon, window };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be a positive finite number, got {}",
                self.epsilon
            )));
        }
        if self.window < 2 {
            return Err(Error::InvalidArgument(format!(
                "window K must be at least 2, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StabilizationStatus {
    Stabilizing,
    Fluctuating,
    Inconclusive,
}

impl fmt::Display for StabilizationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StabilizationStatus::Stabilizing => "STABILIZING",
            StabilizationStatus::Fluctuating => "FLUCTUATING",
            StabilizationStatus::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationVerdict {
    pub status: StabilizationStatus,
    /// Per label: max - min of the frequency over the window.
    pub tail_spread: Vec<f64>,
    /// Final frequencies, present only when stabilizing.
    pub estimate: Option<Vec<f64>>,
}

impl StabilizationVerdict {
    pub fn max_spread(&self) -> f64 {
        self.tail_spread.iter().copied().fold(0.0, f64::max)
    }
}

/// Spread (max - min) of each column over the trailing `window` rows.
pub(crate) fn tail_spread(rows: &[&[f64]], window: usize) -> Vec<f64> {
    let start = rows.len().saturating_sub(window);
    let tail = &rows[start..];
    let width = tail.first().map_or(0, |r| r.len());
    (0..width)
        .map(|j| {
            let (lo, hi) = tail
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[j]), hi.max(r[j]))
                });
            hi - lo
        })
        .collect()
}

/// Finite-N stabilization verdict from the last `K` checkpoints of `trace`.
///
/// STABILIZING iff every label's spread is at most `epsilon`; INCONCLUSIVE
/// iff the trace has fewer than `K` checkpoints (the spread is then reported
/// over the checkpoints available).
pub fn detect_stabilization(
    trace: &FrequencyTrace,
    params: StabilizationParams,
) -> Result<StabilizationVerdict> {
    params.validate()?;
    if trace.points.is_empty() {
        return Err(Error::InvalidArgument("trace has no checkpoints".into()));
    }
    let rows: Vec<&[f64]> = trace.points.iter().map(|p| p.freqs.as_slice()).collect();
    let spread = tail_spread(&rows, params.window);
    let status = if rows.len() < params.window {
        StabilizationStatus::Inconclusive
    } else if spread.iter().all(|&s| s <= params.epsilon) {
        StabilizationStatus::Stabilizing
    } else {
        StabilizationStatus::Fluctuating
    };
    let estimate = (status == StabilizationStatus::Stabilizing).then(|| trace.last().freqs.clone());
    Ok(StabilizationVerdict {
        status,
        tail_spread: spread,
        estimate,
    })
}
