//! Combining of collectives.
//!
//! Two sequences `x`, `y` are paired elementwise into `z_j = (x_j, y_j)`.
//! Selecting the `y_j` with `x_j = alpha` gives the subsequence `y(alpha)`;
//! its frequencies are the conditional frequencies
//! `nu_N(beta/alpha; z) = n_N(beta/alpha; z) / n_N(alpha; z)`.
//! `y` is combinable with `x` when every `y(alpha)` stabilizes, and
//! independent of `x` when all of them stabilize to the distribution of `y`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::collective::{
    frequency_trace, tail_spread, FrequencyTrace, Label, LabelSource, StabilizationParams,
    StabilizationStatus,
};
use crate::error::{Error, Result};
use crate::fmt::sig17;
use crate::rng::Stream;

/// Elementwise pairing of two sequences. The pair `(alpha, beta)` is encoded
/// as the label `alpha * |L_y| + beta`.
#[derive(Debug, Clone)]
pub struct PairedSequence<X, Y> {
    x: X,
    y: Y,
}

pub fn pair<X: LabelSource, Y: LabelSource>(x: X, y: Y) -> PairedSequence<X, Y> {
    PairedSequence { x, y }
}

impl<X: LabelSource, Y: LabelSource> PairedSequence<X, Y> {
    pub fn x(&self) -> &X {
        &self.x
    }

    pub fn y(&self) -> &Y {
        &self.y
    }

    pub fn alphabet_x(&self) -> usize {
        self.x.alphabet_size()
    }

    pub fn alphabet_y(&self) -> usize {
        self.y.alphabet_size()
    }

    pub fn encode(&self, alpha: Label, beta: Label) -> Label {
        Label(alpha.0 * self.y.alphabet_size() as u32 + beta.0)
    }

    pub fn decode(&self, label: Label) -> (Label, Label) {
        let ay = self.y.alphabet_size() as u32;
        (Label(label.0 / ay), Label(label.0 % ay))
    }

    pub fn pair_at(&self, index: u64) -> (Label, Label) {
        (self.x.label_at(index), self.y.label_at(index))
    }

    /// The swapped pairing `(y, x)`.
    pub fn swapped(&self) -> PairedSequence<&Y, &X> {
        PairedSequence {
            x: &self.y,
            y: &self.x,
        }
    }
}

impl<X: LabelSource, Y: LabelSource> LabelSource for PairedSequence<X, Y> {
    fn alphabet_size(&self) -> usize {
        self.x.alphabet_size() * self.y.alphabet_size()
    }

    fn label_at(&self, index: u64) -> Label {
        let (a, b) = self.pair_at(index);
        self.encode(a, b)
    }

    fn len(&self) -> Option<u64> {
        match (self.x.len(), self.y.len()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Joint counts `n_N(alpha, beta; z)` at one checkpoint. These are also the
/// conditional counts `n_N(beta/alpha; z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPoint {
    pub n: u64,
    /// `joint[alpha][beta]`.
    pub joint: Vec<Vec<u64>>,
}

impl ConditionalPoint {
    /// `n_N(alpha; z)`, equal to `n_N(alpha; x)`.
    pub fn count_x(&self, alpha: usize) -> u64 {
        self.joint[alpha].iter().sum()
    }

    pub fn count_y(&self, beta: usize) -> u64 {
        self.joint.iter().map(|row| row[beta]).sum()
    }

    pub fn count_cond(&self, alpha: usize, beta: usize) -> u64 {
        self.joint[alpha][beta]
    }

    /// `nu_N(beta/alpha; z)`; `None` when `n_N(alpha) = 0`.
    pub fn freq_cond(&self, alpha: usize, beta: usize) -> Option<f64> {
        let denom = self.count_x(alpha);
        (denom > 0).then(|| self.joint[alpha][beta] as f64 / denom as f64)
    }

    pub fn freq_joint(&self, alpha: usize, beta: usize) -> f64 {
        self.joint[alpha][beta] as f64 / self.n as f64
    }

    pub fn freq_x(&self, alpha: usize) -> f64 {
        self.count_x(alpha) as f64 / self.n as f64
    }

    pub fn freq_y(&self, beta: usize) -> f64 {
        self.count_y(beta) as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTrace {
    pub alphabet_x: usize,
    pub alphabet_y: usize,
    pub points: Vec<ConditionalPoint>,
}

impl ConditionalTrace {
    pub fn from_joint(alphabet_x: usize, alphabet_y: usize, trace: &FrequencyTrace) -> Self {
        let points = trace
            .points
            .iter()
            .map(|p| ConditionalPoint {
                n: p.n,
                joint: p.counts.chunks(alphabet_y).map(<[u64]>::to_vec).collect(),
            })
            .collect();
        ConditionalTrace {
            alphabet_x,
            alphabet_y,
            points,
        }
    }

    pub fn last(&self) -> &ConditionalPoint {
        self.points.last().expect("traces are nonempty")
    }

    /// The frequency trace of the subsequence `y(alpha)`, checkpointed at the
    /// distinct positive lengths `n_N(alpha)` that the subsequence reaches.
    pub fn subsequence_trace(&self, alpha: Label) -> Result<FrequencyTrace> {
        let a = alpha.index();
        if a >= self.alphabet_x {
            return Err(Error::InvalidLabel(format!(
                "label {alpha} outside label set of size {}",
                self.alphabet_x
            )));
        }
        let mut points: Vec<(u64, Vec<u64>)> = Vec::new();
        for p in &self.points {
            let len = p.count_x(a);
            if len == 0 || points.last().is_some_and(|(n, _)| *n == len) {
                continue;
            }
            points.push((len, p.joint[a].clone()));
        }
        if points.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "subsequence y({alpha}) is empty at every checkpoint"
            )));
        }
        FrequencyTrace::from_points(self.alphabet_y, points)
    }

    /// CSV with header `N,alpha,beta,count_cond,freq_cond`. Undefined
    /// conditional frequencies (`n_N(alpha) = 0`) are written as empty fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "N,alpha,beta,count_cond,freq_cond")?;
        for p in &self.points {
            for a in 0..self.alphabet_x {
                for b in 0..self.alphabet_y {
                    let f = p.freq_cond(a, b).map(sig17).unwrap_or_default();
                    writeln!(w, "{},{},{},{},{}", p.n, a, b, p.count_cond(a, b), f)?;
                }
            }
        }
        Ok(())
    }
}

/// Joint and conditional counts of `z` at each checkpoint.
pub fn conditional_trace<X, Y>(
    z: &PairedSequence<X, Y>,
    checkpoints: &[u64],
) -> Result<ConditionalTrace>
where
    X: LabelSource,
    Y: LabelSource,
{
    let joint = frequency_trace(z, checkpoints)?;
    Ok(ConditionalTrace::from_joint(
        z.alphabet_x(),
        z.alphabet_y(),
        &joint,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinabilityVerdict {
    pub combinable: bool,
    pub independent: bool,
    /// Max over the assessed `alpha` and all `beta` of
    /// `|nu(beta/alpha) - nu(beta; y)|` at the final checkpoint.
    pub max_dependence: f64,
    pub per_alpha_status: Vec<StabilizationStatus>,
}

/// Stabilization status of `y(alpha)` over the tail window.
///
/// An `alpha` that is absent somewhere in the window, or that gains no new
/// occurrences across it, is INCONCLUSIVE: its subsequence may be finite.
fn conditional_status(
    trace: &ConditionalTrace,
    alpha: usize,
    params: StabilizationParams,
) -> StabilizationStatus {
    if trace.points.len() < params.window {
        return StabilizationStatus::Inconclusive;
    }
    let tail = &trace.points[trace.points.len() - params.window..];
    let first = tail[0].count_x(alpha);
    let last = tail[tail.len() - 1].count_x(alpha);
    if first == 0 || first == last {
        return StabilizationStatus::Inconclusive;
    }
    let rows: Vec<Vec<f64>> = tail
        .iter()
        .map(|p| {
            (0..trace.alphabet_y)
                .map(|b| p.freq_cond(alpha, b).unwrap())
                .collect()
        })
        .collect();
    let rows: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    if tail_spread(&rows, params.window)
        .iter()
        .all(|&s| s <= params.epsilon)
    {
        StabilizationStatus::Stabilizing
    } else {
        StabilizationStatus::Fluctuating
    }
}

/// Combinability and independence verdict from a conditional trace.
pub fn assess_conditional(
    trace: &ConditionalTrace,
    params: StabilizationParams,
) -> Result<CombinabilityVerdict> {
    params.validate()?;
    if trace.points.is_empty() {
        return Err(Error::InvalidArgument("trace has no checkpoints".into()));
    }
    let per_alpha_status: Vec<StabilizationStatus> = (0..trace.alphabet_x)
        .map(|a| conditional_status(trace, a, params))
        .collect();
    let assessed: Vec<usize> = (0..trace.alphabet_x)
        .filter(|&a| per_alpha_status[a] != StabilizationStatus::Inconclusive)
        .collect();
    let combinable = !assessed.is_empty()
        && assessed
            .iter()
            .all(|&a| per_alpha_status[a] == StabilizationStatus::Stabilizing);
    let last = trace.last();
    let mut max_dependence = 0.0f64;
    for &a in &assessed {
        for b in 0..trace.alphabet_y {
            let cond = last.freq_cond(a, b).expect("assessed labels occur");
            max_dependence = max_dependence.max((cond - last.freq_y(b)).abs());
        }
    }
    let independent = combinable && max_dependence <= params.epsilon;
    Ok(CombinabilityVerdict {
        combinable,
        independent,
        max_dependence,
        per_alpha_status,
    })
}

pub fn assess_combinability<X, Y>(
    z: &PairedSequence<X, Y>,
    checkpoints: &[u64],
    params: StabilizationParams,
) -> Result<CombinabilityVerdict>
where
    X: LabelSource,
    Y: LabelSource,
{
    params.validate()?;
    assess_conditional(&conditional_trace(z, checkpoints)?, params)
}

/// Ground-truth dependent pair `(u, v)` of ±1 / {0,1} collectives:
/// `u = +1` with probability `p_u_plus`, then `v = 1` with probability
/// `p_v_given_plus` or `p_v_given_minus` according to `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependentPair {
    pub p_u_plus: f64,
    pub p_v_given_plus: f64,
    pub p_v_given_minus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionParams {
    pub bit_count: usize,
    pub samples_per_bit: usize,
    pub threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReport {
    pub sent: Vec<bool>,
    pub decoded: Vec<bool>,
    /// Receiver's estimate of the conditional frequency of `v = 1`, per bit.
    pub frequencies: Vec<f64>,
    pub errors: usize,
}

const TAG_MESSAGE: u64 = 1;
const TAG_U: u64 = 2;
const TAG_V: u64 = 3;

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Configuration(format!(
            "{name} = {p} is not a probability"
        )))
    }
}

/// Sends `bit_count` bits through a pair of dependent collectives.
///
/// For bit 1 the sender forwards the subcollective `v(+1)`, for bit 0 the
/// subcollective `v(-1)`, each truncated to `samples_per_bit` elements taken
/// from one shared run of the pair. The receiver sees only `v` values,
/// estimates the frequency of `v = 1` and decodes by comparing it with
/// `threshold`.
pub fn transmit_bits(
    pair: DependentPair,
    params: TransmissionParams,
) -> Result<TransmissionReport> {
    check_probability("p(u=+1)", pair.p_u_plus)?;
    check_probability("p(v=1/u=+1)", pair.p_v_given_plus)?;
    check_probability("p(v=1/u=-1)", pair.p_v_given_minus)?;
    let (p1, p2) = (pair.p_v_given_plus, pair.p_v_given_minus);
    if p1 == p2 {
        return Err(Error::Configuration(
            "conditional probabilities are equal: the collectives are independent and carry no signal".into(),
        ));
    }
    if !(pair.p_u_plus > 0.0 && pair.p_u_plus < 1.0) {
        return Err(Error::Configuration(
            "p(u=+1) must lie strictly inside (0, 1) so both subcollectives are infinite".into(),
        ));
    }
    let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
    if !(params.threshold > lo && params.threshold < hi) {
        return Err(Error::Configuration(format!(
            "threshold {} must lie strictly between {lo} and {hi}",
            params.threshold
        )));
    }
    if params.samples_per_bit == 0 {
        return Err(Error::Configuration(
            "samples_per_bit must be positive".into(),
        ));
    }

    let root = Stream::new(params.seed);
    let message = root.substream(TAG_MESSAGE);
    let u_stream = root.substream(TAG_U);
    let v_stream = root.substream(TAG_V);
    let plus_is_high = p1 > p2;

    let mut cursor = 0u64;
    let mut sent = Vec::with_capacity(params.bit_count);
    let mut decoded = Vec::with_capacity(params.bit_count);
    let mut frequencies = Vec::with_capacity(params.bit_count);
    for bit_index in 0..params.bit_count {
        let bit = message.u64_at(bit_index as u64) & 1 == 1;
        let want_plus = bit;
        let mut ones = 0usize;
        let mut taken = 0usize;
        while taken < params.samples_per_bit {
            let j = cursor;
            cursor += 1;
            let u_plus = u_stream.bernoulli_at(j, pair.p_u_plus);
            if u_plus != want_plus {
                continue;
            }
            let p = if u_plus { p1 } else { p2 };
            if v_stream.bernoulli_at(j, p) {
                ones += 1;
            }
            taken += 1;
        }
        let freq = ones as f64 / taken as f64;
        let guess = (freq > params.threshold) == plus_is_high;
        sent.push(bit);
        decoded.push(guess);
        frequencies.push(freq);
    }
    let errors = sent.iter().zip(&decoded).filter(|(a, b)| a != b).count();
    Ok(TransmissionReport {
        sent,
        decoded,
        frequencies,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::LabelVec;

    fn seq(alphabet: usize, v: &[u32]) -> LabelVec {
        LabelVec::from_indices(alphabet, v).unwrap()
    }

    #[test]
    fn alternating_pair() {
        let x = seq(2, &[0, 1, 0, 1, 0, 1]);
        let y = seq(2, &[1, 0, 1, 0, 1, 0]);
        let z = pair(&x, &y);
        let t = frequency_trace(&z, &[2, 4, 6]).unwrap();
        for p in &t.points {
            assert_eq!(p.freqs[z.encode(Label(0), Label(1)).index()], 0.5);
            assert_eq!(p.freqs[z.encode(Label(1), Label(0)).index()], 0.5);
        }
    }

    #[test]
    fn diagonal_pairing() {
        let x = seq(3, &[0, 2, 1, 1, 2, 2, 0, 1]);
        let z = pair(&x, &x);
        let t = frequency_trace(&z, &[8]).unwrap();
        let marg = frequency_trace(&x, &[8]).unwrap();
        for a in 0..3u32 {
            for b in 0..3u32 {
                let f = t.points[0].freqs[z.encode(Label(a), Label(b)).index()];
                if a == b {
                    assert_eq!(f, marg.points[0].freqs[a as usize]);
                } else {
                    assert_eq!(f, 0.0);
                }
            }
        }
    }

    #[test]
    fn hand_counted_conditionals() {
        let x = seq(2, &[0, 0, 1, 1]);
        let y = seq(2, &[1, 0, 1, 1]);
        let c = conditional_trace(&pair(&x, &y), &[4]).unwrap();
        let p = c.last();
        assert_eq!(p.freq_cond(0, 1), Some(0.5));
        assert_eq!(p.freq_cond(1, 1), Some(1.0));
        assert_eq!(p.count_cond(1, 0), 0);
    }

    #[test]
    fn conditioning_on_constant_is_marginal() {
        let x = seq(1, &[0; 10]);
        let y = seq(2, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let c = conditional_trace(&pair(&x, &y), &[2, 5, 10]).unwrap();
        let ty = frequency_trace(&y, &[2, 5, 10]).unwrap();
        for (p, q) in c.points.iter().zip(&ty.points) {
            for b in 0..2 {
                assert_eq!(p.freq_cond(0, b), Some(q.freqs[b]));
            }
        }
    }

    #[test]
    fn undefined_conditional_is_absent() {
        let x = seq(2, &[0, 0, 0, 1]);
        let y = seq(2, &[1, 0, 1, 1]);
        let c = conditional_trace(&pair(&x, &y), &[2, 4]).unwrap();
        assert_eq!(c.points[0].freq_cond(1, 0), None);
        assert_eq!(c.points[1].freq_cond(1, 1), Some(1.0));
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("N,alpha,beta,count_cond,freq_cond\n"));
        assert!(text.contains("\n2,1,0,0,\n"));
    }

    #[test]
    fn subsequence_trace_lengths() {
        let x = seq(2, &[0, 1, 1, 1, 0, 1]);
        let y = seq(2, &[1, 0, 1, 1, 0, 1]);
        let c = conditional_trace(&pair(&x, &y), &[1, 2, 3, 6]).unwrap();
        let t = c.subsequence_trace(Label(1)).unwrap();
        assert_eq!(t.checkpoints(), vec![1, 2, 4]);
        assert_eq!(t.last().counts, vec![1, 3]);
        assert!(c.subsequence_trace(Label(2)).is_err());
    }

    #[test]
    fn transmission_configuration_errors() {
        let params = TransmissionParams {
            bit_count: 8,
            samples_per_bit: 10,
            threshold: 0.5,
            seed: 1,
        };
        let equal = DependentPair {
            p_u_plus: 0.5,
            p_v_given_plus: 0.5,
            p_v_given_minus: 0.5,
        };
        assert!(matches!(
            transmit_bits(equal, params),
            Err(Error::Configuration(_))
        ));
        let pair = DependentPair {
            p_u_plus: 0.5,
            p_v_given_plus: 0.9,
            p_v_given_minus: 0.1,
        };
        let outside = TransmissionParams {
            threshold: 0.95,
            ..params
        };
        assert!(matches!(
            transmit_bits(pair, outside),
            Err(Error::Configuration(_))
        ));
        let degenerate_u = DependentPair {
            p_u_plus: 1.0,
            ..pair
        };
        assert!(transmit_bits(degenerate_u, params).is_err());
    }

    #[test]
    fn deterministic_channel_single_sample() {
        let pair = DependentPair {
            p_u_plus: 0.5,
            p_v_given_plus: 1.0,
            p_v_given_minus: 0.0,
        };
        let r = transmit_bits(
            pair,
            TransmissionParams {
                bit_count: 64,
                samples_per_bit: 1,
                threshold: 0.5,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(r.errors, 0);
        assert_eq!(r.sent, r.decoded);
        assert!(r.sent.iter().any(|&b| b) && r.sent.iter().any(|&b| !b));
    }

    #[test]
    fn inverted_channel_decodes() {
        let pair = DependentPair {
            p_u_plus: 0.3,
            p_v_given_plus: 0.2,
            p_v_given_minus: 0.8,
        };
        let r = transmit_bits(
            pair,
            TransmissionParams {
                bit_count: 32,
                samples_per_bit: 2000,
                threshold: 0.5,
                seed: 11,
            },
        )
        .unwrap();
        assert_eq!(r.errors, 0);
    }
}
