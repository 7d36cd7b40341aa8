//! Exact joint-distribution existence for three ±1 observables `A`, `B`, `A'`.
//!
//! A marginal system fixes the single distributions and the pair tables
//! `(A,B)`, `(A',B)` and optionally `(A,A')`. In moment coordinates
//! `m = (1, E(A), E(B), E(A'), E(AB), E(A'B)[, E(AA')])` the question is
//! whether `m` lies in the convex hull of the eight deterministic vertices.
//! Everything is computed over exact rationals.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::de::{self, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub type Rational = BigRational;

/// Floating-point inputs are replaced by their best rational approximation
/// with denominator at most this bound.
pub const MAX_DENOMINATOR: i64 = 1_000_000;

/// Longest accepted rational literal, in bytes.
pub const MAX_LITERAL_LEN: usize = 256;

/// Names of the moment coordinates, in order.
pub const FEATURES: [&str; 7] = ["1", "E(A)", "E(B)", "E(A')", "E(AB)", "E(A'B)", "E(AA')"];

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn parse_integer(s: &str) -> Result<BigInt> {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Parse(format!("malformed integer {s:?}")));
    }
    BigInt::from_str(s).map_err(|e| Error::Parse(format!("malformed integer {s:?}: {e}")))
}

/// Parses `"num/den"`, an integer, or a plain decimal such as `"0.125"`
/// (decimals are read exactly).
pub fn parse_rational(s: &str) -> Result<Rational> {
    let t = s.trim();
    if t.is_empty() {
        return Err(Error::Parse("empty rational literal".into()));
    }
    if t.len() > MAX_LITERAL_LEN {
        return Err(Error::Parse(format!(
            "rational literal longer than {MAX_LITERAL_LEN} bytes"
        )));
    }
    if let Some((num, den)) = t.split_once('/') {
        let num = parse_integer(num.trim())?;
        let den = parse_integer(den.trim())?;
        if den.is_zero() {
            return Err(Error::Parse(format!("zero denominator in {t:?}")));
        }
        return Ok(Rational::new(num, den));
    }
    if let Some((int, frac)) = t.split_once('.') {
        let negative = int.starts_with('-');
        let int = parse_integer(int)?;
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::Parse(format!("malformed decimal {t:?}")));
        }
        let scale = num_traits::pow(BigInt::from(10), frac.len());
        let frac = Rational::new(BigInt::from_str(frac).unwrap(), scale);
        let magnitude = Rational::from_integer(int.abs()) + frac;
        return Ok(if negative { -magnitude } else { magnitude });
    }
    Ok(Rational::from_integer(parse_integer(t)?))
}

/// Best rational approximation of `x` with denominator at most [`MAX_DENOMINATOR`].
pub fn rationalize(x: f64) -> Result<Rational> {
    if !x.is_finite() || x.abs() > 1e15 {
        return Err(Error::Parse(format!("cannot rationalize {x}")));
    }
    let max = MAX_DENOMINATOR as i128;
    let y = x.abs();
    let (mut p0, mut q0, mut p1, mut q1) = (0i128, 1i128, 1i128, 0i128);
    let mut rest = y;
    for _ in 0..64 {
        let a = rest.floor();
        let ai = a as i128;
        let (p2, q2) = (ai * p1 + p0, ai * q1 + q0);
        if q2 > max {
            let k = (max - q0) / q1;
            let (ps, qs) = (k * p1 + p0, k * q1 + q0);
            let semi = (ps as f64 / qs as f64 - y).abs();
            let conv = (p1 as f64 / q1 as f64 - y).abs();
            if semi < conv {
                p1 = ps;
                q1 = qs;
            }
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let frac = rest - a;
        if frac == 0.0 || p1 as f64 / q1 as f64 == y {
            break;
        }
        rest = 1.0 / frac;
    }
    let r = Rational::new(BigInt::from(p1), BigInt::from(q1));
    Ok(if x < 0.0 { -r } else { r })
}

fn rational_string(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn serialize_rational<S: Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&rational_string(r))
}

/// A rational read from a JSON string (`"3/8"`) or number (rationalized).
#[derive(Debug, Clone, PartialEq, Eq)]
struct Lit(Rational);

impl Serialize for Lit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_rational(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Lit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct LitVisitor;
        impl Visitor<'_> for LitVisitor {
            type Value = Lit;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a rational as \"num/den\" or a number")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Lit, E> {
                parse_rational(v).map(Lit).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Lit, E> {
                Ok(Lit(Rational::from_integer(v.into())))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Lit, E> {
                Ok(Lit(Rational::from_integer(v.into())))
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Lit, E> {
                rationalize(v).map(Lit).map_err(E::custom)
            }
        }
        d.deserialize_any(LitVisitor)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSingle {
    #[serde(rename = "+1")]
    plus: Lit,
    #[serde(rename = "-1")]
    minus: Lit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    #[serde(rename = "++")]
    pp: Lit,
    #[serde(rename = "+-")]
    pm: Lit,
    #[serde(rename = "-+")]
    mp: Lit,
    #[serde(rename = "--")]
    mm: Lit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(rename = "A")]
    a: RawSingle,
    #[serde(rename = "B")]
    b: RawSingle,
    #[serde(rename = "A'")]
    a_prime: RawSingle,
    #[serde(rename = "AB")]
    ab: RawPair,
    #[serde(rename = "A'B")]
    a_prime_b: RawPair,
    #[serde(rename = "AA'", default, skip_serializing_if = "Option::is_none")]
    a_a_prime: Option<RawPair>,
}

pub type Single = [Rational; 2];
/// `t[i][j]`: first observable `e_i`, second `e_j`; index 0 is `+1`.
pub type PairTable = [[Rational; 2]; 2];

impl From<RawSingle> for Single {
    fn from(r: RawSingle) -> Self {
        [r.plus.0, r.minus.0]
    }
}

impl From<RawPair> for PairTable {
    fn from(r: RawPair) -> Self {
        [[r.pp.0, r.pm.0], [r.mp.0, r.mm.0]]
    }
}

fn raw_single(s: &Single) -> RawSingle {
    RawSingle {
        plus: Lit(s[0].clone()),
        minus: Lit(s[1].clone()),
    }
}

fn raw_pair(t: &PairTable) -> RawPair {
    RawPair {
        pp: Lit(t[0][0].clone()),
        pm: Lit(t[0][1].clone()),
        mp: Lit(t[1][0].clone()),
        mm: Lit(t[1][1].clone()),
    }
}

/// Single and pairwise distributions of `A`, `B`, `A'`.
///
/// JSON form: keys `"A"`, `"B"`, `"A'"` map `"+1"`/`"-1"` to probabilities;
/// `"AB"`, `"A'B"` and the optional `"AA'"` map `"++"`, `"+-"`, `"-+"`, `"--"`
/// to cell probabilities (first symbol for the first-named observable).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawSystem", into = "RawSystem")]
pub struct MarginalSystem {
    pub a: Single,
    pub b: Single,
    pub a_prime: Single,
    pub ab: PairTable,
    pub a_prime_b: PairTable,
    pub a_a_prime: Option<PairTable>,
}

impl From<RawSystem> for MarginalSystem {
    fn from(r: RawSystem) -> Self {
        MarginalSystem {
            a: r.a.into(),
            b: r.b.into(),
            a_prime: r.a_prime.into(),
            ab: r.ab.into(),
            a_prime_b: r.a_prime_b.into(),
            a_a_prime: r.a_a_prime.map(Into::into),
        }
    }
}

impl From<MarginalSystem> for RawSystem {
    fn from(m: MarginalSystem) -> Self {
        RawSystem {
            a: raw_single(&m.a),
            b: raw_single(&m.b),
            a_prime: raw_single(&m.a_prime),
            ab: raw_pair(&m.ab),
            a_prime_b: raw_pair(&m.a_prime_b),
            a_a_prime: m.a_a_prime.as_ref().map(raw_pair),
        }
    }
}

fn check_single(name: &str, s: &Single) -> Result<()> {
    if s.iter().any(Signed::is_negative) {
        return Err(invalid(format!("{name}: negative probability")));
    }
    if &s[0] + &s[1] != Rational::one() {
        return Err(invalid(format!(
            "{name}: probabilities sum to {}, not 1",
            rational_string(&(&s[0] + &s[1]))
        )));
    }
    Ok(())
}

fn check_pair(name: &str, t: &PairTable, first: &Single, second: &Single) -> Result<()> {
    if t.iter().flatten().any(Signed::is_negative) {
        return Err(invalid(format!("{name}: negative cell probability")));
    }
    for i in 0..2 {
        if &t[i][0] + &t[i][1] != first[i] {
            return Err(invalid(format!(
                "{name}: rows do not marginalize to the first observable"
            )));
        }
        if &t[0][i] + &t[1][i] != second[i] {
            return Err(invalid(format!(
                "{name}: columns do not marginalize to the second observable"
            )));
        }
    }
    Ok(())
}

fn expectation(s: &Single) -> Rational {
    &s[0] - &s[1]
}

fn pair_expectation(t: &PairTable) -> Rational {
    &t[0][0] + &t[1][1] - &t[0][1] - &t[1][0]
}

/// Cells of a pair table from its moments: `p(e1, e2) = (1 + e1 x + e2 y + e1 e2 xy) / 4`.
fn table_from_moments(x: &Rational, y: &Rational, xy: &Rational) -> PairTable {
    let quarter = Rational::new(1.into(), 4.into());
    let cell = |e1: i32, e2: i32| {
        let e1r = Rational::from_integer(e1.into());
        let e2r = Rational::from_integer(e2.into());
        (Rational::one() + &e1r * x + &e2r * y + &e1r * &e2r * xy) * &quarter
    };
    [[cell(1, 1), cell(1, -1)], [cell(-1, 1), cell(-1, -1)]]
}

fn single_from_moment(x: &Rational) -> Single {
    let half = Rational::new(1.into(), 2.into());
    [(Rational::one() + x) * &half, (Rational::one() - x) * &half]
}

impl MarginalSystem {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: MarginalSystem =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("marginal systems serialize")
    }

    /// Builds a system from its moments; fails if some cell would be negative.
    pub fn from_moments(
        e_a: Rational,
        e_b: Rational,
        e_a_prime: Rational,
        e_ab: Rational,
        e_a_prime_b: Rational,
        e_a_a_prime: Option<Rational>,
    ) -> Result<Self> {
        let m = MarginalSystem {
            a: single_from_moment(&e_a),
            b: single_from_moment(&e_b),
            a_prime: single_from_moment(&e_a_prime),
            ab: table_from_moments(&e_a, &e_b, &e_ab),
            a_prime_b: table_from_moments(&e_a_prime, &e_b, &e_a_prime_b),
            a_a_prime: e_a_a_prime.map(|z| table_from_moments(&e_a, &e_a_prime, &z)),
        };
        m.validate()?;
        Ok(m)
    }

    /// Three independent fair coins.
    pub fn product_fair() -> Self {
        let z = Rational::zero;
        Self::from_moments(z(), z(), z(), z(), z(), Some(z())).unwrap()
    }

    /// Each table nonnegative and normalized; pair tables marginalize to the singles.
    pub fn validate(&self) -> Result<()> {
        check_single("A", &self.a)?;
        check_single("B", &self.b)?;
        check_single("A'", &self.a_prime)?;
        check_pair("AB", &self.ab, &self.a, &self.b)?;
        check_pair("A'B", &self.a_prime_b, &self.a_prime, &self.b)?;
        if let Some(t) = &self.a_a_prime {
            check_pair("AA'", t, &self.a, &self.a_prime)?;
        }
        Ok(())
    }

    /// Number of moment coordinates: 7 with `(A, A')`, 6 without.
    pub fn rank(&self) -> usize {
        if self.a_a_prime.is_some() {
            7
        } else {
            6
        }
    }

    /// `(1, E(A), E(B), E(A'), E(AB), E(A'B)[, E(AA')])`.
    pub fn moments(&self) -> Vec<Rational> {
        let mut m = vec![
            Rational::one(),
            expectation(&self.a),
            expectation(&self.b),
            expectation(&self.a_prime),
            pair_expectation(&self.ab),
            pair_expectation(&self.a_prime_b),
        ];
        if let Some(t) = &self.a_a_prime {
            m.push(pair_expectation(t));
        }
        m
    }

    /// `(1 - t) self + t other`; both must supply the same tables.
    pub fn mix(&self, other: &Self, t: &Rational) -> Result<Self> {
        if t.is_negative() || t > &Rational::one() {
            return Err(Error::InvalidArgument(
                "mixing weight must lie in [0, 1]".into(),
            ));
        }
        if self.a_a_prime.is_some() != other.a_a_prime.is_some() {
            return Err(Error::InvalidArgument(
                "systems supply different pair tables".into(),
            ));
        }
        let s = Rational::one() - t;
        let single =
            |x: &Single, y: &Single| -> Single { [&s * &x[0] + t * &y[0], &s * &x[1] + t * &y[1]] };
        let pair = |x: &PairTable, y: &PairTable| -> PairTable {
            [single(&x[0], &y[0]), single(&x[1], &y[1])]
        };
        Ok(MarginalSystem {
            a: single(&self.a, &other.a),
            b: single(&self.b, &other.b),
            a_prime: single(&self.a_prime, &other.a_prime),
            ab: pair(&self.ab, &other.ab),
            a_prime_b: pair(&self.a_prime_b, &other.a_prime_b),
            a_a_prime: match (&self.a_a_prime, &other.a_a_prime) {
                (Some(x), Some(y)) => Some(pair(x, y)),
                _ => None,
            },
        })
    }
}

/// Values of `(A, B, A')` at atom `i = i1*4 + i2*2 + i3`, index 0 meaning `+1`.
pub fn atom_values(i: usize) -> [i64; 3] {
    let v = |bit: usize| if i >> bit & 1 == 0 { 1 } else { -1 };
    [v(2), v(1), v(0)]
}

fn atom_key(i: usize) -> String {
    atom_values(i)
        .iter()
        .map(|&v| if v > 0 { '+' } else { '-' })
        .collect()
}

/// Moment features of the deterministic vertex at atom `i`.
fn vertex_features(i: usize, rank: usize) -> Vec<i64> {
    let [a, b, c] = atom_values(i);
    let f = [1, a, b, c, a * b, c * b, a * c];
    f[..rank].to_vec()
}

/// Eight nonnegative atoms `p_{e1 e2 e3}` summing to one, indexed by
/// `(A, B, A')`; serialized as a map from `"+-+"`-style keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAtomVector([Rational; 8]);

impl Serialize for JointAtomVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(8))?;
        for (i, p) in self.0.iter().enumerate() {
            map.serialize_entry(&atom_key(i), &rational_string(p))?;
        }
        map.end()
    }
}

impl JointAtomVector {
    pub fn new(atoms: [Rational; 8]) -> Result<Self> {
        if atoms.iter().any(Signed::is_negative) {
            return Err(invalid("negative atom"));
        }
        if atoms.iter().sum::<Rational>() != Rational::one() {
            return Err(invalid("atoms do not sum to 1"));
        }
        Ok(JointAtomVector(atoms))
    }

    pub fn uniform() -> Self {
        JointAtomVector(std::array::from_fn(|_| Rational::new(1.into(), 8.into())))
    }

    /// The point mass at atom `i`.
    pub fn vertex(i: usize) -> Self {
        JointAtomVector(std::array::from_fn(|j| {
            if i == j {
                Rational::one()
            } else {
                Rational::zero()
            }
        }))
    }

    pub fn atoms(&self) -> &[Rational; 8] {
        &self.0
    }

    /// `p(A = e1, B = e2, A' = e3)` with outcome indices (0 for `+1`).
    pub fn get(&self, e1: usize, e2: usize, e3: usize) -> &Rational {
        &self.0[e1 * 4 + e2 * 2 + e3]
    }

    /// The induced marginal system, with or without the `(A, A')` table.
    pub fn marginals(&self, with_a_a_prime: bool) -> MarginalSystem {
        let z = || Rational::zero();
        let mut a = [z(), z()];
        let mut b = [z(), z()];
        let mut ap = [z(), z()];
        let mut ab = [[z(), z()], [z(), z()]];
        let mut apb = [[z(), z()], [z(), z()]];
        let mut aap = [[z(), z()], [z(), z()]];
        for (i, p) in self.0.iter().enumerate() {
            let (i1, i2, i3) = (i >> 2 & 1, i >> 1 & 1, i & 1);
            a[i1] += p;
            b[i2] += p;
            ap[i3] += p;
            ab[i1][i2] += p;
            apb[i3][i2] += p;
            aap[i1][i3] += p;
        }
        MarginalSystem {
            a,
            b,
            a_prime: ap,
            ab,
            a_prime_b: apb,
            a_a_prime: with_a_a_prime.then_some(aap),
        }
    }
}

/// A linear functional on moment coordinates, nonnegative at every vertex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Certificate {
    /// Human-readable form, e.g. `1 - E(AB) + E(A'B) - E(AA') >= 0`.
    pub inequality: String,
    /// Integer coefficients over [`FEATURES`].
    pub coefficients: Vec<i64>,
    /// The functional evaluated at the input; negative.
    #[serde(serialize_with = "serialize_rational")]
    pub value: Rational,
}

impl Certificate {
    fn new(coefficients: Vec<i64>, moments: &[Rational]) -> Self {
        Certificate {
            inequality: format_inequality(&coefficients),
            value: evaluate(&coefficients, moments),
            coefficients,
        }
    }

    pub fn evaluate(&self, m: &MarginalSystem) -> Rational {
        evaluate(&self.coefficients, &m.moments())
    }

    /// Value at each of the eight deterministic vertices.
    pub fn vertex_values(&self) -> [i64; 8] {
        let r = self.coefficients.len();
        std::array::from_fn(|i| {
            vertex_features(i, r)
                .iter()
                .zip(&self.coefficients)
                .map(|(f, c)| f * c)
                .sum()
        })
    }
}

fn evaluate(coefficients: &[i64], moments: &[Rational]) -> Rational {
    coefficients
        .iter()
        .zip(moments)
        .map(|(c, m)| Rational::from_integer((*c).into()) * m)
        .sum()
}

fn format_inequality(coefficients: &[i64]) -> String {
    let mut out = String::new();
    for (c, name) in coefficients.iter().zip(FEATURES) {
        if *c == 0 {
            continue;
        }
        let sign = if *c < 0 { "-" } else { "+" };
        if out.is_empty() {
            if *c < 0 {
                out.push('-');
            }
        } else {
            out.push_str(&format!(" {sign} "));
        }
        let mag = c.abs();
        match (mag, name) {
            (_, "1") => out.push_str(&mag.to_string()),
            (1, _) => out.push_str(name),
            _ => out.push_str(&format!("{mag} {name}")),
        }
    }
    if out.is_empty() {
        out.push('0');
    }
    out.push_str(" >= 0");
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "SCREAMING_SNAKE_CASE")]
#[allow(clippy::large_enum_variant)]
pub enum JointVerdict {
    Feasible { witness: JointAtomVector },
    Infeasible { certificate: Certificate },
}

impl JointVerdict {
    pub fn is_feasible(&self) -> bool {
        matches!(self, JointVerdict::Feasible { .. })
    }
}

type Matrix = Vec<Vec<Rational>>;

struct Basis {
    columns: Vec<usize>,
    inverse: Matrix,
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn to_rational(rows: &[Vec<i64>]) -> Matrix {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|&v| Rational::from_integer(v.into()))
                .collect()
        })
        .collect()
}

/// Gauss-Jordan inverse; `None` if singular.
fn invert(m: &Matrix) -> Option<Matrix> {
    let n = m.len();
    let mut a: Matrix = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| {
                if i == j {
                    Rational::one()
                } else {
                    Rational::zero()
                }
            }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        let p = a[col][col].clone();
        for v in a[col].iter_mut() {
            *v = &*v / &p;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(&pivot_row) {
                    *v -= &f * pv;
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

/// One-dimensional null space of a `(r-1) x r` matrix, if it has full row rank.
fn null_vector(rows: &Matrix, width: usize) -> Option<Vec<Rational>> {
    let mut a = rows.clone();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..width {
        let Some(p) = (row..a.len()).find(|&r| !a[r][col].is_zero()) else {
            continue;
        };
        a.swap(row, p);
        let pv = a[row][col].clone();
        for v in a[row].iter_mut() {
            *v = &*v / &pv;
        }
        for r in 0..a.len() {
            if r != row && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                let pivot_row = a[row].clone();
                for (v, x) in a[r].iter_mut().zip(&pivot_row) {
                    *v -= &f * x;
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    if pivots.len() + 1 != width {
        return None;
    }
    let free = (0..width).find(|c| !pivots.contains(c)).unwrap();
    let mut y = vec![Rational::zero(); width];
    y[free] = Rational::one();
    for (r, &c) in pivots.iter().enumerate() {
        y[c] = -a[r][free].clone();
    }
    Some(y)
}

/// Scales a rational vector to the primitive integer vector in its direction.
fn primitive(v: &[Rational]) -> Vec<i64> {
    let lcm = v.iter().fold(BigInt::one(), |acc, x| acc.lcm(x.denom()));
    let ints: Vec<BigInt> = v
        .iter()
        .map(|x| (x * Rational::from_integer(lcm.clone())).to_integer())
        .collect();
    let gcd = ints.iter().fold(BigInt::zero(), |acc, x| acc.gcd(x));
    ints.iter()
        .map(|x| (x / &gcd).to_i64().expect("facet coefficients are small"))
        .collect()
}

struct Polytope {
    bases: Vec<Basis>,
    facets: Vec<Vec<i64>>,
}

impl Polytope {
    fn build(rank: usize) -> Self {
        let columns: Vec<Vec<i64>> = (0..8).map(|i| vertex_features(i, rank)).collect();
        let bases = subsets(8, rank)
            .into_iter()
            .filter_map(|cols| {
                // Matrix with the chosen vertex feature vectors as columns.
                let m: Vec<Vec<i64>> = (0..rank)
                    .map(|r| cols.iter().map(|&c| columns[c][r]).collect())
                    .collect();
                invert(&to_rational(&m)).map(|inverse| Basis {
                    columns: cols,
                    inverse,
                })
            })
            .collect();
        let mut facets = BTreeSet::new();
        for cols in subsets(8, rank - 1) {
            let rows: Vec<Vec<i64>> = cols.iter().map(|&c| columns[c].clone()).collect();
            let Some(y) = null_vector(&to_rational(&rows), rank) else {
                continue;
            };
            let y = primitive(&y);
            let values: Vec<i64> = columns
                .iter()
                .map(|v| v.iter().zip(&y).map(|(a, b)| a * b).sum())
                .collect();
            if values.iter().all(|&v| v >= 0) {
                facets.insert(y);
            } else if values.iter().all(|&v| v <= 0) {
                facets.insert(y.iter().map(|v| -v).collect());
            }
        }
        Polytope {
            bases,
            facets: facets.into_iter().collect(),
        }
    }

    fn get(rank: usize) -> &'static Polytope {
        static SIX: OnceLock<Polytope> = OnceLock::new();
        static SEVEN: OnceLock<Polytope> = OnceLock::new();
        match rank {
            6 => SIX.get_or_init(|| Polytope::build(6)),
            7 => SEVEN.get_or_init(|| Polytope::build(7)),
            _ => unreachable!("rank is 6 or 7"),
        }
    }
}

/// Facets of the marginal polytope in moment coordinates, obtained by
/// exact vertex-to-facet conversion (hyperplanes through `rank - 1`
/// affinely independent vertices that support all eight).
pub fn marginal_polytope_facets(with_a_a_prime: bool) -> &'static [Vec<i64>] {
    &Polytope::get(if with_a_a_prime { 7 } else { 6 }).facets
}

/// Decides whether nonnegative atoms reproducing `m` exist.
///
/// Enumerates every basic solution of the moment equations. When feasible,
/// the witness is the barycentre of the distinct basic feasible solutions.
/// When infeasible, the certificate is the most violated facet of the
/// marginal polytope.
pub fn joint_exists(m: &MarginalSystem) -> Result<JointVerdict> {
    m.validate()?;
    let moments = m.moments();
    let poly = Polytope::get(m.rank());
    let mut vertices: BTreeSet<Vec<Rational>> = BTreeSet::new();
    for basis in &poly.bases {
        let x: Vec<Rational> = basis
            .inverse
            .iter()
            .map(|row| row.iter().zip(&moments).map(|(a, b)| a * b).sum())
            .collect();
        if x.iter().all(|v: &Rational| !v.is_negative()) {
            let mut atoms = vec![Rational::zero(); 8];
            for (c, v) in basis.columns.iter().zip(x) {
                atoms[*c] = v;
            }
            vertices.insert(atoms);
        }
    }
    if !vertices.is_empty() {
        let count = Rational::from_integer(vertices.len().into());
        let mut sum: [Rational; 8] = std::array::from_fn(|_| Rational::zero());
        for v in &vertices {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        let atoms = sum.map(|s| s / &count);
        return Ok(JointVerdict::Feasible {
            witness: JointAtomVector::new(atoms)?,
        });
    }
    let certificate = poly
        .facets
        .iter()
        .map(|f| Certificate::new(f.clone(), &moments))
        .filter(|c| c.value.is_negative())
        .min_by(|x, y| x.value.cmp(&y.value))
        .expect("a point outside a polytope violates one of its facets");
    Ok(JointVerdict::Infeasible { certificate })
}

/// One inequality of the Bell-type family and its exact slack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InequalityValue {
    pub name: &'static str,
    pub inequality: String,
    pub coefficients: Vec<i64>,
    #[serde(serialize_with = "serialize_rational")]
    pub slack: Rational,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BellReport {
    pub pass: bool,
    pub inequalities: Vec<InequalityValue>,
}

impl BellReport {
    pub fn violated(&self) -> impl Iterator<Item = &InequalityValue> {
        self.inequalities.iter().filter(|i| !i.holds)
    }
}

/// The facet table over `(1, E(A), E(B), E(A'), E(AB), E(A'B), E(AA'))`.
///
/// Cell rows are `4 p(cell) >= 0`. The four `bell` rows are
/// `|E(AB) - E(A'B)| <= 1 - E(AA')` and `|E(AB) + E(A'B)| <= 1 + E(AA')`.
/// Without the `(A, A')` table only the eight `AB`/`A'B` cell rows remain
/// (a path `A - B - A'` always has a joint distribution).
pub const BELL_TABLE: [(&str, [i64; 7]); 16] = [
    ("cell AB ++", [1, 1, 1, 0, 1, 0, 0]),
    ("cell AB +-", [1, 1, -1, 0, -1, 0, 0]),
    ("cell AB -+", [1, -1, 1, 0, -1, 0, 0]),
    ("cell AB --", [1, -1, -1, 0, 1, 0, 0]),
    ("cell A'B ++", [1, 0, 1, 1, 0, 1, 0]),
    ("cell A'B +-", [1, 0, -1, 1, 0, -1, 0]),
    ("cell A'B -+", [1, 0, 1, -1, 0, -1, 0]),
    ("cell A'B --", [1, 0, -1, -1, 0, 1, 0]),
    ("cell AA' ++", [1, 1, 0, 1, 0, 0, 1]),
    ("cell AA' +-", [1, 1, 0, -1, 0, 0, -1]),
    ("cell AA' -+", [1, -1, 0, 1, 0, 0, -1]),
    ("cell AA' --", [1, -1, 0, -1, 0, 0, 1]),
    ("bell 1", [1, 0, 0, 0, -1, 1, -1]),
    ("bell 2", [1, 0, 0, 0, 1, -1, -1]),
    ("bell 3", [1, 0, 0, 0, -1, -1, 1]),
    ("bell 4", [1, 0, 0, 0, 1, 1, 1]),
];

/// Rows of [`BELL_TABLE`] that apply to systems with or without `(A, A')`.
pub fn bell_family(with_a_a_prime: bool) -> Vec<(&'static str, Vec<i64>)> {
    BELL_TABLE
        .iter()
        .filter(|(_, c)| with_a_a_prime || c[6] == 0)
        .map(|(n, c)| {
            (
                *n,
                if with_a_a_prime {
                    c.to_vec()
                } else {
                    c[..6].to_vec()
                },
            )
        })
        .collect()
}

/// Evaluates the Bell-type family exactly.
pub fn bell_check(m: &MarginalSystem) -> BellReport {
    let moments = m.moments();
    let inequalities: Vec<InequalityValue> = bell_family(m.a_a_prime.is_some())
        .into_iter()
        .map(|(name, coefficients)| {
            let slack = evaluate(&coefficients, &moments);
            InequalityValue {
                name,
                inequality: format_inequality(&coefficients),
                holds: !slack.is_negative(),
                slack,
                coefficients,
            }
        })
        .collect();
    BellReport {
        pass: inequalities.iter().all(|i| i.holds),
        inequalities,
    }
}

/// Seeded random marginal system, for cross-checking. Half are induced by
/// random atoms with small integer weights; half are drawn from a grid of
/// moments (multiples of 1/6) with every pair table nonnegative. The
/// `(A, A')` table is present three times in four.
pub fn random_system(seed: u64, index: u64) -> MarginalSystem {
    let s = Stream::new(seed).substream(index);
    let with_aa = s.below_at(0, 4) != 0;
    let mut cursor = 2;
    if s.below_at(1, 2) == 0 {
        loop {
            let weights: Vec<u64> = (0..8).map(|i| s.below_at(cursor + i, 7)).collect();
            cursor += 8;
            let total: u64 = weights.iter().sum();
            if total == 0 {
                continue;
            }
            let atoms = std::array::from_fn(|i| Rational::new(weights[i].into(), total.into()));
            return JointAtomVector(atoms).marginals(with_aa);
        }
    }
    loop {
        let mut draw = || {
            let v = s.below_at(cursor, 13) as i64 - 6;
            cursor += 1;
            Rational::new(v.into(), 6.into())
        };
        let (a, b, c, x, y, z) = (draw(), draw(), draw(), draw(), draw(), draw());
        if let Ok(m) = MarginalSystem::from_moments(a, b, c, x, y, with_aa.then_some(z)) {
            return m;
        }
    }
}
