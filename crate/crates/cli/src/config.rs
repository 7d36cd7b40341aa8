use std::path::PathBuf;

use kollektiv::epr::{Angles, EprModel, ModelKind};
use kollektiv::fine_rastall::MarginalSystem;
use kollektiv::gallery::{IndexSet, PhaseSchedule, VelocityKind};
use kollektiv::trajectory::{FieldParams, InitialLambda, ObservableKind, TrajectoryParams};
use kollektiv::{Checkpoints, StabilizationParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// A complete, self-describing experiment: one JSON object whose `"cmd"`
/// selects the subcommand and whose remaining keys configure it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    Stabilize(StabilizeConfig),
    Combine(CombineConfig),
    Transmit(TransmitConfig),
    Epr(EprConfig),
    Chsh(ChshConfig),
    FineRastall(FineRastallConfig),
    Trajectory(TrajectoryConfig),
}

pub const COMMANDS: [&str; 7] = [
    "stabilize",
    "combine",
    "transmit",
    "epr",
    "chsh",
    "fine-rastall",
    "trajectory",
];

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Stabilize(_) => "stabilize",
            Command::Combine(_) => "combine",
            Command::Transmit(_) => "transmit",
            Command::Epr(_) => "epr",
            Command::Chsh(_) => "chsh",
            Command::FineRastall(_) => "fine-rastall",
            Command::Trajectory(_) => "trajectory",
        }
    }
}

fn dyadic_10_20() -> Checkpoints {
    Checkpoints::dyadic(10, 20).expect("static range")
}

fn default_epsilon() -> f64 {
    StabilizationParams::default().epsilon
}

fn default_window() -> usize {
    StabilizationParams::default().window
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

/// `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: String,
    #[serde(default = "empty_object")]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizeConfig {
    pub generator: GeneratorSpec,
    #[serde(default = "dyadic_10_20")]
    pub checkpoints: Checkpoints,
    /// Extends or truncates the checkpoints so that the last one is `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombineConfig {
    pub generator: GeneratorSpec,
    #[serde(default = "dyadic_10_20")]
    pub checkpoints: Checkpoints,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitConfig {
    #[serde(default = "TransmitConfig::default_p_u")]
    pub p_u: f64,
    #[serde(default = "TransmitConfig::default_p1")]
    pub p1: f64,
    #[serde(default = "TransmitConfig::default_p2")]
    pub p2: f64,
    #[serde(default = "TransmitConfig::default_threshold")]
    pub threshold: f64,
    #[serde(default = "TransmitConfig::default_bits")]
    pub bits: usize,
    /// Samples per bit.
    #[serde(default = "TransmitConfig::default_n")]
    pub n: usize,
    #[serde(default = "TransmitConfig::default_repetitions")]
    pub repetitions: u64,
}

impl TransmitConfig {
    fn default_p_u() -> f64 {
        0.5
    }
    fn default_p1() -> f64 {
        0.9
    }
    fn default_p2() -> f64 {
        0.1
    }
    fn default_threshold() -> f64 {
        0.5
    }
    fn default_bits() -> usize {
        64
    }
    fn default_n() -> usize {
        10_000
    }
    fn default_repetitions() -> u64 {
        1
    }
}

/// A model name (`local-sign`, `qm-singlet`) or a full model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Name(String),
    Kind(ModelKind),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Name("local-sign".into())
    }
}

impl ModelSpec {
    pub fn build(&self, angles: [f64; 4]) -> Result<EprModel, CliError> {
        let kind = match self {
            ModelSpec::Name(name) => match name.as_str() {
                "local-sign" | "local-deterministic" | "LOCAL_DETERMINISTIC" => {
                    ModelKind::LocalDeterministic(Default::default())
                }
                "qm-singlet" | "QM_SINGLET" => ModelKind::QmSinglet,
                other => {
                    return Err(CliError::config(
                        format!("unknown model {other:?} (expected local-sign or qm-singlet)"),
                        Some("model"),
                    ))
                }
            },
            ModelSpec::Kind(kind) => kind.clone(),
        };
        let [a, a_prime, b, b_prime] = angles;
        EprModel::new(kind, Angles::new(a, a_prime, b, b_prime)).map_err(CliError::from_input)
    }
}

fn chsh_angles() -> [f64; 4] {
    let a = Angles::chsh_optimal();
    [a.a, a.a_prime, a.b, a.b_prime]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EprConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "chsh_angles")]
    pub angles: [f64; 4],
    /// Setting indices `[i, j]`: 0 for `a`/`b`, 1 for `a'`/`b'`.
    #[serde(default)]
    pub pair: [usize; 2],
    #[serde(default = "EprConfig::default_n")]
    pub n: u64,
    /// Where the factorization defect is reported; defaults to `n` alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Checkpoints>,
}

impl EprConfig {
    fn default_n() -> u64 {
        100_000
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChshConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "chsh_angles")]
    pub angles: [f64; 4],
    /// Trials per setting pair.
    #[serde(default = "ChshConfig::default_n")]
    pub n: u64,
}

impl ChshConfig {
    fn default_n() -> u64 {
        1_000_000
    }
}

/// Exactly one of `system` (inline) and `input` (path to a JSON file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineRastallConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<MarginalSystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableName {
    TimeAvg,
    Endpoint,
}

impl From<ObservableName> for ObservableKind {
    fn from(o: ObservableName) -> Self {
        match o {
            ObservableName::TimeAvg => ObservableKind::TimeAvgSign,
            ObservableName::Endpoint => ObservableKind::EndpointSign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    #[serde(default = "TrajectoryConfig::default_n")]
    pub n: u64,
    /// Sets `kappa` on both wings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default = "TrajectoryConfig::default_h")]
    pub h: f64,
    #[serde(default = "TrajectoryConfig::default_t_end")]
    pub t_end: f64,
    #[serde(default = "TrajectoryConfig::default_observable")]
    pub observable: ObservableName,
    #[serde(default = "TrajectoryConfig::default_shared_lambda")]
    pub shared_lambda: bool,
    #[serde(default)]
    pub shared_field: bool,
    #[serde(default)]
    pub initial_lambda: InitialLambda,
    #[serde(default)]
    pub wing_a: FieldParams,
    #[serde(default)]
    pub wing_b: FieldParams,
}

impl TrajectoryConfig {
    fn default_n() -> u64 {
        100_000
    }
    fn default_h() -> f64 {
        TrajectoryParams::default().h
    }
    fn default_t_end() -> f64 {
        TrajectoryParams::default().t_end
    }
    fn default_observable() -> ObservableName {
        ObservableName::TimeAvg
    }
    fn default_shared_lambda() -> bool {
        true
    }

    pub fn params(&self) -> TrajectoryParams {
        let mut p = TrajectoryParams {
            wing_a: self.wing_a,
            wing_b: self.wing_b,
            t_end: self.t_end,
            h: self.h,
            initial_lambda: self.initial_lambda,
            shared_lambda: self.shared_lambda,
            shared_field: self.shared_field,
        };
        if let Some(k) = self.kappa {
            p = p.with_kappa(k);
        }
        p
    }
}

/// Parameters of the generator kinds addressable from a config.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct BernoulliParams {
    pub p: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct CategoricalParams {
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PatternParams {
    pub pattern: Vec<u32>,
    pub alphabet: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ConstantParams {
    #[serde(default)]
    pub label: u32,
    pub alphabet: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub(crate) enum Appendix1Observable {
    #[default]
    Velocity,
    Energy,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Appendix1Params {
    #[serde(default = "Appendix1Params::default_kind")]
    pub kind: VelocityKind,
    #[serde(default = "Appendix1Params::default_schedule")]
    pub schedule: PhaseSchedule,
    #[serde(default)]
    pub observable: Appendix1Observable,
}

impl Appendix1Params {
    fn default_kind() -> VelocityKind {
        VelocityKind::TwoValue
    }
    fn default_schedule() -> PhaseSchedule {
        PhaseSchedule::DyadicAlternating
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum Component {
    X,
    Y,
    #[default]
    Joint,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Example31Params {
    #[serde(default)]
    pub pattern: Option<Vec<bool>>,
    #[serde(default)]
    pub component: Component,
}

impl Example31Params {
    pub fn index_set(&self) -> Result<IndexSet, CliError> {
        match &self.pattern {
            None => Ok(IndexSet::default()),
            Some(p) => IndexSet::new(p.clone()).map_err(CliError::from_input),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ProductParams {
    pub x: GeneratorSpec,
    pub y: GeneratorSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ConditionalParams {
    pub x: GeneratorSpec,
    /// `p(y = 1 | x = alpha)` for each label `alpha` of `x`.
    pub probs: Vec<f64>,
}

/// Deserializes `value` into `T`, reporting unknown keys by name.
pub(crate) fn from_value<T: DeserializeOwned>(value: Value, context: &str) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| {
        let message = e.to_string();
        let key = unknown_field(&message);
        let message = if context.is_empty() {
            message
        } else {
            format!("{context}: {message}")
        };
        CliError::config(message, key.as_deref())
    })
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("config is not valid JSON: {e}"), None))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let Value::Object(mut obj) = value else {
            return Err(CliError::config("config must be a JSON object", None));
        };
        let cmd = match obj.remove("cmd") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(CliError::config("\"cmd\" must be a string", Some("cmd"))),
            None => return Err(CliError::config("config has no \"cmd\"", Some("cmd"))),
        };
        let seed = match obj.remove("seed") {
            None => 0,
            Some(v) => from_value::<u64>(v, "seed")?,
        };
        let out = match obj.remove("out") {
            None | Some(Value::Null) => None,
            Some(v) => Some(from_value::<PathBuf>(v, "out")?),
        };
        let format = match obj.remove("format") {
            None => Format::default(),
            Some(v) => from_value::<Format>(v, "format")?,
        };
        let rest = Value::Object(obj);
        let command = match cmd.as_str() {
            "stabilize" => Command::Stabilize(from_value(rest, "")?),
            "combine" => Command::Combine(from_value(rest, "")?),
            "transmit" => Command::Transmit(from_value(rest, "")?),
            "epr" => Command::Epr(from_value(rest, "")?),
            "chsh" => Command::Chsh(from_value(rest, "")?),
            "fine-rastall" => Command::FineRastall(from_value(rest, "")?),
            "trajectory" => Command::Trajectory(from_value(rest, "")?),
            other => {
                return Err(CliError::config(
                    format!(
                        "unknown cmd {other:?} (expected one of {})",
                        COMMANDS.join(", ")
                    ),
                    Some("cmd"),
                ))
            }
        };
        Ok(ExperimentConfig {
            seed,
            out,
            format,
            command,
        })
    }

    pub fn to_value(&self) -> Value {
        let body = match &self.command {
            Command::Stabilize(c) => serde_json::to_value(c),
            Command::Combine(c) => serde_json::to_value(c),
            Command::Transmit(c) => serde_json::to_value(c),
            Command::Epr(c) => serde_json::to_value(c),
            Command::Chsh(c) => serde_json::to_value(c),
            Command::FineRastall(c) => serde_json::to_value(c),
            Command::Trajectory(c) => serde_json::to_value(c),
        }
        .expect("config types serialize");
        let mut obj = Map::new();
        obj.insert("cmd".into(), self.command.name().into());
        obj.insert("seed".into(), self.seed.into());
        if let Some(out) = &self.out {
            obj.insert(
                "out".into(),
                serde_json::to_value(out).expect("paths serialize"),
            );
        }
        obj.insert(
            "format".into(),
            serde_json::to_value(self.format).expect("format serializes"),
        );
        if let Value::Object(fields) = body {
            obj.extend(fields);
        }
        Value::Object(obj)
    }
}

/// Checkpoints restricted to those below `n`, followed by `n`.
pub(crate) fn effective_checkpoints(
    cps: &Checkpoints,
    n: Option<u64>,
) -> Result<Vec<u64>, CliError> {
    let Some(n) = n else {
        return Ok(cps.to_vec());
    };
    if n == 0 {
        return Err(CliError::config("n must be at least 1", Some("n")));
    }
    let mut points: Vec<u64> = cps.iter().copied().filter(|&c| c < n).collect();
    points.push(n);
    Ok(points)
}
