//! Command-line front end for the `kollektiv` laboratory.
//!
//! Every invocation resolves to one [`ExperimentConfig`]: the JSON document
//! from `--config` (a config or a previously emitted manifest) with flag
//! values written over it. The resolved config is echoed into the manifest,
//! so re-running a manifest reproduces its result files byte for byte.

pub mod config;
pub mod error;
pub mod experiments;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub use config::{Command, ExperimentConfig, Format};
pub use error::CliError;
pub use experiments::{execute, Output};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "kollektiv",
    version,
    about = "Frequency-probability experiments"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment config or run manifest (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sample size: trials, samples per bit, or the last checkpoint.
    #[arg(long, global = true)]
    n: Option<u64>,
    /// Result file; `json` or `csv` select a format and print to stdout.
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    /// No progress line on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Run the experiment described by --config.
    Run,
    /// Frequency trace and stabilization verdict of one sequence.
    Stabilize(SequenceArgs),
    /// Conditional frequencies and combinability of a pair.
    Combine(SequenceArgs),
    /// Bit transmission through a dependent pair.
    Transmit(TransmitArgs),
    /// One EPR setting pair: correlation, factorization defect, coarse-graining.
    Epr(EprArgs),
    /// CHSH estimate over the four setting pairs.
    Chsh(ChshArgs),
    /// Joint-distribution existence for three +-1 observables.
    FineRastall(FineRastallArgs),
    /// Trajectory model and its factorization defect.
    Trajectory(TrajectoryArgs),
}

#[derive(Debug, Args)]
struct SequenceArgs {
    /// Generator spec as JSON, or a bare kind name.
    #[arg(long)]
    generator: Option<String>,
    /// `dyadic:a:b` or a comma-separated list.
    #[arg(long)]
    checkpoints: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct TransmitArgs {
    #[arg(long)]
    p_u: Option<f64>,
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long)]
    p2: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    repetitions: Option<u64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct EprArgs {
    /// `local-sign`, `qm-singlet`, or a model as JSON.
    #[arg(long)]
    model: Option<String>,
    /// `a,a',b,b'` in radians.
    #[arg(long, allow_hyphen_values = true)]
    angles: Option<String>,
    /// Setting indices `i,j`.
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    checkpoints: Option<String>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct ChshArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    angles: Option<String>,
}

#[derive(Debug, Args)]
struct FineRastallArgs {
    /// Marginal system JSON file; `-` reads stdin.
    input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ObservableArg {
    TimeAvg,
    Endpoint,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct TrajectoryArgs {
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long, value_enum)]
    observable: Option<ObservableArg>,
    #[arg(long)]
    shared_lambda: Option<bool>,
    #[arg(long)]
    shared_field: Option<bool>,
}

fn parse_floats<const K: usize>(text: &str, key: &str) -> Result<[f64; K], CliError> {
    let values: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::config(format!("--{key} {text:?}: {e}"), Some(key)))?;
    values.try_into().map_err(|_| {
        CliError::config(
            format!("--{key} expects {K} comma-separated numbers"),
            Some(key),
        )
    })
}

fn json_or_string(text: &str) -> Result<Value, CliError> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("invalid JSON {text:?}: {e}"), None))
    } else {
        Ok(Value::String(text.to_string()))
    }
}

/// Flag values as config keys, in the order they override the config.
fn overrides(cli: &Cli) -> Result<Vec<(&'static str, Value)>, CliError> {
    let g = &cli.global;
    let mut o: Vec<(&'static str, Value)> = Vec::new();
    if let Some(seed) = g.seed {
        o.push(("seed", seed.into()));
    }
    if let Some(n) = g.n {
        o.push(("n", n.into()));
    }
    match g.out.as_deref() {
        Some("json") => o.push(("format", "json".into())),
        Some("csv") => o.push(("format", "csv".into())),
        Some(path) => o.push(("out", path.into())),
        None => {}
    }
    if let Some(f) = g.format {
        let name = match f {
            FormatArg::Json => "json",
            FormatArg::Csv => "csv",
        };
        o.push(("format", name.into()));
    }
    match &cli.command {
        Sub::Run => {}
        Sub::Stabilize(a) | Sub::Combine(a) => {
            if let Some(spec) = &a.generator {
                let v = json_or_string(spec)?;
                let v = if v.is_string() {
                    serde_json::json!({ "kind": v })
                } else {
                    v
                };
                o.push(("generator", v));
            }
            if let Some(c) = &a.checkpoints {
                o.push(("checkpoints", c.as_str().into()));
            }
            if let Some(e) = a.epsilon {
                o.push(("epsilon", e.into()));
            }
            if let Some(w) = a.window {
                o.push(("window", w.into()));
            }
        }
        Sub::Transmit(a) => {
            for (key, v) in [
                ("p_u", a.p_u),
                ("p1", a.p1),
                ("p2", a.p2),
                ("threshold", a.threshold),
            ] {
                if let Some(v) = v {
                    o.push((key, v.into()));
                }
            }
            if let Some(b) = a.bits {
                o.push(("bits", b.into()));
            }
            if let Some(r) = a.repetitions {
                o.push(("repetitions", r.into()));
            }
        }
        Sub::Epr(a) => {
            if let Some(m) = &a.model {
                o.push(("model", json_or_string(m)?));
            }
            if let Some(angles) = &a.angles {
                o.push((
                    "angles",
                    serde_json::json!(parse_floats::<4>(angles, "angles")?),
                ));
            }
            if let Some(p) = &a.pair {
                let indices: Vec<u64> = p
                    .split(',')
                    .map(|x| x.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::config(format!("--pair {p:?}: {e}"), Some("pair")))?;
                o.push(("pair", serde_json::json!(indices)));
            }
            if let Some(c) = &a.checkpoints {
                o.push(("checkpoints", c.as_str().into()));
            }
        }
        Sub::Chsh(a) => {
            if let Some(m) = &a.model {
                o.push(("model", json_or_string(m)?));
            }
            if let Some(angles) = &a.angles {
                o.push((
                    "angles",
                    serde_json::json!(parse_floats::<4>(angles, "angles")?),
                ));
            }
        }
        Sub::FineRastall(a) => {
            if let Some(input) = &a.input {
                o.push(("input", serde_json::json!(input)));
            }
        }
        Sub::Trajectory(a) => {
            for (key, v) in [("kappa", a.kappa), ("h", a.h), ("t_end", a.t_end)] {
                if let Some(v) = v {
                    o.push((key, v.into()));
                }
            }
            if let Some(obs) = a.observable {
                o.push((
                    "observable",
                    serde_json::to_value(obs).expect("enum serializes"),
                ));
            }
            if let Some(s) = a.shared_lambda {
                o.push(("shared_lambda", s.into()));
            }
            if let Some(s) = a.shared_field {
                o.push(("shared_field", s.into()));
            }
        }
    }
    Ok(o)
}

fn sub_name(sub: &Sub) -> Option<&'static str> {
    Some(match sub {
        Sub::Run => return None,
        Sub::Stabilize(_) => "stabilize",
        Sub::Combine(_) => "combine",
        Sub::Transmit(_) => "transmit",
        Sub::Epr(_) => "epr",
        Sub::Chsh(_) => "chsh",
        Sub::FineRastall(_) => "fine-rastall",
        Sub::Trajectory(_) => "trajectory",
    })
}

fn read_input(path: &Path) -> Result<String, CliError> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::Read::read_to_string(&mut std::io::stdin(), &mut s)
            .map_err(|e| CliError::config(format!("reading stdin: {e}"), None))?;
        return Ok(s);
    }
    fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("reading {}: {e}", path.display()), None))
}

/// Loads a config document; a manifest contributes its config echo.
pub fn load_config_value(path: &Path) -> Result<Value, CliError> {
    let text = read_input(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::config(format!("{} is not valid JSON: {e}", path.display()), None)
    })?;
    match value {
        Value::Object(mut obj) if obj.contains_key("manifest_version") => obj
            .remove("config")
            .ok_or_else(|| CliError::config("manifest has no config echo", Some("config"))),
        other => Ok(other),
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut value = match &cli.global.config {
        Some(path) => load_config_value(path)?,
        None => match sub_name(&cli.command) {
            Some(name) => serde_json::json!({ "cmd": name }),
            None => return Err(CliError::config("`run` needs --config", Some("config"))),
        },
    };
    let Value::Object(obj) = &mut value else {
        return Err(CliError::config("config must be a JSON object", None));
    };
    if let Some(name) = sub_name(&cli.command) {
        match obj.get("cmd") {
            Some(Value::String(cmd)) if cmd != name => {
                return Err(CliError::config(
                    format!("config is for {cmd:?} but the subcommand is {name:?}"),
                    Some("cmd"),
                ))
            }
            _ => {
                obj.insert("cmd".into(), name.into());
            }
        }
    }
    for (key, v) in overrides(cli)? {
        if key == "input" {
            obj.remove("system");
        }
        obj.insert(key.into(), v);
    }
    inline_input(obj)?;
    ExperimentConfig::from_value(value)
}

/// Replaces a fine-rastall `input` path by the system it names, so the
/// config echo is self-contained.
fn inline_input(obj: &mut Map<String, Value>) -> Result<(), CliError> {
    if obj.get("cmd").and_then(Value::as_str) != Some("fine-rastall") {
        return Ok(());
    }
    let Some(input) = obj.remove("input") else {
        return Ok(());
    };
    if obj.contains_key("system") {
        return Err(CliError::config(
            "give either \"system\" or \"input\", not both",
            Some("input"),
        ));
    }
    let path: PathBuf = config::from_value(input, "input")?;
    let text = read_input(&path)?;
    let system = kollektiv::fine_rastall::MarginalSystem::from_json(&text)?;
    obj.insert(
        "system".into(),
        serde_json::to_value(system).expect("systems serialize"),
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub duration_seconds: f64,
    pub outputs: Vec<OutputDigest>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let ctx = path.display().to_string();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(&ctx, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(&ctx, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| CliError::io(&ctx, e))?;
    tmp.persist(path).map_err(|e| CliError::io(&ctx, e.error))?;
    Ok(())
}

pub fn render(output: &Output, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&output.json).expect("results serialize");
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => output.csv.clone().into_bytes(),
    }
}

/// Runs one experiment; returns the manifest when a result file was written.
pub fn run(config: &ExperimentConfig, quiet: bool) -> Result<Option<RunManifest>, CliError> {
    let start = Instant::now();
    let output = execute(&config.command, config.seed)?;
    let bytes = render(&output, config.format);
    let Some(out) = &config.out else {
        match std::io::stdout().write_all(&bytes) {
            // A closed pipe (`| head`) is the reader's choice, not a failure.
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                return Err(CliError::io("stdout", e))
            }
            _ => return Ok(None),
        }
    };
    write_atomic(out, &bytes)?;
    let manifest = RunManifest {
        manifest_version: 1,
        tool: "kollektiv".into(),
        version: VERSION.into(),
        config: config.to_value(),
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec![OutputDigest {
            path: out.clone(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        }],
    };
    let mpath = manifest_path(out);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
    text.push('\n');
    write_atomic(&mpath, text.as_bytes())?;
    if !quiet {
        eprintln!("wrote {} and {}", out.display(), mpath.display());
    }
    Ok(Some(manifest))
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(text) = std::env::var("KOLLEKTIV_THREADS") else {
        return Ok(());
    };
    let threads: usize = text.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        CliError::config(
            format!("KOLLEKTIV_THREADS must be a positive integer, got {text:?}"),
            None,
        )
    })?;
    // The global pool can only be built once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

/// Parses `args`, runs, and returns the process exit status. Errors are
/// reported as JSON on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::config(e.to_string().trim_end().to_string(), None);
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    let result = configure_threads()
        .and_then(|_| resolve(&cli))
        .and_then(|config| run(&config, cli.global.quiet));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
