use std::sync::Arc;

use kollektiv::combining::{ConditionalTrace, DependentPair, TransmissionParams};
use kollektiv::epr::{coarse_grain, factorization_defect, run_epr, SettingPair, Wing};
use kollektiv::fine_rastall::{bell_check, joint_exists, JointVerdict};
use kollektiv::fmt::sig17;
use kollektiv::gallery::{
    appendix1_velocity, energy_map, Bernoulli, Categorical, CompanionSet, ConditionalBernoulli,
    DyadicBlocks, EvenPositions, Periodic,
};
use kollektiv::rng::Stream;
use kollektiv::trajectory::{trajectory_factorization_defect, TrajectoryExperiment};
use kollektiv::{
    assess_combinability, conditional_trace, detect_stabilization, frequency_trace, pair,
    transmit_bits, Label, LabelSource, PairedSequence, StabilizationParams,
};
use serde_json::{json, Value};

use crate::config::{
    effective_checkpoints, from_value, Appendix1Observable, Appendix1Params, BernoulliParams,
    CategoricalParams, ChshConfig, CombineConfig, Command, Component, ConditionalParams,
    ConstantParams, EprConfig, Example31Params, FineRastallConfig, GeneratorSpec, PatternParams,
    ProductParams, StabilizeConfig, TrajectoryConfig, TransmitConfig,
};
use crate::error::CliError;

pub type Source = Arc<dyn LabelSource>;

/// A result document plus its tabular form.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub json: Value,
    pub csv: String,
}

pub fn execute(command: &Command, seed: u64) -> Result<Output, CliError> {
    match command {
        Command::Stabilize(c) => stabilize(c, seed),
        Command::Combine(c) => combine(c, seed),
        Command::Transmit(c) => transmit(c, seed),
        Command::Epr(c) => epr(c, seed),
        Command::Chsh(c) => chsh(c, seed),
        Command::FineRastall(c) => fine_rastall(c),
        Command::Trajectory(c) => trajectory(c, seed),
    }
}

fn labels(pattern: &[u32]) -> Vec<Label> {
    pattern.iter().map(|&l| Label(l)).collect()
}

fn pattern_alphabet(p: &PatternParams) -> usize {
    p.alphabet
        .unwrap_or_else(|| p.pattern.iter().max().map_or(1, |&m| m as usize + 1))
}

/// Builds a single label sequence. `seed` feeds the random kinds directly.
pub fn build_source(spec: &GeneratorSpec, seed: u64) -> Result<Source, CliError> {
    let params = spec.params.clone();
    let ctx = format!("generator {:?} params", spec.kind);
    let source: Source = match spec.kind.as_str() {
        "bernoulli" => {
            let p: BernoulliParams = from_value(params, &ctx)?;
            Arc::new(Bernoulli::new(p.p, seed)?)
        }
        "categorical" => {
            let p: CategoricalParams = from_value(params, &ctx)?;
            Arc::new(Categorical::new(&p.weights, seed)?)
        }
        "periodic" => {
            let p: PatternParams = from_value(params, &ctx)?;
            Arc::new(Periodic::new(pattern_alphabet(&p), labels(&p.pattern))?)
        }
        "constant" => {
            let p: ConstantParams = from_value(params, &ctx)?;
            let alphabet = p.alphabet.unwrap_or(p.label as usize + 1);
            Arc::new(Periodic::constant(alphabet, Label(p.label))?)
        }
        "dyadic_blocks" => {
            let p: PatternParams = from_value(params, &ctx)?;
            Arc::new(DyadicBlocks::new(pattern_alphabet(&p), labels(&p.pattern))?)
        }
        "appendix1" => {
            let p: Appendix1Params = from_value(params, &ctx)?;
            let v = appendix1_velocity(p.kind, p.schedule);
            match p.observable {
                Appendix1Observable::Velocity => Arc::new(v),
                Appendix1Observable::Energy => Arc::new(energy_map(v, v.velocities())?),
            }
        }
        "example31" => {
            let p: Example31Params = from_value(params, &ctx)?;
            let companion = CompanionSet::new(p.index_set()?);
            match p.component {
                Component::X => Arc::new(EvenPositions),
                Component::Y => Arc::new(companion),
                Component::Joint => Arc::new(pair(EvenPositions, companion)),
            }
        }
        other => {
            return Err(CliError::config(
                format!(
                    "unknown generator kind {other:?} (expected bernoulli, categorical, periodic, constant, \
                     dyadic_blocks, appendix1 or example31)"
                ),
                Some("kind"),
            ))
        }
    };
    Ok(source)
}

/// Builds a pair `(x, y)`. Component seeds are substreams of `seed`.
pub fn build_pair(
    spec: &GeneratorSpec,
    seed: u64,
) -> Result<PairedSequence<Source, Source>, CliError> {
    let root = Stream::new(seed);
    let (sx, sy) = (root.substream(1).key(), root.substream(2).key());
    let params = spec.params.clone();
    let ctx = format!("generator {:?} params", spec.kind);
    match spec.kind.as_str() {
        "example31" => {
            let p: Example31Params = from_value(params, &ctx)?;
            if p.component != Component::Joint {
                return Err(CliError::config("a pair needs component \"joint\"", Some("component")));
            }
            let x: Source = Arc::new(EvenPositions);
            let y: Source = Arc::new(CompanionSet::new(p.index_set()?));
            Ok(pair(x, y))
        }
        "product" => {
            let p: ProductParams = from_value(params, &ctx)?;
            Ok(pair(build_source(&p.x, sx)?, build_source(&p.y, sy)?))
        }
        "conditional_bernoulli" => {
            let p: ConditionalParams = from_value(params, &ctx)?;
            let x = build_source(&p.x, sx)?;
            let y: Source = Arc::new(ConditionalBernoulli::new(x.clone(), p.probs, sy)?);
            Ok(pair(x, y))
        }
        other => Err(CliError::config(
            format!("unknown pair kind {other:?} (expected example31, product or conditional_bernoulli)"),
            Some("kind"),
        )),
    }
}

fn stabilization_params(epsilon: f64, window: usize) -> Result<StabilizationParams, CliError> {
    Ok(StabilizationParams::new(epsilon, window)?)
}

fn stabilize(c: &StabilizeConfig, seed: u64) -> Result<Output, CliError> {
    let params = stabilization_params(c.epsilon, c.window)?;
    let cps = effective_checkpoints(&c.checkpoints, c.n)?;
    let source = build_source(&c.generator, seed)?;
    let trace = frequency_trace(&source, &cps)?;
    let verdict = detect_stabilization(&trace, params)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).expect("writing to memory");
    let json = json!({
        "cmd": "stabilize",
        "alphabet": trace.alphabet,
        "verdict": verdict.status,
        "tail_spread": verdict.tail_spread,
        "max_spread": verdict.max_spread(),
        "estimate": verdict.estimate,
        "trace": trace.points,
    });
    Ok(Output {
        json,
        csv: String::from_utf8(csv).expect("ascii csv"),
    })
}

fn combine(c: &CombineConfig, seed: u64) -> Result<Output, CliError> {
    let params = stabilization_params(c.epsilon, c.window)?;
    let cps = effective_checkpoints(&c.checkpoints, c.n)?;
    let z = build_pair(&c.generator, seed)?;
    let trace: ConditionalTrace = conditional_trace(&z, &cps)?;
    let verdict = assess_combinability(&z, &cps, params)?;
    let last = trace.last();
    let conditional: Vec<Vec<Option<f64>>> = (0..trace.alphabet_x)
        .map(|a| {
            (0..trace.alphabet_y)
                .map(|b| last.freq_cond(a, b))
                .collect()
        })
        .collect();
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).expect("writing to memory");
    let json = json!({
        "cmd": "combine",
        "alphabet_x": trace.alphabet_x,
        "alphabet_y": trace.alphabet_y,
        "combinable": verdict.combinable,
        "independent": verdict.independent,
        "max_dependence": verdict.max_dependence,
        "per_alpha_status": verdict.per_alpha_status,
        "conditional": conditional,
        "trace": trace.points,
    });
    Ok(Output {
        json,
        csv: String::from_utf8(csv).expect("ascii csv"),
    })
}

fn bits(b: &[bool]) -> String {
    b.iter().map(|&x| if x { '1' } else { '0' }).collect()
}

fn transmit(c: &TransmitConfig, seed: u64) -> Result<Output, CliError> {
    if c.repetitions == 0 {
        return Err(CliError::config(
            "repetitions must be at least 1",
            Some("repetitions"),
        ));
    }
    let pair = DependentPair {
        p_u_plus: c.p_u,
        p_v_given_plus: c.p1,
        p_v_given_minus: c.p2,
    };
    let root = Stream::new(seed);
    let mut runs = Vec::new();
    let mut csv = String::from("repetition,seed,bit,sent,decoded,frequency\n");
    let mut total = 0;
    for r in 0..c.repetitions {
        let rep_seed = root.substream(r).key();
        let report = transmit_bits(
            pair,
            TransmissionParams {
                bit_count: c.bits,
                samples_per_bit: c.n,
                threshold: c.threshold,
                seed: rep_seed,
            },
        )?;
        for (i, ((s, d), f)) in report
            .sent
            .iter()
            .zip(&report.decoded)
            .zip(&report.frequencies)
            .enumerate()
        {
            csv.push_str(&format!(
                "{r},{rep_seed},{i},{},{},{}\n",
                *s as u8,
                *d as u8,
                sig17(*f)
            ));
        }
        total += report.errors;
        runs.push(json!({
            "seed": rep_seed,
            "sent": bits(&report.sent),
            "decoded": bits(&report.decoded),
            "errors": report.errors,
        }));
    }
    let json = json!({
        "cmd": "transmit",
        "bits": c.bits,
        "samples_per_bit": c.n,
        "repetitions": c.repetitions,
        "total_errors": total,
        "runs": runs,
    });
    Ok(Output { json, csv })
}

fn epr(c: &EprConfig, seed: u64) -> Result<Output, CliError> {
    let model = c.model.build(c.angles)?;
    if c.pair.iter().any(|&i| i > 1) {
        return Err(CliError::config(
            "setting indices must be 0 or 1",
            Some("pair"),
        ));
    }
    let pair = SettingPair::new(c.pair[0], c.pair[1]);
    let cps = match &c.checkpoints {
        None => vec![c.n],
        Some(cps) if cps.last() > c.n => {
            return Err(CliError::config(
                format!("last checkpoint {} exceeds n = {}", cps.last(), c.n),
                Some("checkpoints"),
            ))
        }
        Some(cps) => cps.to_vec(),
    };
    let run = run_epr(&model, pair, c.n, seed)?;
    let space = run.space;
    let defects = factorization_defect(&run.x_a_lambda(), &run.x_b_lambda(), space.hidden, &cps)?;
    let defect: Vec<Value> = defects
        .iter()
        .map(|d| json!({"N": d.n, "defect": d.defect(), "max": d.max}))
        .collect();
    let coarse = if model.is_deterministic() {
        let mut conserved = true;
        for (wing, setting) in [(Wing::First, pair.first), (Wing::Second, pair.second)] {
            let micro = frequency_trace(&run.omega_lambda_labels(wing), &cps)?;
            let coarse = coarse_grain(&micro, &model.preimage(wing, setting)?)?;
            let direct = frequency_trace(&run.outcome_lambda_labels(wing), &cps)?;
            conserved &= coarse == direct;
        }
        json!({"checked": true, "conserved": conserved})
    } else {
        json!({"checked": false})
    };
    let mut csv = String::from("j,lambda,omega_a,omega_b,A,B\n");
    for (j, t) in run.trials.iter().enumerate() {
        csv.push_str(&format!(
            "{j},{},{},{},{},{}\n",
            t.lambda,
            t.omega_a,
            t.omega_b,
            t.a.value(),
            t.b.value()
        ));
    }
    let json = json!({
        "cmd": "epr",
        "model": model.kind,
        "angles": c.angles,
        "pair": c.pair,
        "hidden": space.hidden,
        "apparatus": space.apparatus,
        "N": run.correlation.n,
        "E": run.correlation.e,
        "stderr": run.correlation.stderr,
        "exact_E": model.exact_correlation(pair),
        "factorization_defect": defect,
        "coarse_graining": coarse,
    });
    Ok(Output { json, csv })
}

fn chsh(c: &ChshConfig, seed: u64) -> Result<Output, CliError> {
    let model = c.model.build(c.angles)?;
    let report = kollektiv::epr::chsh(&model, c.n, seed)?;
    let mut json = serde_json::to_value(report).expect("report serializes");
    json["cmd"] = "chsh".into();
    json["model"] = serde_json::to_value(&model.kind).expect("model serializes");
    json["angles"] = json!(c.angles);
    json["exact_S"] = json!(model.exact_chsh());
    let csv = format!(
        "{}\n{}\n",
        kollektiv::epr::CorrelationReport::CSV_HEADER,
        report.csv_row()
    );
    Ok(Output { json, csv })
}

fn fine_rastall(c: &FineRastallConfig) -> Result<Output, CliError> {
    let m = c
        .system
        .as_ref()
        .ok_or_else(|| CliError::config("fine-rastall needs a marginal system", Some("system")))?;
    let verdict = joint_exists(m)?;
    let bell = bell_check(m);
    let mut json = serde_json::to_value(&verdict).expect("verdict serializes");
    json["cmd"] = "fine-rastall".into();
    json["rank"] = m.rank().into();
    json["bell"] = serde_json::to_value(&bell).expect("report serializes");
    json["bell_agrees"] = (bell.pass == verdict.is_feasible()).into();
    let mut csv = String::from("name,inequality,slack,holds\n");
    for q in &bell.inequalities {
        csv.push_str(&format!(
            "{},\"{}\",{},{}\n",
            q.name, q.inequality, q.slack, q.holds
        ));
    }
    if let JointVerdict::Infeasible { certificate } = &verdict {
        csv.push_str(&format!(
            "certificate,\"{}\",{},false\n",
            certificate.inequality, certificate.value
        ));
    }
    Ok(Output { json, csv })
}

fn trajectory(c: &TrajectoryConfig, seed: u64) -> Result<Output, CliError> {
    let params = c.params();
    let exp = TrajectoryExperiment::new(params, c.observable.into());
    let report = trajectory_factorization_defect(&exp, c.n, seed)?;
    let mut json = serde_json::to_value(&report).expect("report serializes");
    json["cmd"] = "trajectory".into();
    json["observable"] = serde_json::to_value(c.observable).expect("observable serializes");
    json["params"] = serde_json::to_value(params).expect("params serialize");
    let mut csv = String::from("A,B,p_joint,p_A,p_B\n");
    let sign = ["+1", "-1"];
    for i in 0..2 {
        for j in 0..2 {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                sign[i],
                sign[j],
                sig17(report.joint[i][j]),
                sig17(report.marginal_a[i]),
                sig17(report.marginal_b[j])
            ));
        }
    }
    Ok(Output { json, csv })
}
