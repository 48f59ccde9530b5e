//! Command-line front end: run protocols, verify invariants, dump Bell
//! tables, emit JSON reports.
//!
//! Report JSON is written by hand so every number carries 17 significant
//! digits and identical invocations produce byte-identical files; parsing
//! goes through `serde_json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gates::{self, BellOutcome, PhaseConvention};
use crate::network::{self, ClassicalMessage, PartyId, Payload, Transcript};
use crate::oracle;
use crate::protocols::{
    self, ExecutionMode, InputSource, ProtocolConfig, ProtocolKind, ProtocolReport,
};
use crate::qudit_core::{Amp, SiteSpec, StateVector, DEFAULT_MAX_DIM};

#[derive(Parser)]
#[command(name = "qunet", about = "Multiparty qudit teleportation simulator", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a protocol and report per-branch probabilities and fidelities.
    Run(RunArgs),
    /// Run the invariant suites, or replay a transcript.
    Verify(VerifyArgs),
    /// Write the generalized Bell basis for one dimension as a state file.
    BellTable(BellTableArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// One of: many-to-one, one-to-many, many-to-many, two-way.
    #[arg(long)]
    protocol: String,
    /// Sender digit dimensions, comma separated (e.g. 2,3).
    #[arg(long)]
    dims: String,
    /// Receiver digit dimensions (many-to-many only).
    #[arg(long)]
    recv_dims: Option<String>,
    /// Seed for input generation and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// One of: enumerate, sample, branch=<comma tuple>.
    #[arg(long, default_value = "enumerate")]
    mode: String,
    /// Input state file, one per sender (defaults to seeded random states).
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the transcript as JSON lines here (sample and branch modes).
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Replay a transcript file and check it reproduces its final states.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args)]
pub struct BellTableArgs {
    /// Bell basis dimension, 2..=16.
    #[arg(long)]
    dim: usize,
    /// Output path.
    #[arg(long)]
    output: PathBuf,
}

/// Validated run options.
pub struct RunOptions {
    pub config: ProtocolConfig,
    pub json_path: Option<PathBuf>,
    pub transcript_path: Option<PathBuf>,
}

impl RunOptions {
    pub fn from_args(args: &RunArgs) -> Result<RunOptions> {
        let kind = ProtocolKind::from_label(&args.protocol)?;
        let dims = parse_dims(&args.dims)?;
        let recv_dims = args.recv_dims.as_deref().map(parse_dims).transpose()?;
        let mode = parse_mode(&args.mode, args.seed)?;
        let inputs = if args.input.is_empty() {
            InputSource::Seeded(args.seed.unwrap_or(0))
        } else {
            let mut states = Vec::with_capacity(args.input.len());
            for path in &args.input {
                let text = fs::read_to_string(path)?;
                states.push(StateVector::from_text(&text)?);
            }
            InputSource::Explicit(states)
        };
        let config = ProtocolConfig {
            kind,
            dims,
            recv_dims,
            inputs,
            mode,
            max_dim: max_dim_from_env()?,
        };
        if args.transcript.is_some() && matches!(config.mode, ExecutionMode::Enumerate) {
            return Err(Error::ConfigInvalid(
                "transcript export needs sample or branch mode".into(),
            ));
        }
        Ok(RunOptions {
            config,
            json_path: args.json.clone(),
            transcript_path: args.transcript.clone(),
        })
    }
}

/// Capacity cap, overridable through `QUNET_MAX_DIM`.
pub fn max_dim_from_env() -> Result<usize> {
    match std::env::var("QUNET_MAX_DIM") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::ConfigInvalid(format!("QUNET_MAX_DIM is not a number: {v}"))),
        Err(_) => Ok(DEFAULT_MAX_DIM),
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::ConfigInvalid(format!("bad dimension list entry {t:?}")))
        })
        .collect()
}

fn parse_mode(s: &str, seed: Option<u64>) -> Result<ExecutionMode> {
    match s {
        "enumerate" => Ok(ExecutionMode::Enumerate),
        "sample" => Ok(ExecutionMode::Sample { seed: seed.unwrap_or(0) }),
        other => {
            if let Some(tuple) = other.strip_prefix("branch=") {
                let outcomes = tuple
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<usize>().map_err(|_| {
                            Error::ConfigInvalid(format!("bad branch tuple entry {t:?}"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Ok(ExecutionMode::Branch(outcomes))
            } else {
                Err(Error::ConfigInvalid(format!("unknown mode {other:?}")))
            }
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through this path too.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => RunOptions::from_args(&args).and_then(|o| cmd_run(&o)),
        Command::Verify(args) => cmd_verify(&args),
        Command::BellTable(args) => cmd_bell_table(args.dim, &args.output).map(|()| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::CapacityExceeded { .. } | Error::BranchExplosion { .. } => 3,
        Error::ConfigInvalid(_)
        | Error::Parse(_)
        | Error::BadDimension { .. }
        | Error::DimensionMismatch { .. }
        | Error::NotNormalizable { .. } => 2,
        _ => 1,
    }
}

/// Run a protocol; exit 0 when every enumerated branch meets the fidelity
/// bound (enumerate) or the trajectory completes (sample/branch).
pub fn cmd_run(options: &RunOptions) -> Result<i32> {
    let report = protocols::run(&options.config)?;
    print!("{}", report_to_text(&report));
    if let Some(path) = &options.json_path {
        fs::write(path, report_to_json(&report))?;
    }
    if let Some(path) = &options.transcript_path {
        fs::write(path, transcript_to_jsonl(&report, &options.config)?)?;
    }
    let ok = match options.config.mode {
        ExecutionMode::Enumerate => report.min_fidelity >= 1.0 - 1e-9,
        _ => true,
    };
    Ok(if ok { 0 } else { 1 })
}

/// Write all `d^2` Bell basis states, `(m, n)` lexicographic, as blank-line
/// separated state-file blocks.
pub fn cmd_bell_table(dim: usize, output: &Path) -> Result<()> {
    if !(2..=16).contains(&dim) {
        return Err(Error::BadDimension { dim });
    }
    let mut out = String::new();
    for m in 0..dim {
        for n in 0..dim {
            let state = gates::bell_state(dim, BellOutcome { m, n })?;
            out.push_str(&state.to_text());
            out.push('\n');
        }
    }
    fs::write(output, out)?;
    Ok(())
}

/// Run the invariant suites (or a transcript replay), printing one line per
/// property; exits 1 naming the first failure.
pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    if let Some(path) = &args.replay {
        let text = fs::read_to_string(path)?;
        return match replay_check(&text) {
            Ok(()) => {
                println!("ok transcript-replay");
                Ok(0)
            }
            Err(e) => {
                eprintln!("FAIL transcript-replay: {e}");
                Ok(1)
            }
        };
    }
    for (name, check) in verify_properties() {
        match check() {
            Ok(()) => println!("ok {name}"),
            Err(e) => {
                eprintln!("FAIL {name}: {e}");
                return Ok(1);
            }
        }
    }
    Ok(0)
}

type Property = (&'static str, Box<dyn Fn() -> Result<()>>);

fn fail(name: &str, detail: String) -> Error {
    Error::ConfigInvalid(format!("{name}: {detail}"))
}

/// The verify suite. `QUNET_FAULT_INJECT` deliberately corrupts the first
/// property as a negative control for the harness itself.
pub fn verify_properties() -> Vec<Property> {
    let mut props: Vec<Property> = Vec::new();

    props.push((
        "bell-orthonormality",
        Box::new(|| {
            let inject = std::env::var("QUNET_FAULT_INJECT").is_ok();
            for d in 2..=5usize {
                let mut states = Vec::new();
                for m in 0..d {
                    for n in 0..d {
                        states.push(gates::bell_state(d, BellOutcome { m, n })?);
                    }
                }
                for (i, a) in states.iter().enumerate() {
                    for (j, b) in states.iter().enumerate() {
                        let mut ip = a.inner_product(b)?;
                        if inject && i == 0 && j == 0 {
                            ip += Amp::new(1e-3, 0.0);
                        }
                        let want = if i == j { 1.0 } else { 0.0 };
                        if (ip - Amp::new(want, 0.0)).norm() >= 1e-12 {
                            return Err(fail(
                                "bell-orthonormality",
                                format!("d={d} gram entry ({i},{j}) off by {:.3e}", (ip - Amp::new(want, 0.0)).norm()),
                            ));
                        }
                    }
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "bell-uniformity",
        Box::new(|| {
            for d in 2..=5usize {
                let pair = gates::resource_state(d, 2)?;
                let branches = gates::bell_project_reduced(&pair, 0, 1)?;
                if branches.len() != d * d {
                    return Err(fail("bell-uniformity", format!("d={d} has {} branches", branches.len())));
                }
                for (o, p, _) in &branches {
                    if (p - 1.0 / (d * d) as f64).abs() >= 1e-12 {
                        return Err(fail(
                            "bell-uniformity",
                            format!("d={d} outcome ({},{}) probability {p}", o.m, o.n),
                        ));
                    }
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "operator-unitarity",
        Box::new(|| {
            for dims in verify_factorizations() {
                let factors = SiteSpec::new(&dims)?;
                let d = factors.total_dim();
                for i in 1..=dims.len() {
                    for op in [gates::spread_op(&factors, i)?, gates::receiver_spread_op(&factors, i)?] {
                        let dev = op.unitarity_deviation();
                        if dev >= 1e-10 {
                            return Err(fail(
                                "operator-unitarity",
                                format!("spread {i} of {dims:?} deviates {dev:.3e}"),
                            ));
                        }
                    }
                }
                for m in 0..d {
                    for n in [0, 1, d - 1] {
                        let op = gates::alice_correction(d, BellOutcome { m, n }, PhaseConvention::pinned())?;
                        let dev = op.unitarity_deviation();
                        if dev >= 1e-10 {
                            return Err(fail(
                                "operator-unitarity",
                                format!("correction ({m},{n}) of {dims:?} deviates {dev:.3e}"),
                            ));
                        }
                    }
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "projector-completeness",
        Box::new(|| {
            for dims in verify_factorizations() {
                let factors = SiteSpec::new(&dims)?;
                for i in 1..=dims.len() {
                    let family = gates::receiver_projectors(&factors, i)?;
                    gates::LocalOperator::validate_projector_family(&family)?;
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "deterministic-teleportation",
        Box::new(|| {
            for (kind, dims) in verify_protocol_matrix() {
                let cfg = ProtocolConfig::new(kind, &dims, InputSource::Seeded(13), ExecutionMode::Enumerate);
                let report = protocols::run(&cfg)?;
                if report.min_fidelity < 1.0 - 1e-9 {
                    return Err(fail(
                        "deterministic-teleportation",
                        format!("{} {:?} min fidelity {}", kind.label(), dims, report.min_fidelity),
                    ));
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "probability-conservation",
        Box::new(|| {
            for (kind, dims) in verify_protocol_matrix() {
                let cfg = ProtocolConfig::new(kind, &dims, InputSource::Seeded(13), ExecutionMode::Enumerate);
                let report = protocols::run(&cfg)?;
                if (report.probability_sum - 1.0).abs() >= 1e-9 {
                    return Err(fail(
                        "probability-conservation",
                        format!("{} {:?} sums to {}", kind.label(), dims, report.probability_sum),
                    ));
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "oracle-agreement",
        Box::new(|| {
            for (kind, dims) in [
                (ProtocolKind::ManyToOne, vec![2usize, 2]),
                (ProtocolKind::OneToMany, vec![2, 2]),
                (ProtocolKind::ManyToMany, vec![2, 2]),
                (ProtocolKind::TwoWay, vec![2, 2]),
            ] {
                let cfg = ProtocolConfig::new(kind, &dims, InputSource::Seeded(29), ExecutionMode::Enumerate);
                let a = oracle::enumerate_branches(&cfg)?;
                let b = protocols::run(&cfg)?;
                if a.len() != b.branches.len() {
                    return Err(fail("oracle-agreement", format!("{} branch counts differ", kind.label())));
                }
                for (x, y) in a.iter().zip(&b.branches) {
                    if x.outcome != y.outcome
                        || (x.probability - y.probability).abs() >= 1e-12
                        || (x.fidelity - y.fidelity).abs() >= 1e-12
                    {
                        return Err(fail(
                            "oracle-agreement",
                            format!("{} branch {:?} disagrees", kind.label(), y.outcome),
                        ));
                    }
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "phase-pinning",
        Box::new(|| {
            let report = oracle::pin_phases()?;
            if report.convention != PhaseConvention::pinned() {
                return Err(fail("phase-pinning", "survivor differs from committed constants".into()));
            }
            Ok(())
        }),
    ));

    props.push((
        "dense-crosscheck",
        Box::new(|| {
            for dev in [crosscheck_protocol_branch(16, 3, 5)?, crosscheck_protocol_branch(4, 1, 2)?] {
                if dev >= 1e-12 {
                    return Err(fail("dense-crosscheck", format!("deviation {dev:.3e}")));
                }
            }
            Ok(())
        }),
    ));

    props.push((
        "seed-reproducibility",
        Box::new(|| {
            let cfg = ProtocolConfig::new(
                ProtocolKind::ManyToOne,
                &[2, 3],
                InputSource::Seeded(7),
                ExecutionMode::Sample { seed: 7 },
            );
            let a = report_to_json(&protocols::run(&cfg)?);
            let b = report_to_json(&protocols::run(&cfg)?);
            if a != b {
                return Err(fail("seed-reproducibility", "reports differ between runs".into()));
            }
            Ok(())
        }),
    ));

    props
}

fn verify_factorizations() -> Vec<Vec<usize>> {
    vec![
        vec![2, 2],
        vec![2, 3],
        vec![3, 2],
        vec![2, 2, 2],
        vec![2, 4],
        vec![3, 3],
        vec![2, 3, 4],
        vec![4, 6],
        vec![2, 12],
    ]
}

fn verify_protocol_matrix() -> Vec<(ProtocolKind, Vec<usize>)> {
    vec![
        (ProtocolKind::ManyToOne, vec![2, 2]),
        (ProtocolKind::ManyToOne, vec![2, 3]),
        (ProtocolKind::ManyToOne, vec![3, 2]),
        (ProtocolKind::OneToMany, vec![2, 2]),
        (ProtocolKind::OneToMany, vec![2, 3]),
        (ProtocolKind::ManyToMany, vec![2, 3]),
        (ProtocolKind::TwoWay, vec![2, 3]),
    ]
}

/// One full many-to-one branch, single sender, applied through both operator
/// routes: spread, Bell projector, receiver correction.
pub fn crosscheck_protocol_branch(d: usize, m: usize, n: usize) -> Result<f64> {
    use rand::SeedableRng;
    let factors = SiteSpec::new(&[d])?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(d as u64);
    let input = protocols::random_state(d, &mut rng)?;
    let state = input.tensor(&gates::resource_state(d, 2)?)?;
    let ops = vec![
        (vec![0usize], gates::spread_op(&factors, 1)?),
        (vec![0, 1], bell_projector_op(d, m, n)?),
        (vec![2], gates::alice_correction(d, BellOutcome { m, n }, PhaseConvention::pinned())?),
    ];
    oracle::dense_crosscheck(&state, &ops)
}

fn bell_projector_op(d: usize, m: usize, n: usize) -> Result<gates::LocalOperator> {
    let psi = gates::bell_state(d, BellOutcome { m, n })?;
    let dd = d * d;
    let mut mat = vec![Amp::new(0.0, 0.0); dd * dd];
    for i in 0..dd {
        for j in 0..dd {
            mat[i * dd + j] = psi.amps()[i] * psi.amps()[j].conj();
        }
    }
    Ok(gates::LocalOperator::dense_projector(dd, mat))
}

// ---------------------------------------------------------------------------
// Serialization.

/// Format with 17 significant digits; round-trips f64 exactly.
fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn usize_list(v: &[usize]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn state_to_json(s: &StateVector) -> String {
    let parts: Vec<String> = s
        .amps()
        .iter()
        .map(|a| format!("[{},{}]", fmt_f64(a.re), fmt_f64(a.im)))
        .collect();
    format!("[{}]", parts.join(","))
}

fn payload_to_json(p: &Payload) -> String {
    match p {
        Payload::Bell { m, n } => format!("{{\"type\":\"bell\",\"m\":{m},\"n\":{n}}}"),
        Payload::Projector { outcome, digits } => format!(
            "{{\"type\":\"projector\",\"outcome\":{},\"digits\":{}}}",
            outcome,
            usize_list(digits)
        ),
    }
}

fn message_to_json(msg: &ClassicalMessage) -> String {
    let to: Vec<String> = msg.to.iter().map(|p| json_string(&p.label())).collect();
    format!(
        "{{\"from\":{},\"to\":[{}],\"round\":{},\"payload\":{}}}",
        json_string(&msg.from.label()),
        to.join(","),
        msg.round,
        payload_to_json(&msg.payload)
    )
}

/// The report JSON document; see `schema/report.schema.json`.
pub fn report_to_json(report: &ProtocolReport) -> String {
    let mut out = String::from("{\n");
    out.push_str(&format!("  \"protocol\": {},\n", json_string(report.protocol.label())));
    out.push_str(&format!("  \"dims\": {},\n", usize_list(&report.dims)));
    if let Some(recv) = &report.recv_dims {
        out.push_str(&format!("  \"recv_dims\": {},\n", usize_list(recv)));
    }
    if let Some(seed) = report.seed {
        out.push_str(&format!("  \"seed\": {seed},\n"));
    }
    out.push_str(&format!("  \"mode\": {},\n", json_string(&report.mode_label)));
    out.push_str(&format!(
        "  \"resources\": {{\"shared_qudits\":{},\"xor_ancillas\":{}}},\n",
        report.resources.shared_qudits, report.resources.xor_ancillas
    ));
    out.push_str("  \"branches\": [\n");
    for (i, b) in report.branches.iter().enumerate() {
        let fids: Vec<String> = b.receiver_fidelities.iter().map(|&f| fmt_f64(f)).collect();
        out.push_str(&format!(
            "    {{\"outcome\":{},\"probability\":{},\"fidelity\":{},\"receiver_fidelities\":[{}]}}{}\n",
            usize_list(&b.outcome),
            fmt_f64(b.probability),
            fmt_f64(b.fidelity),
            fids.join(","),
            if i + 1 < report.branches.len() { "," } else { "" }
        ));
    }
    out.push_str("  ],\n");
    out.push_str("  \"transcript\": [\n");
    let msgs = report.transcript.messages();
    for (i, m) in msgs.iter().enumerate() {
        out.push_str(&format!(
            "    {}{}\n",
            message_to_json(m),
            if i + 1 < msgs.len() { "," } else { "" }
        ));
    }
    out.push_str("  ],\n");
    out.push_str(&format!("  \"min_fidelity\": {},\n", fmt_f64(report.min_fidelity)));
    out.push_str(&format!("  \"probability_sum\": {}", fmt_f64(report.probability_sum)));
    if let Some(states) = &report.final_states {
        let parts: Vec<String> = states.iter().map(state_to_json).collect();
        out.push_str(&format!(",\n  \"final_states\": [{}]\n", parts.join(",")));
    } else {
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

fn report_to_text(report: &ProtocolReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "protocol {} dims {:?}{} mode {}\n",
        report.protocol.label(),
        report.dims,
        report
            .recv_dims
            .as_ref()
            .map(|r| format!(" recv {r:?}"))
            .unwrap_or_default(),
        report.mode_label
    ));
    out.push_str(&format!(
        "resources: {} shared qudits, {} xor ancillas\n",
        report.resources.shared_qudits, report.resources.xor_ancillas
    ));
    out.push_str(&format!(
        "branches: {}  probability sum {:.12}  min fidelity {:.12}\n",
        report.branches.len(),
        report.probability_sum,
        report.min_fidelity
    ));
    out.push_str(&format!("messages: {}\n", report.transcript.messages().len()));
    out
}

/// Transcript export: a header line carrying the configuration, the resolved
/// inputs, and the final states, then one message per line.
pub fn transcript_to_jsonl(report: &ProtocolReport, config: &ProtocolConfig) -> Result<String> {
    let inputs = config.resolve_inputs()?;
    let final_states = report
        .final_states
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid("transcript export needs final states".into()))?;
    let input_parts: Vec<String> = inputs.iter().map(state_to_json).collect();
    let state_parts: Vec<String> = final_states.iter().map(state_to_json).collect();
    let mut out = format!(
        "{{\"protocol\":{},\"dims\":{},{}\"mode\":{},\"inputs\":[{}],\"final_states\":[{}]}}\n",
        json_string(report.protocol.label()),
        usize_list(&report.dims),
        report
            .recv_dims
            .as_ref()
            .map(|r| format!("\"recv_dims\":{},", usize_list(r)))
            .unwrap_or_default(),
        json_string(&report.mode_label),
        input_parts.join(","),
        state_parts.join(",")
    );
    for m in report.transcript.messages() {
        out.push_str(&message_to_json(m));
        out.push('\n');
    }
    Ok(out)
}

fn value_usize(v: &serde_json::Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(|x| x.as_u64())
        .map(|x| x as usize)
        .ok_or_else(|| Error::Parse(format!("transcript field {key} missing or not an integer")))
}

fn parse_amp_list(v: &serde_json::Value) -> Result<Vec<Amp>> {
    let arr = v.as_array().ok_or_else(|| Error::Parse("state is not an array".into()))?;
    arr.iter()
        .map(|pair| {
            let p = pair.as_array().ok_or_else(|| Error::Parse("amplitude is not a pair".into()))?;
            if p.len() != 2 {
                return Err(Error::Parse("amplitude is not a pair".into()));
            }
            Ok(Amp::new(
                p[0].as_f64().ok_or_else(|| Error::Parse("bad real part".into()))?,
                p[1].as_f64().ok_or_else(|| Error::Parse("bad imaginary part".into()))?,
            ))
        })
        .collect()
}

fn value_state(v: &serde_json::Value, dim: usize) -> Result<StateVector> {
    let amps = parse_amp_list(v)?;
    if amps.len() != dim {
        return Err(Error::Parse(format!("state has {} amplitudes, expected {dim}", amps.len())));
    }
    let sites = SiteSpec::new(&[dim])?;
    StateVector::make_state(sites, amps)
}

/// Parse a transcript JSONL document and check that replaying it against its
/// recorded configuration reproduces the recorded final states to 1e-12.
pub fn replay_check(text: &str) -> Result<()> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: serde_json::Value = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Parse("empty transcript".into()))?,
    )
    .map_err(|e| Error::Parse(e.to_string()))?;
    let kind = ProtocolKind::from_label(
        header
            .get("protocol")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse("transcript has no protocol".into()))?,
    )?;
    let dims: Vec<usize> = header
        .get("dims")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Parse("transcript has no dims".into()))?
        .iter()
        .map(|x| x.as_u64().map(|v| v as usize).ok_or_else(|| Error::Parse("bad dim".into())))
        .collect::<Result<_>>()?;
    let recv_dims: Option<Vec<usize>> = match header.get("recv_dims") {
        Some(v) => Some(
            v.as_array()
                .ok_or_else(|| Error::Parse("bad recv_dims".into()))?
                .iter()
                .map(|x| x.as_u64().map(|v| v as usize).ok_or_else(|| Error::Parse("bad dim".into())))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let inputs_json = header
        .get("inputs")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Parse("transcript has no inputs".into()))?;
    let inputs: Vec<StateVector> = inputs_json
        .iter()
        .zip(&dims)
        .map(|(v, &d)| value_state(v, d))
        .collect::<Result<_>>()?;
    let finals_json = header
        .get("final_states")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Parse("transcript has no final states".into()))?;

    let mut transcript = Transcript::new();
    for line in lines {
        let msg: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
        let from = PartyId::from_label(
            msg.get("from").and_then(|v| v.as_str()).ok_or_else(|| Error::Parse("no from".into()))?,
        )?;
        let to: Vec<PartyId> = msg
            .get("to")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Parse("no to".into()))?
            .iter()
            .map(|x| {
                PartyId::from_label(x.as_str().ok_or_else(|| Error::Parse("bad recipient".into()))?)
            })
            .collect::<Result<_>>()?;
        let round = value_usize(&msg, "round")?;
        let payload_json =
            msg.get("payload").ok_or_else(|| Error::Parse("no payload".into()))?;
        let payload = match payload_json.get("type").and_then(|v| v.as_str()) {
            Some("bell") => Payload::Bell {
                m: value_usize(payload_json, "m")?,
                n: value_usize(payload_json, "n")?,
            },
            Some("projector") => Payload::Projector {
                outcome: value_usize(payload_json, "outcome")?,
                digits: payload_json
                    .get("digits")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| Error::Parse("no digits".into()))?
                    .iter()
                    .map(|x| {
                        x.as_u64().map(|v| v as usize).ok_or_else(|| Error::Parse("bad digit".into()))
                    })
                    .collect::<Result<_>>()?,
            },
            _ => return Err(Error::Parse("unknown payload type".into())),
        };
        transcript.deliver(ClassicalMessage { from, to, round, payload })?;
    }

    let config = ProtocolConfig {
        kind,
        dims,
        recv_dims,
        inputs: InputSource::Explicit(inputs),
        mode: ExecutionMode::Enumerate, // replaced by replay
        max_dim: max_dim_from_env()?,
    };
    let replayed = network::replay(&transcript, &config)?;
    if replayed.len() != finals_json.len() {
        return Err(Error::TranscriptMismatch(format!(
            "replay produced {} states, transcript records {}",
            replayed.len(),
            finals_json.len()
        )));
    }
    for (got, want_json) in replayed.iter().zip(finals_json) {
        let want = parse_amp_list(want_json)?;
        if want.len() != got.amps().len() {
            return Err(Error::TranscriptMismatch(format!(
                "replayed state has {} amplitudes, transcript records {}",
                got.amps().len(),
                want.len()
            )));
        }
        for (a, b) in got.amps().iter().zip(&want) {
            if (a - b).norm() >= 1e-12 {
                return Err(Error::TranscriptMismatch(format!(
                    "replayed amplitude {a} differs from recorded {b}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_and_mode_parsing() {
        assert_eq!(parse_dims("2,3").unwrap(), vec![2, 3]);
        assert!(parse_dims("2,x").is_err());
        assert!(matches!(parse_mode("enumerate", None).unwrap(), ExecutionMode::Enumerate));
        assert!(matches!(
            parse_mode("sample", Some(5)).unwrap(),
            ExecutionMode::Sample { seed: 5 }
        ));
        match parse_mode("branch=0,1,2,3", None).unwrap() {
            ExecutionMode::Branch(t) => assert_eq!(t, vec![0, 1, 2, 3]),
            _ => panic!("expected branch mode"),
        }
        assert!(parse_mode("guess", None).is_err());
    }

    #[test]
    fn json_numbers_carry_17_digits() {
        let s = fmt_f64(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        let back: f64 = s.parse().unwrap();
        assert_eq!(back, 0.1);
    }

    #[test]
    fn report_json_round_trips_as_json() {
        let cfg = ProtocolConfig::new(
            ProtocolKind::ManyToOne,
            &[2, 2],
            InputSource::Seeded(3),
            ExecutionMode::Enumerate,
        );
        let report = protocols::run(&cfg).unwrap();
        let text = report_to_json(&report);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["protocol"], "many-to-one");
        assert_eq!(v["branches"].as_array().unwrap().len(), 256);
        assert!(v["min_fidelity"].as_f64().unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn bell_table_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        assert!(matches!(cmd_bell_table(17, &path), Err(Error::BadDimension { dim: 17 })));
        cmd_bell_table(2, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let blocks: Vec<&str> = text.split("\n\n").filter(|b| !b.trim().is_empty()).collect();
        assert_eq!(blocks.len(), 4);
        let first = StateVector::from_text(blocks[0]).unwrap();
        let h = 1.0 / 2.0_f64.sqrt();
        assert!((first.amps()[0] - Amp::new(h, 0.0)).norm() < 1e-15);
        assert!((first.amps()[3] - Amp::new(h, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn transcript_replay_round_trip() {
        let cfg = ProtocolConfig {
            kind: ProtocolKind::OneToMany,
            dims: vec![2, 2],
            recv_dims: None,
            inputs: InputSource::Seeded(6),
            mode: ExecutionMode::Sample { seed: 8 },
            max_dim: DEFAULT_MAX_DIM,
        };
        let report = protocols::run(&cfg).unwrap();
        let jsonl = transcript_to_jsonl(&report, &cfg).unwrap();
        replay_check(&jsonl).unwrap();
    }

    #[test]
    fn tampered_final_state_rejected() {
        let cfg = ProtocolConfig {
            kind: ProtocolKind::ManyToOne,
            dims: vec![2],
            recv_dims: None,
            inputs: InputSource::Seeded(1),
            mode: ExecutionMode::Sample { seed: 1 },
            max_dim: DEFAULT_MAX_DIM,
        };
        let report = protocols::run(&cfg).unwrap();
        let jsonl = transcript_to_jsonl(&report, &cfg).unwrap();
        let mut lines = jsonl.lines();
        let mut header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        header["final_states"][0][0][0] = serde_json::json!(0.123);
        let tampered: String = std::iter::once(header.to_string())
            .chain(lines.map(str::to_owned))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(replay_check(&tampered), Err(Error::TranscriptMismatch(_))));
    }

    #[test]
    fn impossible_recorded_outcome_rejected() {
        // Force a receiver outcome that only exists under the original
        // receiver radix; replaying against swapped receiver dims makes the
        // recorded outcome a zero-probability branch.
        let cfg = ProtocolConfig {
            kind: ProtocolKind::ManyToMany,
            dims: vec![2, 3],
            recv_dims: Some(vec![2, 3]),
            inputs: InputSource::Seeded(3),
            mode: ExecutionMode::Branch(vec![0, 0, 0, 0, 2, 0]),
            max_dim: DEFAULT_MAX_DIM,
        };
        let report = protocols::run(&cfg).unwrap();
        let jsonl = transcript_to_jsonl(&report, &cfg).unwrap();
        let swapped = jsonl.replacen("\"recv_dims\":[2,3]", "\"recv_dims\":[3,2]", 1);
        assert_ne!(swapped, jsonl);
        assert!(matches!(replay_check(&swapped), Err(Error::TranscriptMismatch(_))));
    }
}
