//! `zkstarctl` subcommands. Exit codes: 0 success, 1 domain error, 2 usage error.

use crate::report::{detection_quality_report, summarize, write_report};
use crate::stream::{inject_attack, read_csv, write_csv, AttackKind, AttackSpec, SyntheticSpec};
use crate::sweep::{run_sweep, SweepConfig};
use crate::HarnessError;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use zkstar_core::wire::{IngestAck, IngestRequest, ProofKind, Sample, SessionConfig, SessionOpened};
use zkstar_prover::server::AppState;
use zkstar_prover::{ProverSession, BUILTIN_REFERENCE};
use zkstar_regulator::server::VerifierState;
use zkstar_regulator::{connect, request_and_verify, UtilityClient};

#[derive(Debug, Parser)]
#[command(name = "zkstarctl", version, about = "Drive the prover and verifier services and run detection experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate TC and SC keys for a model and write them to a directory.
    Setup(SetupArgs),
    /// Run the prover service.
    ServeProver(ServeProverArgs),
    /// Run the regulator endpoint that receives and verifies window summaries.
    ServeVerifier(ServeVerifierArgs),
    /// Stream a CSV file or a synthetic series into a prover session.
    Replay(ReplayArgs),
    /// Inject an attack into a CSV stream.
    Attack(AttackArgs),
    /// Ask a utility for the proofs of one window.
    RequestProof(RequestProofArgs),
    /// Verify one window against a utility and print the verdict.
    Verify(VerifyArgs),
    /// Run a D × PSF sweep and write its report directory.
    Sweep(SweepArgs),
    /// Summarize a report directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SessionFlags {
    /// Session config JSON; the flags below are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weights file, or builtin:reference.
    #[arg(long, default_value = BUILTIN_REFERENCE)]
    model: String,
    /// Intervals per detection window.
    #[arg(short = 'W', long = "window", default_value_t = 16)]
    w: usize,
    /// Timestamps per TC interval.
    #[arg(short = 'D', long = "interval", default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 12)]
    psf: u8,
    /// UCL significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    nonce_seed: Option<u64>,
    #[arg(long, default_value = "stream-0")]
    stream_id: String,
}

impl SessionFlags {
    fn resolve(&self) -> Result<SessionConfig, HarnessError> {
        if let Some(path) = &self.config {
            return read_json(path);
        }
        let mut c = SessionConfig::new(&self.model, self.w, self.d, self.psf);
        c.ucl_alpha = self.alpha;
        c.nonce_seed = self.nonce_seed;
        c.stream_id = self.stream_id.clone();
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct SetupArgs {
    #[command(flatten)]
    session: SessionFlags,
    /// Output directory for vk_tc.json, vk_sc.json and keys.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeProverArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Require this bearer token on every request.
    #[arg(long)]
    token: Option<String>,
    /// Session config JSON to open at start; may be repeated.
    #[arg(long = "session")]
    sessions: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeVerifierArgs {
    #[arg(long, default_value = "127.0.0.1:8090")]
    listen: String,
    /// Prover service base URL.
    #[arg(long)]
    utility: Option<String>,
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    token: Option<String>,
    /// Request opened witnesses and re-execute.
    #[arg(long)]
    audit: bool,
    /// Verify every pushed summary on arrival.
    #[arg(long)]
    auto_verify: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["csv", "synthetic", "steps"])))]
struct ReplayArgs {
    /// Prover service base URL.
    #[arg(long, required_unless_present = "dry_run")]
    utility: Option<String>,
    /// Existing session to stream into.
    #[arg(long)]
    session: Option<String>,
    /// Session config JSON to open before streaming.
    #[arg(long)]
    open: Option<PathBuf>,
    #[arg(long)]
    token: Option<String>,
    /// CSV with columns t, y_0..y_{d-1}[, u_0..].
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Number of trailing CSV columns holding control input.
    #[arg(long, default_value_t = 0)]
    actuators: usize,
    /// Synthetic source JSON: {"model_file", "steps", "seed"}.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Inline synthetic source length, with --seed and --model.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = BUILTIN_REFERENCE)]
    model: String,
    /// Attack spec JSON applied before streaming.
    #[arg(long)]
    attack: Option<PathBuf>,
    /// Samples per second; 0 streams as fast as the service accepts.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    /// Samples per ingest request.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Also write the streamed samples as CSV.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Parse and report without contacting the service.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Bias,
    Drift,
    Replay,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("def").required(true).args(["spec", "kind"])))]
struct AttackArgs {
    #[arg(long)]
    input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    actuators: usize,
    /// Attack spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, requires_all = ["start", "end"])]
    kind: Option<KindArg>,
    #[arg(long)]
    start: Option<u64>,
    #[arg(long)]
    end: Option<u64>,
    /// Per-sensor magnitudes, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    magnitude: Vec<f64>,
    #[arg(long)]
    source_start: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProofKindArg {
    FullWindow,
    Sc,
    Tc,
}

#[derive(Debug, Args)]
struct RequestProofArgs {
    #[arg(long)]
    utility: String,
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    window: u64,
    #[arg(long, value_enum, default_value = "full-window")]
    kind: ProofKindArg,
    /// Interval index for --kind tc.
    #[arg(long, required_if_eq("kind", "tc"))]
    interval: Option<u32>,
    #[arg(long)]
    token: Option<String>,
    /// Write the full response here and print a short summary instead.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    utility: String,
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    window: u64,
    #[arg(long)]
    audit: bool,
    #[arg(long)]
    token: Option<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), HarnessError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn client(utility: &str, token: &Option<String>) -> UtilityClient {
    UtilityClient::new(utility).with_token(token.clone())
}

fn runtime() -> Result<tokio::runtime::Runtime, HarnessError> {
    Ok(tokio::runtime::Runtime::new()?)
}

fn setup(args: SetupArgs) -> Result<i32, HarnessError> {
    let config = args.session.resolve()?;
    let session = ProverSession::open(config)?;
    let keys = session.keys();
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("vk_tc.json"), serde_json::to_string_pretty(&keys.vk_tc)?)?;
    std::fs::write(args.out.join("vk_sc.json"), serde_json::to_string_pretty(&keys.vk_sc)?)?;
    std::fs::write(args.out.join("keys.json"), serde_json::to_string_pretty(&keys)?)?;
    print_json(&session.opened())?;
    Ok(0)
}

fn announce(addr: std::net::SocketAddr) {
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

fn serve_prover(args: ServeProverArgs) -> Result<i32, HarnessError> {
    let state = AppState::new(args.token);
    for path in &args.sessions {
        let session = ProverSession::open(read_json(path)?)?;
        state.insert(session).map_err(|e| HarnessError::Config(e.1))?;
    }
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.listen).await?;
        announce(listener.local_addr()?);
        zkstar_prover::server::serve(listener, state).await
    })?;
    Ok(0)
}

fn serve_verifier(args: ServeVerifierArgs) -> Result<i32, HarnessError> {
    let utility = args.utility.as_deref().map(|u| client(u, &args.token));
    let state = VerifierState::new(utility, args.session, args.audit, args.auto_verify);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.listen).await?;
        announce(listener.local_addr()?);
        zkstar_regulator::server::serve(listener, state).await
    })?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct ReplayStats {
    session: Option<String>,
    samples: usize,
    batches: usize,
    first_t: Option<u64>,
    last_t: Option<u64>,
    /// Windows closed by this replay; in a dry run, windows the stream would close.
    closed_windows: Option<usize>,
    last_window: Option<u64>,
    next_t: Option<u64>,
    elapsed_ms: f64,
}

fn replay_source(args: &ReplayArgs) -> Result<Vec<Sample>, HarnessError> {
    let mut samples = if let Some(path) = &args.csv {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        read_csv(&text, args.actuators)?
    } else if let Some(path) = &args.synthetic {
        read_json::<SyntheticSpec>(path)?.generate()?
    } else {
        let steps = args.steps.expect("source group is required");
        SyntheticSpec { model_file: args.model.clone(), steps, seed: args.seed }.generate()?
    };
    samples.sort_by_key(|s| s.t);
    if let Some(path) = &args.attack {
        samples = inject_attack(&samples, &read_json(path)?)?;
    }
    Ok(samples)
}

fn replay(args: ReplayArgs) -> Result<i32, HarnessError> {
    if args.batch == 0 || !(args.rate >= 0.0 && args.rate.is_finite()) {
        return Err(HarnessError::Config("--batch must be positive and --rate a non-negative number".into()));
    }
    let samples = replay_source(&args)?;
    if let Some(path) = &args.save {
        std::fs::write(path, write_csv(&samples))?;
    }
    let opened: Option<SessionConfig> = args.open.as_deref().map(read_json).transpose()?;
    let started = Instant::now();
    let mut stats = ReplayStats {
        session: args.session.clone(),
        samples: samples.len(),
        batches: samples.len().div_ceil(args.batch),
        first_t: samples.first().map(|s| s.t),
        last_t: samples.last().map(|s| s.t),
        closed_windows: None,
        last_window: None,
        next_t: None,
        elapsed_ms: 0.0,
    };
    if args.dry_run {
        stats.closed_windows = opened.as_ref().map(|c| samples.len() / (c.w * c.d).max(1));
        print_json(&stats)?;
        return Ok(0);
    }
    let c = client(args.utility.as_deref().expect("required unless dry run"), &args.token);
    let session = match (&opened, &args.session) {
        (Some(config), _) => c.post::<_, SessionOpened>("/v1/sessions", config)?.session_id,
        (None, s) => c.resolve_session(s.as_deref())?,
    };
    let path = format!("/v1/sessions/{session}/ingest");
    let mut closed = 0;
    for chunk in samples.chunks(args.batch) {
        let batch_started = Instant::now();
        let ack: IngestAck = c.post(&path, &IngestRequest { samples: chunk.to_vec() })?;
        closed += ack.closed_windows.len();
        stats.last_window = ack.closed_windows.last().copied().or(stats.last_window);
        stats.next_t = Some(ack.next_t);
        if args.rate > 0.0 {
            let budget = Duration::from_secs_f64(chunk.len() as f64 / args.rate);
            if let Some(rest) = budget.checked_sub(batch_started.elapsed()) {
                std::thread::sleep(rest);
            }
        }
    }
    stats.session = Some(session);
    stats.closed_windows = Some(closed);
    stats.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    print_json(&stats)?;
    Ok(0)
}

fn attack(args: AttackArgs) -> Result<i32, HarnessError> {
    let spec = match (&args.spec, args.kind) {
        (Some(path), _) => read_json::<AttackSpec>(path)?,
        (None, Some(kind)) => AttackSpec {
            start_t: args.start.expect("required with --kind"),
            end_t: args.end.expect("required with --kind"),
            kind: match kind {
                KindArg::Bias => AttackKind::Bias,
                KindArg::Drift => AttackKind::Drift,
                KindArg::Replay => AttackKind::Replay,
            },
            magnitude: args.magnitude.clone(),
            source_start: args.source_start,
        },
        (None, None) => unreachable!("argument group is required"),
    };
    let text = std::fs::read_to_string(&args.input).map_err(|e| HarnessError::Config(format!("{}: {e}", args.input.display())))?;
    let attacked = inject_attack(&read_csv(&text, args.actuators)?, &spec)?;
    let out = write_csv(&attacked);
    match &args.output {
        Some(p) => std::fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(0)
}

fn request_proof(args: RequestProofArgs) -> Result<i32, HarnessError> {
    let c = client(&args.utility, &args.token);
    let session = c.resolve_session(args.session.as_deref())?;
    let kind = match args.kind {
        ProofKindArg::FullWindow => ProofKind::FullWindow,
        ProofKindArg::Sc => ProofKind::Sc,
        ProofKindArg::Tc => ProofKind::TcInterval { interval: args.interval.expect("required for tc") },
    };
    let resp = c.proofs(&session, args.window, kind)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, serde_json::to_string_pretty(&resp)?)?;
            let bytes: usize = resp.artifacts.iter().map(|a| a.size_bytes()).sum();
            print_json(&serde_json::json!({ "window": resp.window, "artifacts": resp.artifacts.len(), "proof_bytes": bytes }))?;
        }
        None => print_json(&resp)?,
    }
    Ok(0)
}

fn verify(args: VerifyArgs) -> Result<i32, HarnessError> {
    let c = client(&args.utility, &args.token);
    let mut session = connect(&c, args.session.as_deref())?;
    let verdict = request_and_verify(&mut session, &c, args.window, args.audit);
    print_json(&verdict)?;
    Ok(if verdict.compliant { 0 } else { 1 })
}

fn sweep(args: SweepArgs) -> Result<i32, HarnessError> {
    let config: SweepConfig = read_json(&args.config)?;
    let results = run_sweep(&config)?;
    let report = detection_quality_report(&config, &results);
    write_report(&report, &args.out)?;
    print!("{}", summarize(&args.out)?);
    Ok(0)
}

fn report(args: ReportArgs) -> Result<i32, HarnessError> {
    print!("{}", summarize(&args.dir)?);
    Ok(0)
}

/// Parse `args` (including the program name) and run the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Setup(a) => setup(a),
        Command::ServeProver(a) => serve_prover(a),
        Command::ServeVerifier(a) => serve_verifier(a),
        Command::Replay(a) => replay(a),
        Command::Attack(a) => attack(a),
        Command::RequestProof(a) => request_proof(a),
        Command::Verify(a) => verify(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        1
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["zkstarctl"]), 2);
        assert_eq!(run(["zkstarctl", "frobnicate"]), 2);
        assert_eq!(run(["zkstarctl", "verify", "--window", "x", "--utility", "u"]), 2);
        assert_eq!(run(["zkstarctl", "replay", "--dry-run"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        for sub in ["setup", "serve-prover", "serve-verifier", "replay", "attack", "request-proof", "verify", "sweep", "report"] {
            assert_eq!(run(["zkstarctl", sub, "--help"]), 0, "{sub}");
        }
        assert_eq!(run(["zkstarctl", "--help"]), 0);
    }

    #[test]
    fn domain_errors_exit_one() {
        assert_eq!(run(["zkstarctl", "report", "--dir", "/nonexistent/report"]), 1);
        assert_eq!(run(["zkstarctl", "sweep", "--config", "/nonexistent/sweep.json"]), 1);
    }
}
