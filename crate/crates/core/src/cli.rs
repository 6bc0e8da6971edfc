//! The `matchflow` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::{
    check_feasibility, random_meeting_equilibrium, solve_equilibrium, EquilibriumOutcome, FeasibilityReport,
};
use crate::error::{Error, Result};
use crate::experiments::{self, ExperimentRow};
use crate::firstbest::solve_first_best;
use crate::hardness::{load_instance, reduce};
use crate::market::{
    assortment_entries, assortments_from_entries, market_to_json, parse_assortments, AssortmentSet,
    LambdaEntry, MarketSpec, Side, SCHEMA_VERSION,
};
use crate::mcsim::{self, SimConfig};
use crate::stardesign::{design_search, StarCase};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_CERTIFICATE: i32 = 4;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_IO: i32 = 74;

#[derive(Parser, Debug)]
#[command(name = "matchflow", version, about = "Design and audit directed search in two-sided matching markets")]
struct Cli {
    /// Log line format on stderr.
    #[arg(long, value_enum, default_value_t = LogFormat::Text, global = true)]
    log: LogFormat,
    #[arg(long, default_value = "warn", global = true)]
    log_level: tracing::Level,
    /// Worker threads for parallel commands (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LogFormat {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a market file (and optionally an assortment file) against the schema.
    Validate {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        assortment: Option<PathBuf>,
    },
    /// Solve the stationary equilibrium induced by an assortment.
    Eq {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        assortment: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the first-best flow relaxation.
    FirstBest {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the certified star design.
    Design {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equilibrium under population-proportional random meeting.
    Random {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo replication of a solved design.
    Mc(McArgs),
    /// Build the market for a MAX3LIN2 instance.
    Reduce {
        #[arg(long)]
        cnf3lin: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = crate::dist::DEFAULT_NOISE_WIDTH)]
        noise: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter sweeps.
    Exp {
        #[command(subcommand)]
        sweep: ExpCommand,
    },
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long)]
    market: PathBuf,
    /// Output of `eq`, `design` or `random`.
    #[arg(long)]
    design: PathBuf,
    /// Agents per unit mass.
    #[arg(long, default_value_t = 20_000.0)]
    n: f64,
    #[arg(long, default_value_t = 200.0)]
    horizon: f64,
    #[arg(long, default_value_t = 50.0)]
    burn_in: f64,
    #[arg(long)]
    seed: u64,
    /// Replications with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    replications: usize,
    #[arg(long, default_value_t = mcsim::DEFAULT_BATCHES)]
    batches: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ExpCommand {
    /// Sweep the horizontal-to-vertical blend q.
    QSweep {
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<f64>>,
        #[arg(long, default_value_t = experiments::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = experiments::Q_SWEEP_DELTA)]
        delta: f64,
        #[command(flatten)]
        out: ExpOut,
    },
    /// Sweep the life-event rate δ.
    DeltaSweep {
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        #[arg(long, default_value_t = experiments::DELTA_SWEEP_Q)]
        q: f64,
        #[arg(long, default_value_t = experiments::DEFAULT_SIGMA)]
        sigma: f64,
        /// Sweep this market instead of the blended one.
        #[arg(long)]
        market: Option<PathBuf>,
        #[command(flatten)]
        out: ExpOut,
    },
}

#[derive(Args, Debug)]
struct ExpOut {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the series in gnuplot block layout.
    #[arg(long)]
    plotdata: Option<PathBuf>,
    /// Write 0 in the runtime column so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

// ---------------------------------------------------------------------------
// Output documents

#[derive(Debug, Serialize, Deserialize)]
pub struct TypeRow {
    pub label: String,
    pub side: Side,
    pub threshold: f64,
    pub match_rate: f64,
    pub mass: f64,
}

#[derive(Debug, Serialize)]
struct SolutionDoc<'a, E: Serialize> {
    version: u32,
    kind: &'static str,
    welfare: f64,
    #[serde(flatten)]
    extra: E,
    types: Vec<TypeRow>,
    feasibility: &'a FeasibilityReport,
    lambda: Vec<LambdaEntry>,
}

/// The fields of any solved document that `mc` needs.
#[derive(Debug, Deserialize)]
struct SolutionInput {
    types: Vec<TypeRow>,
    lambda: Vec<LambdaEntry>,
}

#[derive(Serialize)]
struct EqExtra {
    iterations: usize,
}

#[derive(Serialize)]
struct StarDoc {
    center: String,
    leaves: Vec<String>,
    case: StarCase,
    welfare: f64,
    fb_welfare: f64,
}

#[derive(Serialize)]
struct DesignExtra {
    fb_objective: f64,
    ratio: f64,
    forest_weight: f64,
    star_weight: f64,
    stars: Vec<StarDoc>,
}

#[derive(Serialize)]
struct RandomExtra {
    outer_iterations: usize,
    damped: bool,
}

#[derive(Serialize)]
struct EdgeDoc {
    man: String,
    woman: String,
    beta: f64,
    rho: f64,
}

#[derive(Serialize)]
struct FirstBestDoc {
    version: u32,
    kind: &'static str,
    objective: f64,
    /// Support of the optimal flow; it forms a forest.
    edges: Vec<EdgeDoc>,
    rho: Vec<EdgeDoc>,
}

#[derive(Serialize)]
struct McDoc {
    version: u32,
    kind: &'static str,
    reports: Vec<mcsim::SimReport>,
    pooled: mcsim::Pooled,
    analytic_mass: Vec<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub inputs: Vec<FileDigest>,
    pub seeds: Vec<u64>,
    pub wall_time_ms: u64,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    started: Instant,
    inputs: Vec<FileDigest>,
    seeds: Vec<u64>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        String::from_utf8(bytes).map_err(|_| Error::Schema {
            path: path.display().to_string(),
            message: "file is not UTF-8".into(),
        })
    }

    fn market(&mut self, path: &Path) -> Result<MarketSpec> {
        // Digest the bytes that were parsed.
        let text = self.read(path)?;
        crate::market::parse_market(&text)
    }

    /// Queue `bytes` for `out`, or print them when no path was given.
    fn emit(&mut self, out: Option<&Path>, bytes: Vec<u8>) {
        match out {
            Some(p) => self.outputs.push((p.to_path_buf(), bytes)),
            None => print!("{}", String::from_utf8_lossy(&bytes)),
        }
    }

    /// Write queued outputs and their manifest.
    fn finish(&mut self) -> Result<()> {
        let queued = std::mem::take(&mut self.outputs);
        let Some((first, _)) = queued.first() else {
            return Ok(());
        };
        let manifest_at = manifest_path(first);
        let mut outputs = Vec::new();
        for (path, bytes) in &queued {
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            outputs.push(FileDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: self.argv.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs.clone(),
            seeds: self.seeds.clone(),
            wall_time_ms: self.started.elapsed().as_millis() as u64,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&manifest_at, text).map_err(|e| Error::io(&manifest_at, e))
    }
}

fn json_bytes<T: Serialize>(doc: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(doc).expect("document serializes");
    s.push('\n');
    s.into_bytes()
}

fn type_rows(spec: &MarketSpec, out: &EquilibriumOutcome) -> Vec<TypeRow> {
    (0..spec.n_types())
        .map(|k| {
            let (side, i) = spec.node_type(k);
            TypeRow {
                label: spec.types(side)[i].label.clone(),
                side,
                threshold: out.thresholds[k],
                match_rate: out.match_rate[k],
                mass: out.mass[k],
            }
        })
        .collect()
}

fn solution_doc<E: Serialize>(
    kind: &'static str,
    spec: &MarketSpec,
    set: &AssortmentSet,
    out: &EquilibriumOutcome,
    feasibility: &FeasibilityReport,
    extra: E,
) -> Vec<u8> {
    json_bytes(&SolutionDoc {
        version: SCHEMA_VERSION,
        kind,
        welfare: out.welfare,
        extra,
        types: type_rows(spec, out),
        feasibility,
        lambda: assortment_entries(spec, set),
    })
}

fn star_docs(spec: &MarketSpec, stars: &[crate::stardesign::StarSolution]) -> Vec<StarDoc> {
    stars
        .iter()
        .map(|s| {
            let side = s.star.center_side;
            StarDoc {
                center: spec.types(side)[s.star.center].label.clone(),
                leaves: s
                    .star
                    .leaves
                    .iter()
                    .map(|l| spec.types(side.opposite())[l.index].label.clone())
                    .collect(),
                case: s.case_taken,
                welfare: s.welfare,
                fb_welfare: s.fb_welfare,
            }
        })
        .collect()
}

fn rows_for_output(mut rows: Vec<ExperimentRow>, no_timing: bool) -> Vec<ExperimentRow> {
    if no_timing {
        for r in &mut rows {
            r.runtime_ms = 0;
        }
    }
    rows
}

fn exp_output(run: &mut Run, rows: Vec<ExperimentRow>, out: &ExpOut) -> Result<()> {
    let rows = rows_for_output(rows, out.no_timing);
    let problems = experiments::check_rows(&rows);
    let mut csv = Vec::new();
    experiments::write_csv(&rows, &mut csv)?;
    run.emit(out.out.as_deref(), csv);
    if let Some(p) = &out.plotdata {
        let mut buf = Vec::new();
        experiments::write_plotdata(&rows, &mut buf).map_err(|e| Error::io(p, e))?;
        run.emit(Some(p), buf);
    }
    if !problems.is_empty() {
        // Results are still written so the offending rows can be inspected.
        let msg = problems.join("; ");
        run.finish()?;
        return Err(Error::CertificateViolation(format!("sweep invariants failed: {msg}")));
    }
    Ok(())
}

fn dispatch(command: Command, run: &mut Run) -> Result<()> {
    match command {
        Command::Validate { market, assortment } => {
            let spec = run.market(&market)?;
            if let Some(a) = assortment {
                let text = run.read(&a)?;
                parse_assortments(&spec, &text)?;
            }
            println!(
                "ok: {} men types, {} women types, delta {}",
                spec.n_men(),
                spec.n_women(),
                spec.delta
            );
        }
        Command::Eq {
            market,
            assortment,
            out,
        } => {
            let spec = run.market(&market)?;
            let text = run.read(&assortment)?;
            let set = parse_assortments(&spec, &text)?;
            let eq = solve_equilibrium(&spec, &set)?;
            let rep = check_feasibility(&spec, &set, &eq);
            let doc = solution_doc("equilibrium", &spec, &set, &eq, &rep, EqExtra { iterations: eq.iterations });
            run.emit(out.as_deref(), doc);
        }
        Command::FirstBest { market, out } => {
            let spec = run.market(&market)?;
            let fb = solve_first_best(&spec)?;
            let edge = |m: usize, w: usize| EdgeDoc {
                man: spec.men[m].label.clone(),
                woman: spec.women[w].label.clone(),
                beta: fb.beta[m][w],
                rho: fb.rho[m][w],
            };
            let doc = FirstBestDoc {
                version: SCHEMA_VERSION,
                kind: "first_best",
                objective: fb.objective,
                edges: fb.support_edges.iter().map(|&(m, w)| edge(m, w)).collect(),
                rho: (0..spec.n_men())
                    .flat_map(|m| (0..spec.n_women()).map(move |w| (m, w)))
                    .map(|(m, w)| edge(m, w))
                    .collect(),
            };
            run.emit(out.as_deref(), json_bytes(&doc));
        }
        Command::Design { market, out } => {
            let spec = run.market(&market)?;
            let d = design_search(&spec)?;
            let extra = DesignExtra {
                fb_objective: d.fb_objective,
                ratio: d.ratio,
                forest_weight: d.forest_weight,
                star_weight: d.star_weight,
                stars: star_docs(&spec, &d.stars),
            };
            let doc = solution_doc("design", &spec, &d.assortments, &d.outcome, &d.feasibility, extra);
            run.emit(out.as_deref(), doc);
            eprintln!(
                "design: welfare {} first-best {} ratio {}",
                d.outcome.welfare, d.fb_objective, d.ratio
            );
        }
        Command::Random { market, out } => {
            let spec = run.market(&market)?;
            let r = random_meeting_equilibrium(&spec)?;
            let rep = check_feasibility(&spec, &r.assortments, &r.outcome);
            let extra = RandomExtra {
                outer_iterations: r.outer_iterations,
                damped: r.damped,
            };
            let doc = solution_doc("random", &spec, &r.assortments, &r.outcome, &rep, extra);
            run.emit(out.as_deref(), doc);
        }
        Command::Mc(args) => {
            let spec = run.market(&args.market)?;
            let text = run.read(&args.design)?;
            let sol: SolutionInput = crate::market::from_json_with_path(&text)?;
            let set = assortments_from_entries(&spec, &sol.lambda)?;
            let mut thresholds = vec![f64::NAN; spec.n_types()];
            let mut analytic = vec![f64::NAN; spec.n_types()];
            for row in &sol.types {
                let (side, i) = spec
                    .find_label(&row.label)
                    .ok_or_else(|| Error::validation(format!("design names unknown type `{}`", row.label)))?;
                thresholds[spec.node(side, i)] = row.threshold;
                analytic[spec.node(side, i)] = row.mass;
            }
            if let Some(k) = thresholds.iter().position(|t| t.is_nan()) {
                let (side, i) = spec.node_type(k);
                return Err(Error::validation(format!(
                    "design has no threshold for `{}`",
                    spec.types(side)[i].label
                )));
            }
            if args.replications == 0 {
                return Err(Error::validation("replications must be at least 1"));
            }
            let mut cfg = SimConfig::new(args.n, args.horizon, args.burn_in, args.seed);
            cfg.batches = args.batches;
            let reports = mcsim::replicate(&spec, &set, &thresholds, &cfg, args.replications)?;
            run.seeds = reports.iter().map(|r| r.seed).collect();
            let doc = McDoc {
                version: SCHEMA_VERSION,
                kind: "monte_carlo",
                pooled: mcsim::pool(&reports),
                reports,
                analytic_mass: analytic,
            };
            run.emit(args.out.as_deref(), json_bytes(&doc));
        }
        Command::Reduce {
            cnf3lin,
            delta,
            noise,
            out,
        } => {
            run.read(&cnf3lin)?;
            let inst = load_instance(&cnf3lin)?;
            let red = reduce(&inst, delta, noise)?;
            run.emit(out.as_deref(), market_to_json(&red.spec).into_bytes());
        }
        Command::Exp { sweep } => match sweep {
            ExpCommand::QSweep { q, sigma, delta, out } => {
                let qs = q.unwrap_or_else(experiments::default_q_values);
                let rows = experiments::run_q_sweep(&qs, sigma, delta)?;
                exp_output(run, rows, &out)?;
            }
            ExpCommand::DeltaSweep {
                deltas,
                q,
                sigma,
                market,
                out,
            } => {
                let ds = deltas.unwrap_or_else(|| experiments::DEFAULT_DELTAS.to_vec());
                let rows = match market {
                    Some(m) => {
                        let spec = run.market(&m)?;
                        experiments::run_delta_sweep_on(&spec, &ds)?
                    }
                    None => experiments::run_delta_sweep(&ds, q, sigma)?,
                };
                exp_output(run, rows, &out)?;
            }
        },
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Eq { .. } => "eq",
        Command::FirstBest { .. } => "first-best",
        Command::Design { .. } => "design",
        Command::Random { .. } => "random",
        Command::Mc(_) => "mc",
        Command::Reduce { .. } => "reduce",
        Command::Exp { sweep: ExpCommand::QSweep { .. } } => "exp q-sweep",
        Command::Exp { sweep: ExpCommand::DeltaSweep { .. } } => "exp delta-sweep",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema { .. } | Error::Validation(_) => EXIT_VALIDATION,
        Error::NonConvergence(_) | Error::IterationLimit { .. } => EXIT_NONCONVERGENCE,
        Error::CertificateViolation(_) => EXIT_CERTIFICATE,
        Error::Io { .. } => EXIT_IO,
    }
}

fn init_logging(format: LogFormat, level: tracing::Level) {
    let builder = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr);
    // A second call in the same process keeps the first subscriber.
    let _ = match format {
        LogFormat::Json => builder.json().try_init(),
        LogFormat::Text => builder.try_init(),
    };
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.log, cli.log_level);
    let mut run = Run {
        command: command_name(&cli.command),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started: Instant::now(),
        inputs: Vec::new(),
        seeds: Vec::new(),
        outputs: Vec::new(),
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("matchflow: cannot start thread pool: {e}");
            return EXIT_VALIDATION;
        }
    };
    let result = pool.install(|| dispatch(cli.command, &mut run)).and_then(|()| run.finish());
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("matchflow: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors() {
        assert_eq!(run(["matchflow", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["matchflow"]), EXIT_USAGE);
        assert_eq!(run(["matchflow", "mc", "--market", "x.json", "--design", "d.json"]), EXIT_USAGE);
        assert_eq!(run(["matchflow", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::validation("x")), 2);
        assert_eq!(exit_code(&Error::NonConvergence("x".into())), 3);
        assert_eq!(exit_code(&Error::CertificateViolation("x".into())), 4);
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(manifest_path(Path::new("out/d.json")), PathBuf::from("out/d.json.manifest.json"));
    }
}
