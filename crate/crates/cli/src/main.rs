//! `ccmc-lab`: run the attention/CCMC experiments and write their artifacts.
//!
//! Exit codes: 0 when every check passes, 1 when a tolerance check fails,
//! 2 on configuration or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ccmc::experiments::{run_experiment, ExperimentKind, ExperimentReport, LabConfig};
use ccmc::Error;
use clap::{Parser, ValueEnum};
use serde_json::{json, Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Attention vs CCMC next-token laws, P <-> W round trips, S_E null space.
    Equivalence,
    /// Population gradient descent on connected and disconnected supports.
    Consistency,
    /// Excess-loss scaling of the empirical MLE over a sample-size grid.
    Complexity,
    /// Single-trajectory generation: weak-token decay, weak-to-weak growth, visits.
    Collapse,
    /// Positional attention vs its positional CCMC.
    Positional,
    /// Every experiment above, in order.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::All => "all",
            c => c.kinds()[0].name(),
        }
    }

    fn kinds(self) -> Vec<ExperimentKind> {
        match self {
            Command::Equivalence => vec![ExperimentKind::Equivalence],
            Command::Consistency => vec![ExperimentKind::Consistency],
            Command::Complexity => vec![ExperimentKind::Complexity],
            Command::Collapse => vec![ExperimentKind::Collapse],
            Command::Positional => vec![ExperimentKind::Positional],
            Command::All => ExperimentKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccmc-lab", version, about = "Attention / context-conditioned Markov chain experiments")]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Command,

    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory for summary.json, CSV tables and SVG plots.
    #[arg(long, value_name = "DIR", default_value = "ccmc-lab-out")]
    out: PathBuf,

    /// Master seed; overrides the `seed` field of the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Override a configuration value, e.g. `complexity.k=4` or `K=4`.
    /// A key without a section applies to every section with that field.
    /// Values are parsed as JSON, falling back to a plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for parallel trials (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Parse(_) => Failure::Config(e.to_string()),
            e => Failure::Run(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn apply_override(cfg: &mut Value, arg: &str) -> Result<(), Failure> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{arg}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let path: Vec<&str> = key.split('.').collect();
    if path.len() > 1 {
        let mut slot = &mut *cfg;
        for seg in &path {
            slot = slot
                .get_mut(*seg)
                .ok_or_else(|| Failure::Config(format!("unknown configuration key `{key}`")))?;
        }
        *slot = value;
        return Ok(());
    }
    let obj = cfg.as_object_mut().expect("configuration is an object");
    if obj.contains_key(key) {
        obj.insert(key.to_string(), value);
        return Ok(());
    }
    let field = key.to_lowercase();
    let mut hit = false;
    for section in obj.values_mut() {
        if let Some(s) = section.as_object_mut() {
            if s.contains_key(&field) {
                s.insert(field.clone(), value.clone());
                hit = true;
            }
        }
    }
    if hit {
        Ok(())
    } else {
        Err(Failure::Config(format!("no configuration section has a field `{field}`")))
    }
}

fn load_config(cli: &Cli) -> Result<LabConfig, Failure> {
    let mut cfg = serde_json::to_value(LabConfig::default()).expect("defaults serialize");
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("malformed config {}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Failure::Config("configuration must be a JSON object".into()));
        }
        merge(&mut cfg, file);
    }
    for o in &cli.overrides {
        apply_override(&mut cfg, o)?;
    }
    let mut lab: LabConfig =
        serde_json::from_value(cfg).map_err(|e| Failure::Config(format!("invalid configuration: {e}")))?;
    if let Some(seed) = cli.seed {
        lab.seed = seed;
    }
    Ok(lab)
}

fn validate(lab: &LabConfig, kinds: &[ExperimentKind]) -> Result<(), Error> {
    for k in kinds {
        match k {
            ExperimentKind::Equivalence => lab.equivalence.validate()?,
            ExperimentKind::Consistency => lab.consistency.validate()?,
            ExperimentKind::Complexity => lab.complexity.validate()?,
            ExperimentKind::Collapse => lab.collapse.validate()?,
            ExperimentKind::Positional => lab.positional.validate()?,
        }
    }
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    let lab = load_config(cli)?;
    let kinds = cli.command.kinds();
    validate(&lab, &kinds)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(format!("cannot start thread pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", cli.out.display())))?;

    let mut reports: Vec<ExperimentReport> = Vec::new();
    for kind in kinds {
        let start = Instant::now();
        let report = run_experiment(kind, &lab)?;
        for t in &report.tables {
            write(&cli.out, &format!("{}.csv", t.name), &t.to_csv())?;
        }
        for (name, svg) in &report.plots {
            write(&cli.out, name, svg)?;
        }
        eprintln!("{kind}: {:.2}s", start.elapsed().as_secs_f64());
        for c in &report.checks {
            eprintln!(
                "  [{}] {} = {:.4e} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            );
        }
        reports.push(report);
    }

    let passed = reports.iter().all(|r| r.passed());
    let experiments: Vec<Value> = reports
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("reports serialize");
            let files: Vec<String> = r
                .tables
                .iter()
                .map(|t| format!("{}.csv", t.name))
                .chain(r.plots.iter().map(|p| p.0.clone()))
                .collect();
            v["passed"] = json!(r.passed());
            v["files"] = json!(files);
            v
        })
        .collect();
    let mut invocation = Map::new();
    invocation.insert("subcommand".into(), json!(cli.command.name()));
    invocation.insert("config_path".into(), json!(cli.config.as_ref().map(|p| p.display().to_string())));
    invocation.insert("out_dir".into(), json!(cli.out.display().to_string()));
    invocation.insert("seed".into(), json!(lab.seed));
    invocation.insert("seed_flag".into(), json!(cli.seed));
    invocation.insert("overrides".into(), json!(cli.overrides));
    invocation.insert("threads".into(), json!(cli.threads));
    let summary = json!({
        "invocation": invocation,
        "effective_config": lab,
        "passed": passed,
        "experiments": experiments,
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write(&cli.out, "summary.json", &text)?;
    eprintln!("{}", if passed { "all checks passed" } else { "some checks failed" });
    Ok(passed)
}
