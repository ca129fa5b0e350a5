use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgGroup, Parser, Subcommand};
use serde::Serialize;

use monalab::config::BackboneChoice;
use monalab::delta::accounting::backbone_param_count;
use monalab::delta::{count_method_on_preset, MethodCount, MethodKind, MethodSpec};
use monalab::experiment::{self, evaluate_checkpoint, write_artifacts};
use monalab::gradcheck::GradReport;
use monalab::verify::{self, CheckTarget, DEFAULT_TOL};
use monalab::{BackboneConfig, Error, RunConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;

/// Backward-pass scale used by `gradcheck --inject-fault`.
const FAULT_FACTOR: f64 = 1.01;

#[derive(Parser)]
#[command(name = "monalab", version, about = "Delta-tuning experiments on a windowed-attention backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic trainable-parameter counts for a preset.
    CountParams {
        #[arg(long)]
        preset: String,
        /// One method; all methods when omitted.
        #[arg(long)]
        method: Option<String>,
        /// Bottleneck width (LoRA rank).
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a module.
    Gradcheck {
        /// mona, mona-v1..mona-v4, adapter, lora, adaptformer, block, primitives or all.
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train one configuration and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint written by `train`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep one axis of a base config with a shared seed.
    #[command(group(ArgGroup::new("axis").required(true).args(["methods", "dims", "presets"])))]
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
        /// CSV path; defaults to <output_dir>/compare.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CountParams { preset, method, dim, json } => count_params(&preset, method.as_deref(), dim, json.as_deref()),
        Command::Gradcheck { module, seed, tol, inject_fault } => gradcheck(&module, seed, tol, inject_fault),
        Command::Train { config, out } => train(&config, out),
        Command::Eval { config, checkpoint } => eval(&config, &checkpoint),
        Command::Compare { config, methods, dims, presets, out } => compare(&config, methods, dims, presets, out),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::CheckpointMismatch(_)) => EXIT_CHECKPOINT,
        Some(Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Io(_)) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

#[derive(Serialize)]
struct CountRow {
    method: String,
    dim: usize,
    #[serde(flatten)]
    count: MethodCount,
}

fn count_params(preset: &str, method: Option<&str>, dim: usize, json: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg = BackboneConfig::preset(preset)?;
    let kinds = match method {
        Some(m) => vec![m.parse::<MethodKind>()?],
        None => MethodKind::ALL.to_vec(),
    };
    let rows: Vec<CountRow> = kinds
        .into_iter()
        .map(|kind| {
            let spec = MethodSpec::new(kind).with_dim(dim);
            spec.validate()?;
            Ok(CountRow {
                method: kind.name().to_string(),
                dim,
                count: count_method_on_preset(&cfg, &spec),
            })
        })
        .collect::<monalab::Result<_>>()?;

    println!("preset {preset}: backbone {} parameters", backbone_param_count(&cfg));
    println!("{:<12} {:>5} {:>14} {:>10}", "method", "dim", "trainable", "fraction");
    for r in &rows {
        println!(
            "{:<12} {:>5} {:>14} {:>9.3}%",
            r.method,
            r.dim,
            r.count.trainable,
            100.0 * r.count.fraction
        );
    }
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&rows)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn report_line(name: &str, report: &GradReport) -> bool {
    let ok = report.passed() && report.conclusive();
    println!(
        "{name}: {} max_rel_error={:.3e} checked={} skipped_unstable={}",
        if ok { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.checked,
        report.skipped_unstable
    );
    if !ok {
        if let Some(w) = &report.worst {
            println!(
                "  worst: input {} element {} analytic={:.9e} numeric={:.9e} rel_error={:.3e}",
                w.input, w.index, w.analytic, w.numeric, w.rel_error
            );
        }
    }
    ok
}

fn gradcheck(module: &str, seed: u64, tol: f64, inject_fault: bool) -> anyhow::Result<ExitCode> {
    if !(tol.is_finite() && tol > 0.0) {
        bail!(Error::InvalidConfig(format!("--tol must be positive, got {tol}")));
    }
    let fault = inject_fault.then_some(FAULT_FACTOR);
    let mut ok = true;
    let module = module.to_ascii_lowercase();
    if module == "primitives" || module == "all" {
        if fault.is_some() {
            bail!(Error::InvalidConfig("--inject-fault applies to composite modules only".into()));
        }
        for (name, report) in verify::check_primitives(seed, tol)? {
            ok &= report_line(name, &report);
        }
    }
    let targets = match module.as_str() {
        "primitives" => vec![],
        "all" => CheckTarget::all(),
        m => vec![m.parse::<CheckTarget>()?],
    };
    for target in targets {
        let report = verify::check_target_with_fault(target, seed, tol, fault)?;
        ok &= report_line(&target.to_string(), &report);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAILURE) })
}

fn train(config_path: &Path, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let config = RunConfig::from_path(config_path)?;
    let dir = out.unwrap_or_else(|| config.output_dir.clone());
    let outcome = experiment::run(&config)?;
    let artifacts = write_artifacts(&config, &outcome, &dir)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    eprintln!("artifacts written to {}", artifacts.dir.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(config_path: &Path, checkpoint: &Path) -> anyhow::Result<ExitCode> {
    let config = RunConfig::from_path(config_path)?;
    let acc = evaluate_checkpoint(&config, checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&acc)?);
    Ok(ExitCode::SUCCESS)
}

/// One configuration per sweep value, in sweep-axis order.
fn sweep_configs(
    base: &RunConfig,
    methods: Vec<String>,
    mut dims: Vec<usize>,
    presets: Vec<String>,
) -> anyhow::Result<Vec<RunConfig>> {
    let mut configs = Vec::new();
    if !methods.is_empty() {
        let mut kinds = methods.iter().map(|m| m.parse::<MethodKind>()).collect::<monalab::Result<Vec<_>>>()?;
        kinds.sort_by_key(|k| MethodKind::ALL.iter().position(|a| a == k));
        kinds.dedup();
        for kind in kinds {
            let mut c = base.clone();
            c.method.kind = kind;
            configs.push(c);
        }
    } else if !dims.is_empty() {
        dims.sort_unstable();
        dims.dedup();
        for dim in dims {
            let mut c = base.clone();
            c.method.intermediate_dim = dim;
            configs.push(c);
        }
    } else {
        let mut sized = Vec::new();
        for name in presets {
            let mut c = base.clone();
            c.backbone = BackboneChoice::Preset(name);
            sized.push((backbone_param_count(&c.backbone_config()?), c));
        }
        sized.sort_by_key(|(size, _)| *size);
        configs.extend(sized.into_iter().map(|(_, c)| c));
    }
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

fn compare(
    config_path: &Path,
    methods: Vec<String>,
    dims: Vec<usize>,
    presets: Vec<String>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let base = RunConfig::from_path(config_path)?;
    let configs = sweep_configs(&base, methods, dims, presets)?;
    let mut csv = String::from("method,dim,preset,trainable_fraction,final_top1\n");
    for c in &configs {
        let outcome = experiment::run(c)?;
        let line = format!(
            "{},{},{},{:.8e},{:.8e}",
            c.method.kind.name(),
            c.method.intermediate_dim,
            c.backbone_label(),
            outcome.summary.trainable_fraction,
            outcome.summary.final_top1
        );
        eprintln!("{line}");
        writeln!(csv, "{line}")?;
    }
    let path = out.unwrap_or_else(|| base.output_dir.join("compare.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
