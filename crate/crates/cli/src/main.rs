//! `gsa`: describe, count, verify, benchmark and train GSA networks.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage error
//! (bad flags, unknown preset, malformed spec file).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gsa_core::cost::{
    analyze, render_table, scaling_benchmark, BenchKernel, BenchReport, TableRow,
};
use gsa_core::model::{
    build_model, describe_architecture, synthetic_dataset, train_toy, Architecture, ModelSpec,
    ToyModel, ToySpec, TrainConfig, Variant,
};
use gsa_core::tensor::gsat;
use gsa_core::verify::{run_suite, summarize, Suite};

#[derive(Parser, Debug)]
#[command(
    name = "gsa",
    version,
    about = "Global self-attention networks: cost accounting, verification, benchmarks"
)]
struct Cli {
    /// Worker threads for parallel kernels and suites.
    #[arg(long, global = true, env = "GSA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the per-layer summary of a model.
    Describe {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Print parameter and FLOP totals (Structure, Operation, Params, FLOPs).
    Count {
        #[command(flatten)]
        models: ModelsArg,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Run the oracle, equivariance and gradient suites; JSON lines on stdout.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds per case class (default 100, 20 for gradient).
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time a kernel over square image sizes and fit log-log slopes.
    Bench {
        #[arg(long)]
        kernel: BenchKernel,
        /// Image sides; N = side^2.
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64, 128])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Train the small GSA classifier on seeded synthetic data; CSV loss curve.
    TrainToy(TrainArgs),
    /// Initialize a model and write its parameter bundle.
    Build {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Inspect GSAT tensor files.
    Tensor {
        #[command(subcommand)]
        action: TensorCommand,
    },
}

#[derive(Subcommand, Debug)]
enum TensorCommand {
    /// Print dtype, rank and shape.
    Info { path: PathBuf },
    /// Print values, one innermost row per line.
    Cat {
        path: PathBuf,
        /// Stop after this many values.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ModelArg {
    /// Preset name; an unknown name lists the valid ones.
    #[arg(long)]
    preset: Option<String>,
    /// Model spec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ModelsArg {
    /// Preset name; may be repeated.
    #[arg(long)]
    preset: Vec<String>,
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage_from(e: gsa_core::Error) -> anyhow::Error {
    match e {
        gsa_core::Error::Spec(_) | gsa_core::Error::Config(_) => Usage(e.to_string()).into(),
        other => other.into(),
    }
}

fn load_spec(preset: Option<&str>, path: Option<&Path>) -> Result<(String, ModelSpec)> {
    match (preset, path) {
        (Some(name), _) => Ok((
            name.to_string(),
            ModelSpec::preset(name).map_err(usage_from)?,
        )),
        (None, Some(p)) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Usage(format!("cannot read {}: {e}", p.display())))?;
            let spec =
                ModelSpec::from_json(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?;
            Ok((p.display().to_string(), spec))
        }
        (None, None) => Err(Usage("one of --preset or --spec is required".into()).into()),
    }
}

/// Structure and operation labels derived from the spec.
fn labels(spec: &ModelSpec) -> (String, String) {
    let all = spec.group_uses_gsa.iter().all(|&g| g);
    let prefix = match (spec.variant, spec.uses_gsa()) {
        (Variant::MResnet50, _) => "M-GSA-",
        (_, true) if all => "GSA-",
        _ => "",
    };
    let structure = format!("{prefix}ResNet-{}", spec.depth);
    let b = spec.branches;
    let operation = if !spec.uses_gsa() {
        "Convolution".to_string()
    } else if !all {
        let groups: Vec<String> = (0..4)
            .filter(|&g| spec.group_uses_gsa[g])
            .map(|g| (g + 1).to_string())
            .collect();
        format!("GSA in groups {}", groups.join(","))
    } else if spec.variant == Variant::AxialContent {
        "Axial content + positional".to_string()
    } else if !(b.content && b.column && b.row) {
        let on: Vec<&str> = [(b.content, "content"), (b.column, "column"), (b.row, "row")]
            .iter()
            .filter(|(f, _)| *f)
            .map(|(_, n)| *n)
            .collect();
        format!("GSA ({})", on.join("+"))
    } else {
        "GSA".to_string()
    };
    (structure, operation)
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn describe(model: &ModelArg, format: Format) -> Result<()> {
    let (_, spec) = load_spec(model.preset.as_deref(), model.spec.as_deref())?;
    let arch = Architecture::from_spec(&spec).map_err(usage_from)?;
    let summary = describe_architecture(&spec, &arch);
    let text = match format {
        Format::Json => summary.to_json() + "\n",
        Format::Csv => {
            let mut s = String::from("name,kind,out_h,out_w,out_c,params,mults,adds\n");
            for l in &summary.layers {
                let [h, w, c] = l.output;
                s.push_str(&format!(
                    "{},{},{h},{w},{c},{},{},{}\n",
                    l.name, l.kind, l.params, l.mults, l.adds
                ));
            }
            s
        }
        Format::Table => {
            let mut s = format!(
                "{:<28} {:<16} {:>16} {:>12} {:>14}\n",
                "layer", "kind", "output", "params", "FLOPs"
            );
            for l in &summary.layers {
                let shape = format!("{}x{}x{}", l.output[0], l.output[1], l.output[2]);
                s.push_str(&format!(
                    "{:<28} {:<16} {:>16} {:>12} {:>14}\n",
                    l.name,
                    l.kind,
                    shape,
                    l.params,
                    l.mults + l.adds
                ));
            }
            s.push_str(&format!(
                "{} GSA modules, {} conv3x3 blocks, {} params, {} FLOPs\n",
                summary.gsa_modules,
                summary.conv3x3_blocks,
                summary.total_params,
                summary.total_flops
            ));
            s
        }
    };
    emit(&text, None)
}

fn count(models: &ModelsArg, format: Format) -> Result<()> {
    let mut specs = Vec::new();
    for p in &models.preset {
        specs.push(load_spec(Some(p), None)?);
    }
    if let Some(path) = &models.spec {
        specs.push(load_spec(None, Some(path))?);
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, spec) in &specs {
        let report = analyze(&Architecture::from_spec(spec).map_err(usage_from)?);
        let (structure, operation) = labels(spec);
        rows.push(TableRow::new(structure, operation, &report));
        reports.push((name.clone(), report));
    }
    let text = match format {
        Format::Table => render_table(&rows),
        Format::Csv => {
            let mut s = String::from("model,structure,operation,params,flops,mults,adds\n");
            for ((name, r), row) in reports.iter().zip(&rows) {
                s.push_str(&format!(
                    "{name},{},{},{},{},{},{}\n",
                    row.structure,
                    row.operation,
                    r.total_params,
                    r.total_flops(),
                    r.total_mults,
                    r.total_adds
                ));
            }
            s
        }
        Format::Json => {
            let items: Vec<serde_json::Value> = reports
                .iter()
                .zip(&rows)
                .map(|((name, r), row)| serde_json::json!({ "model": name, "row": row, "report": r }))
                .collect();
            serde_json::to_string_pretty(&items)? + "\n"
        }
    };
    emit(&text, None)
}

fn verify(
    suite: Suite,
    seed: u64,
    cases: Option<usize>,
    output: Option<&Path>,
) -> Result<ExitCode> {
    let reports = run_suite(suite, seed, cases)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    emit(&text, output)?;
    let mut failed = false;
    for s in summarize(&reports) {
        eprintln!(
            "{}: {} cases, {} failures, worst relative error {:.3e}",
            s.suite, s.cases, s.failures, s.worst_rel_err
        );
        failed |= s.failures > 0;
    }
    Ok(if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn bench_text(report: &BenchReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(report)? + "\n",
        Format::Csv => {
            let mut s = String::from(
                "side,pixels,analytic_flops,calls_per_sample,wall_median_seconds,wall_spread\n",
            );
            for r in &report.rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.side,
                    r.pixels,
                    r.analytic_flops,
                    r.calls_per_sample,
                    r.wall_median_seconds,
                    r.wall_spread
                ));
            }
            s
        }
        Format::Table => {
            let mut s = format!(
                "kernel {} ({} threads, {} reps)\n",
                report.kernel, report.threads, report.reps
            );
            s.push_str(&format!(
                "{:>6} {:>8} {:>16} {:>14} {:>8}\n",
                "side", "N", "analytic FLOPs", "wall median s", "spread"
            ));
            for r in &report.rows {
                s.push_str(&format!(
                    "{:>6} {:>8} {:>16} {:>14.6e} {:>8.3}\n",
                    r.side, r.pixels, r.analytic_flops, r.wall_median_seconds, r.wall_spread
                ));
            }
            s.push_str(&format!(
                "analytic slope {:.4}\nwall-time slope {:.4}\n",
                report.analytic_slope, report.wall_time_slope
            ));
            if let Some(note) = &report.note {
                s.push_str(&format!("warning: {note}\n"));
            }
            s
        }
    })
}

fn train(args: &TrainArgs) -> Result<()> {
    let spec = ToySpec {
        input_size: args.size,
        in_channels: 3,
        width: args.width,
        n_heads: args.heads,
        gsa_blocks: args.blocks,
        num_classes: args.classes,
        zero_init_head: true,
    };
    spec.validate().map_err(usage_from)?;
    let data =
        synthetic_dataset(&spec, args.per_class, args.noise, args.seed).map_err(usage_from)?;
    let mut model = ToyModel::init(&spec, args.seed)?;
    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        momentum: args.momentum,
    };
    let report = train_toy(&mut model, &data, &cfg)?;
    emit(&report.to_csv(), args.output.as_deref())?;
    eprintln!(
        "initial loss {:.6}, final loss {:.6}",
        report.initial_loss(),
        report.final_loss()
    );
    Ok(())
}

fn build(model: &ModelArg, seed: u64, output: &Path) -> Result<()> {
    let (_, spec) = load_spec(model.preset.as_deref(), model.spec.as_deref())?;
    let m = build_model(&spec, seed).map_err(usage_from)?;
    let bundle = m.to_bundle();
    bundle.save(output)?;
    fs::write(output.join("spec.json"), spec.to_json())?;
    eprintln!(
        "wrote {} tensors ({} scalars) to {}",
        bundle.len(),
        bundle.scalar_count(),
        output.display()
    );
    Ok(())
}

fn tensor(action: &TensorCommand) -> Result<()> {
    match action {
        TensorCommand::Info { path } => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let h = gsat::decode_header(&bytes)?;
            let numel: usize = h.shape.iter().product();
            println!(
                "dtype {}\nrank {}\nshape {:?}\nelements {numel}",
                h.dtype.name(),
                h.shape.len(),
                h.shape
            );
        }
        TensorCommand::Cat { path, limit } => {
            let (t, dtype) =
                gsat::read_file(path).with_context(|| format!("reading {}", path.display()))?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "# {} {:?}", dtype.name(), t.shape())?;
            let row = t.shape().last().copied().unwrap_or(1).max(1);
            let take = limit.unwrap_or(usize::MAX).min(t.numel());
            for chunk in t.data()[..take].chunks(row) {
                let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match &cli.command {
        Command::Describe { model, format } => describe(model, *format)?,
        Command::Count { models, format } => count(models, *format)?,
        Command::Verify {
            suite,
            seed,
            cases,
            output,
        } => return verify(*suite, *seed, *cases, output.as_deref()),
        Command::Bench {
            kernel,
            sizes,
            reps,
            format,
        } => {
            let report = scaling_benchmark(*kernel, sizes, *reps, cli.threads.unwrap_or(1))
                .map_err(usage_from)?;
            emit(&bench_text(&report, *format)?, None)?;
        }
        Command::TrainToy(args) => train(args)?,
        Command::Build {
            model,
            seed,
            output,
        } => build(model, *seed, output)?,
        Command::Tensor { action } => tensor(action)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
