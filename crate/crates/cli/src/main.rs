use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use circnet::bench::{self, BenchReport};
use circnet::config::RunConfig;
use circnet::gradcheck::{self, GradcheckOptions};
use circnet::nn::{Linear, Network};
use circnet::optim::{self, TrainData};
use circnet::{data, model, Error};
use clap::{Parser, Subcommand};
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CORRUPT: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "circnet",
    version,
    about = "Circulant-projection neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Use only this fraction of the training set.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Report the error rate and confusion counts of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Time dense against circulant training steps.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::Label { .. } => {
                EXIT_USAGE
            }
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::Checksum { .. } => EXIT_CORRUPT,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid usage");
            let line = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: {line}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            train_fraction,
        } => cmd_train(&config, train_fraction),
        Command::Eval {
            model,
            images,
            labels,
        } => cmd_eval(&model, &images, &labels),
        Command::Bench {
            dims,
            reps,
            warmup,
            csv,
            seed,
        } => cmd_bench(&dims, reps, warmup, csv.as_deref(), seed),
        Command::Gradcheck {
            seed,
            sizes,
            corrupt_gradient,
        } => cmd_gradcheck(seed, sizes, corrupt_gradient),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message: Vec<&str> = f.message.split_whitespace().collect();
            eprintln!("error: {}", message.join(" "));
            ExitCode::from(f.code)
        }
    }
}

fn eval_threads() -> Result<usize, Failure> {
    match std::env::var("CIRCNET_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::new(
                EXIT_USAGE,
                format!("CIRCNET_THREADS must be a positive integer, got {v:?}"),
            )),
        },
    }
}

fn layer_summary(net: &Network) -> Vec<serde_json::Value> {
    net.stages()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (floats, sign_bits) = s.linear.param_count();
            let kind = match &s.linear {
                Linear::Dense(_) => "dense",
                Linear::Circulant(l) if l.signs().is_flipping() => "circulant",
                Linear::Circulant(_) => "circulant-no-flip",
            };
            json!({
                "layer": i,
                "kind": kind,
                "d_in": s.linear.d_in(),
                "k_out": s.linear.k_out(),
                "activation": s.activation.name(),
                "frozen": s.linear.is_frozen(),
                "floats": floats,
                "sign_bits": sign_bits,
            })
        })
        .collect()
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn cmd_train(config: &Path, train_fraction: Option<f64>) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(f) = train_fraction {
        cfg.train.train_fraction = f;
    }
    let mut net = cfg.build_network()?;
    let data = cfg.load_data()?;
    println!(
        "network {}; {} train, {} val, {} test samples",
        net,
        data.train.len(),
        data.val.as_ref().map_or(0, |d| d.len()),
        data.test.as_ref().map_or(0, |d| d.len())
    );
    let metrics = optim::train(
        &mut net,
        TrainData {
            train: &data.train,
            val: data.val.as_ref(),
            test: None,
        },
        &cfg.train,
        |report| println!("{report}"),
    )?;

    let (test_error, test_time) = match &data.test {
        Some(test) => {
            let t0 = Instant::now();
            let err = optim::evaluate(&net, test)?;
            (Some(err), Some(t0.elapsed().as_secs_f64()))
        }
        None => (None, None),
    };
    write_file(&cfg.model_path, &model::to_bytes(&net))?;

    let total_floats = net.total_floats();
    let report = json!({
        "train_error": metrics.train_error,
        "val_error": metrics.val_error,
        "test_error": test_error,
        "param_floats": total_floats,
        "param_memory_mb": (total_floats * 8) as f64 / (1024.0 * 1024.0),
        "test_time_s": test_time,
        "train_time_s": metrics.wall_time,
        "n_train": metrics.n_train,
        "train_fraction": cfg.train.train_fraction,
        "steps": metrics.steps,
        "final_learning_rate": metrics.final_learning_rate,
        "loss_curve": metrics.loss_curve,
        "layers": layer_summary(&net),
        "model": cfg.model_path,
    });
    let text = serde_json::to_string_pretty(&report).expect("metrics serialize");
    write_file(&cfg.metrics_path, text.as_bytes())?;

    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |e| format!("{:.4}", e));
    println!(
        "train_error {:.4} test_error {} params {} time {:.2}s",
        metrics.train_error,
        pct(test_error),
        total_floats,
        metrics.wall_time
    );
    println!("model {}", cfg.model_path.display());
    println!("metrics {}", cfg.metrics_path.display());
    Ok(())
}

fn cmd_eval(model_path: &Path, images: &Path, labels: &Path) -> CmdResult {
    let threads = eval_threads()?;
    let net = model::load(model_path).map_err(|e| match e {
        Error::Io { .. } => Failure::from(e),
        other => Failure::new(EXIT_CORRUPT, format!("{}: {other}", model_path.display())),
    })?;
    let ds = data::load_idx(images, labels)?;
    if ds.dim() != net.input_dim() {
        return Err(Failure::new(
            EXIT_USAGE,
            format!(
                "model expects {} inputs but the images have {}",
                net.input_dim(),
                ds.dim()
            ),
        ));
    }
    if ds.classes() > net.classes() {
        return Err(Failure::new(
            EXIT_USAGE,
            format!(
                "model has {} classes but the labels go up to {}",
                net.classes(),
                ds.classes() - 1
            ),
        ));
    }
    let t0 = Instant::now();
    let confusion = optim::confusion_matrix(&net, &ds, threads)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let wrong: usize = confusion
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .filter(|&(p, _)| p != t)
                .map(|(_, c)| c)
                .sum::<usize>()
        })
        .sum();

    let mut out = String::new();
    let _ = writeln!(
        out,
        "error {:.6} ({wrong}/{})",
        wrong as f64 / ds.len() as f64,
        ds.len()
    );
    let _ = writeln!(out, "time {elapsed:.3}s threads {threads}");
    let _ = writeln!(out, "confusion (rows true, columns predicted)");
    for (t, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        let _ = writeln!(out, "{t:>3} {}", cells.join(""));
    }
    print!("{out}");
    Ok(())
}

fn cmd_bench(
    dims: &[usize],
    reps: usize,
    warmup: usize,
    csv: Option<&Path>,
    seed: u64,
) -> CmdResult {
    let report: BenchReport = bench::bench_sweep(dims, reps, warmup, seed)?;
    println!("{}", report.to_table());
    if let Some(path) = csv {
        write_file(path, report.to_csv().as_bytes())?;
        println!("csv {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, sizes: Vec<usize>, corrupt_gradient: bool) -> CmdResult {
    let mut opts = GradcheckOptions {
        seed,
        corrupt_gradient,
        ..Default::default()
    };
    if !sizes.is_empty() {
        opts.sizes = sizes;
    }
    let report = gradcheck::run(&opts)?;
    println!("{report}");
    if report.passed() {
        return Ok(());
    }
    let offenders: Vec<String> = report
        .offenders()
        .iter()
        .map(|c| format!("{} ({:.3e})", c.name, c.max_rel_error))
        .collect();
    Err(Failure::new(
        EXIT_GRADCHECK,
        format!(
            "{} gradient checks exceed {:e}: {}",
            offenders.len(),
            report.tolerance,
            offenders.join(", ")
        ),
    ))
}
