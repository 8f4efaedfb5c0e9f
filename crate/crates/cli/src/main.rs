//! `hydramamba` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures. The resolved configuration of every run is written to
//! stderr as `# key = value` lines before any output.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hydramamba::gradsuite::{run_suite, SuiteLevel};
use hydramamba::model::{
    ablate, accuracy, rows_tsv, summarize, summary_tsv, train_toy, AblationCell, AblationGrid, Model, ModelConfig,
    OrderStrategy, ToyKind, ToyTask, TrainConfig,
};
use hydramamba::pointio::load_xyz;
use hydramamba::spacefill::{all_variants, locality_trial, serialize, AxisPriority, Curve, CurveVariant, DEFAULT_BITS};
use hydramamba::sscan::{normwise_rel_error, selective_scan_par, selective_scan_seq, ScanParams};
use hydramamba::{par, Error};

#[derive(Parser, Debug)]
#[command(
    name = "hydramamba",
    version,
    about = "Point-cloud selective state-space models on space-filling curves"
)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write results here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel paths (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the curve order of a point file, one input index per line.
    Serialize {
        #[arg(long, default_value = "hilbert")]
        curve: Curve,
        #[arg(long, default_value = "xyz")]
        priority: AxisPriority,
        #[arg(long, default_value_t = DEFAULT_BITS)]
        bits: u32,
        input: PathBuf,
    },
    /// Mean consecutive-neighbor distance per curve variant on random clouds.
    LocalityBench {
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_BITS)]
        bits: u32,
    },
    /// Time the sequential and chunk-parallel scans and compare their outputs.
    ScanBench {
        #[arg(long, value_delimiter = ',', default_value = "4096")]
        len: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, value_delimiter = ',', default_value = "64")]
        chunk: Vec<usize>,
        /// Timed repetitions; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Train on the synthetic shape task, one JSON line per epoch.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Save the best-epoch model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the synthetic test split or classify files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Point files to classify instead of the test split.
        inputs: Vec<PathBuf>,
    },
    /// Train every cell of an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "shuffle,sequential,none")]
        strategies: Vec<OrderStrategy>,
        #[arg(long, value_delimiter = ',', default_value = "true,false")]
        bidirectional: Vec<bool>,
        #[arg(long, value_delimiter = ',', default_value = "true,false")]
        conv: Vec<bool>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,6,12")]
        heads: Vec<usize>,
        /// Also write the per-cell summary table here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable piece.
    Gradcheck {
        /// `components`, or `tiny` to add the tiny full models.
        #[arg(long, default_value = "tiny")]
        config: SuiteLevel,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named model preset: toy, tiny or tiny-seg.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override one config key, e.g. `--set heads=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig, Error> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ModelConfig::load(path)?,
            (None, Some(name)) => ModelConfig::preset(name)?,
            (None, None) => ModelConfig::toy(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TaskArgs {
    /// `shapes` (sphere, cube, torus, planes) or `grouping` (local point arrangements).
    #[arg(long, default_value = "shapes")]
    task: ToyKind,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 25)]
    test_per_class: usize,
    /// Randomly rotate every cloud.
    #[arg(long)]
    rotate: bool,
    #[arg(long, default_value_t = 0.0)]
    anisotropy: f64,
}

impl TaskArgs {
    fn resolve(&self, seed: u64) -> ToyTask {
        ToyTask {
            kind: self.task,
            n_points: self.points,
            noise_sigma: self.noise,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed,
            rotate: self.rotate,
            anisotropy: self.anisotropy,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Stop once test accuracy reaches this value.
    #[arg(long)]
    target_acc: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            target_accuracy: self.target_acc,
            ..TrainConfig::default()
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn echo(key: &str, value: impl std::fmt::Display) {
    eprintln!("# {key} = {value}");
}

fn echo_kv(text: &str) {
    for line in text.lines() {
        eprintln!("# {line}");
    }
}

fn echo_task(t: &ToyTask) {
    echo("task", t.kind);
    echo("points", t.n_points);
    echo("noise", t.noise_sigma);
    echo("train_per_class", t.train_per_class);
    echo("test_per_class", t.test_per_class);
    echo("rotate", t.rotate);
    echo("anisotropy", t.anisotropy);
}

fn echo_train(t: &TrainConfig) {
    echo("epochs", t.epochs);
    echo("batch_size", t.batch_size);
    echo("lr", t.lr);
    echo("weight_decay", t.weight_decay);
    if let Some(a) = t.target_accuracy {
        echo("target_acc", a);
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write + Send>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    echo("seed", cli.seed);
    echo("threads", cli.threads);
    if let Some(p) = &cli.out {
        echo("out", p.display());
    }
    let seed = cli.seed;
    let mut out = output(&cli.out)?;
    match cli.command {
        Command::Serialize {
            curve,
            priority,
            bits,
            input,
        } => {
            echo("command", "serialize");
            echo("curve", curve);
            echo("priority", priority);
            echo("bits", bits);
            echo("input", input.display());
            let pc = load_xyz(&input)?;
            let s = serialize(&pc, CurveVariant::new(curve, priority), bits)?;
            for i in s.perm {
                writeln!(out, "{i}")?;
            }
        }
        Command::LocalityBench { n, trials, bits } => {
            echo("command", "locality-bench");
            echo("n", n);
            echo("trials", trials);
            echo("bits", bits);
            if n < 2 || trials == 0 {
                return Err(Failure::Usage("locality-bench needs --n >= 2 and --trials >= 1".into()));
            }
            let variants = all_variants();
            write!(out, "trial\tseed\thilbert\tzorder")?;
            for v in &variants {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
            let results = par::with_threads(cli.threads, || {
                par::map_range(trials, |t| locality_trial(n, seed.wrapping_add(t as u64), bits))
            });
            let mut wins = 0;
            for (t, r) in results.into_iter().enumerate() {
                let r = r?;
                wins += usize::from(r.hilbert_wins());
                write!(
                    out,
                    "{t}\t{}\t{:.6}\t{:.6}",
                    r.seed,
                    r.curve_mean(Curve::Hilbert),
                    r.curve_mean(Curve::Zorder)
                )?;
                for (_, d) in &r.distances {
                    write!(out, "\t{d:.6}")?;
                }
                writeln!(out)?;
            }
            eprintln!("# hilbert_wins = {wins}/{trials}");
        }
        Command::ScanBench {
            len,
            dim,
            state,
            chunk,
            reps,
        } => {
            echo("command", "scan-bench");
            echo("dim", dim);
            echo("state", state);
            echo("reps", reps);
            if len.contains(&0) || chunk.contains(&0) || dim == 0 || state == 0 || reps == 0 {
                return Err(Failure::Usage("scan-bench sizes must be positive".into()));
            }
            writeln!(
                out,
                "len\tdim\tstate\tchunk\tthreads\tseq_ms\tpar_ms\tseq_tokens_per_s\tpar_tokens_per_s\trel_err"
            )?;
            for &l in &len {
                let p = ScanParams::random(l, dim, state, seed)?;
                let (seq_ms, y_seq) = best_of(reps, || Ok(selective_scan_seq(&p)))?;
                for &c in &chunk {
                    let (par_ms, y_par) =
                        par::with_threads(cli.threads, || best_of(reps, || selective_scan_par(&p, c)))?;
                    let err = normwise_rel_error(y_seq.data(), y_par.data());
                    let threads = par::with_threads(cli.threads, par::current_threads);
                    let tps = |ms: f64| l as f64 / (ms / 1e3).max(1e-12);
                    writeln!(
                        out,
                        "{l}\t{dim}\t{state}\t{c}\t{threads}\t{seq_ms:.4}\t{par_ms:.4}\t{:.0}\t{:.0}\t{err:.3e}",
                        tps(seq_ms),
                        tps(par_ms)
                    )?;
                }
            }
        }
        Command::TrainToy {
            model,
            task,
            train,
            checkpoint,
        } => {
            echo("command", "train-toy");
            let cfg = model.resolve()?;
            let task = task.resolve(seed);
            let tc = train.resolve(seed);
            echo_kv(&cfg.to_kv());
            echo_task(&task);
            echo_train(&tc);
            let (train_set, test_set) = task.split()?;
            let mut m = Model::new(cfg, seed)?;
            echo("params", m.num_params());
            let start = Instant::now();
            let mut write_err = None;
            let report = par::with_threads(cli.threads, || {
                train_toy(&mut m, &train_set, &test_set, &tc, &mut |e| {
                    let mut line = serde_json::to_value(e).expect("metrics serialize");
                    line["elapsed_s"] = serde_json::json!(start.elapsed().as_secs_f64());
                    if let Err(err) = writeln!(out, "{line}").and_then(|_| out.flush()) {
                        write_err.get_or_insert(err);
                    }
                })
            })?;
            if let Some(err) = write_err {
                return Err(err.into());
            }
            eprintln!(
                "# best_epoch = {}\n# best_test_acc = {}",
                report.best_epoch, report.best_test_acc
            );
            if let Some(path) = checkpoint {
                m.store.values_mut().clone_from_slice(&report.best_params);
                m.save(&path)?;
                echo("checkpoint", path.display());
            }
        }
        Command::Eval {
            checkpoint,
            task,
            inputs,
        } => {
            echo("command", "eval");
            echo("checkpoint", checkpoint.display());
            let m = Model::load(&checkpoint)?;
            echo_kv(&m.config().to_kv());
            if inputs.is_empty() {
                let task = task.resolve(seed);
                echo_task(&task);
                let (_, test) = task.split()?;
                let acc = par::with_threads(cli.threads, || accuracy(&m, &test))?;
                writeln!(out, "{}", serde_json::json!({ "test_acc": acc, "clouds": test.len() }))?;
            } else {
                writeln!(out, "input\tprediction")?;
                for path in &inputs {
                    let pc = load_xyz(path)?;
                    let labels = m.classify(&pc)?;
                    let shown: Vec<String> = labels.iter().map(usize::to_string).collect();
                    writeln!(out, "{}\t{}", path.display(), shown.join(","))?;
                }
            }
        }
        Command::Ablate {
            model,
            task,
            train,
            seeds,
            strategies,
            bidirectional,
            conv,
            heads,
            summary,
        } => {
            echo("command", "ablate");
            let base = model.resolve()?;
            let task = task.resolve(seed);
            let tc = train.resolve(seed);
            echo_kv(&base.to_kv());
            echo_task(&task);
            echo_train(&tc);
            let join = |v: Vec<String>| v.join(",");
            echo("seeds", join(seeds.iter().map(u64::to_string).collect()));
            echo("strategies", join(strategies.iter().map(ToString::to_string).collect()));
            echo(
                "bidirectional",
                join(bidirectional.iter().map(ToString::to_string).collect()),
            );
            echo("conv", join(conv.iter().map(ToString::to_string).collect()));
            echo("heads", join(heads.iter().map(usize::to_string).collect()));
            let grid = AblationGrid {
                strategies,
                bidirectional,
                conv_branch: conv,
                heads,
            };
            let cells: Vec<AblationCell> = grid.cells();
            if cells.is_empty() || seeds.is_empty() {
                return Err(Failure::Usage("ablation grid is empty".into()));
            }
            let rows = par::with_threads(cli.threads, || {
                ablate(&base, &cells, &seeds, &task, &tc, &mut |r| {
                    eprintln!("# done {} seed {}", r.cell, r.seed);
                })
            });
            write!(out, "{}", rows_tsv(&rows))?;
            let table = summary_tsv(&summarize(&rows));
            match summary {
                Some(path) => std::fs::write(path, &table)?,
                None => {
                    writeln!(out)?;
                    write!(out, "{table}")?;
                }
            }
        }
        Command::Gradcheck { config } => {
            echo("command", "gradcheck");
            echo("config", format!("{config:?}").to_lowercase());
            let entries = par::with_threads(cli.threads, || run_suite(config, seed))?;
            writeln!(out, "op\tmax_rel_error\tpass")?;
            let mut failed = Vec::new();
            for e in &entries {
                writeln!(out, "{}\t{:.3e}\t{}", e.name, e.report.max_rel_error(), e.passed())?;
                if !e.passed() {
                    failed.push(e.name);
                }
            }
            out.flush()?;
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Run `f` `reps` times; return the fastest time in milliseconds and the last result.
fn best_of<T>(reps: usize, mut f: impl FnMut() -> Result<T, Error>) -> Result<(f64, T), Error> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..reps {
        let t = Instant::now();
        let y = f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
        last = Some(y);
    }
    Ok((best, last.expect("reps >= 1")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `hydramamba --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
