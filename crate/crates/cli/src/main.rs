//! `horst` command-line tool.
//!
//! Errors are printed to stderr as one line, `error kind=<kind> message="..."`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use horst::cost::{attention_complexity, count_params_mulops};
use horst::data::{
    generate_split, read_split, write_split, SequenceSample, Split, TaskMode, TaskSpec,
};
use horst::export::{export_attention, layer_traces};
use horst::layer::{st_att, AttentionMode, LayerConfig};
use horst::network::{Network, NetworkConfig};
use horst::train::{evaluate, grad_check_fixture, network_grad_check, train_with, TrainConfig};
use horst::{Graph, HorstError, Tensor, Var};

const TRAIN_FILE: &str = "train.split";
const TEST_FILE: &str = "test.split";
const GRAD_TOLERANCE: f64 = 1e-4;

/// Contents of the JSON file passed with `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    task: TaskSpec,
    network: Option<NetworkConfig>,
    #[serde(default)]
    train: TrainConfig,
    /// Seed for parameter initialization.
    #[serde(default)]
    init_seed: u64,
}

#[derive(Parser)]
#[command(
    name = "horst",
    version,
    about = "Recurrent space-time attention on synthetic video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test splits from the task section of a config.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        task: TaskOverrides,
        /// Output directory for train.split and test.split.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        task: TaskOverrides,
        /// Directory holding train.split; generated from the task when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss curve as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        train_seed: Option<u64>,
        #[arg(long)]
        init_seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        task: TaskOverrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding test.split; generated from the task when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Write the metric report as CSV instead of printing it.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Export attention weights of one test sequence.
    DumpAttn {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        task: TaskOverrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the test sample to run.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Directory receiving a new run_NNN subdirectory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-transformation parameter and multiply counts of one layer.
    CountOps {
        #[arg(long)]
        cin: usize,
        #[arg(long)]
        cout: usize,
        /// Working height and width.
        #[arg(long)]
        hw: usize,
        #[arg(long)]
        order: usize,
    },
    /// Time the attention kernel of every mode.
    BenchAttn {
        #[arg(long, default_value_t = 14)]
        hw: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        order: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Check the full backward pass of a small network against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-8)]
        epsilon: f64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TaskOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    observe_fraction: Option<f64>,
    #[arg(long)]
    tau_a: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EarlyRecognition,
    Anticipation,
}

/// Error with its exit class.
struct Failure {
    usage: bool,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            usage: true,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<HorstError> for Failure {
    fn from(e: HorstError) -> Self {
        let (usage, kind) = match &e {
            HorstError::Config(_) => (true, "config"),
            HorstError::Shape { .. } => (false, "shape"),
            HorstError::LabelOutOfRange { .. } => (false, "label"),
            HorstError::NonFinite { .. } => (false, "non_finite"),
            HorstError::Parse { .. } => (false, "parse"),
            HorstError::Graph(_) => (false, "graph"),
            HorstError::Io { .. } => (false, "io"),
        };
        Failure {
            usage,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(args: &ConfigArgs, task: &TaskOverrides) -> CliResult<RunConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| Failure {
        usage: true,
        kind: "config",
        message: format!("cannot read {}: {e}", args.config.display()),
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Failure {
        usage: true,
        kind: "config",
        message: format!("{}: {e}", args.config.display()),
    })?;
    let t = &mut cfg.task;
    if let Some(v) = task.seed {
        t.seed = v;
    }
    if let Some(v) = task.mode {
        t.mode = match v {
            ModeArg::EarlyRecognition => TaskMode::EarlyRecognition,
            ModeArg::Anticipation => TaskMode::Anticipation,
        };
    }
    if let Some(v) = task.train_samples {
        t.train_samples = v;
    }
    if let Some(v) = task.test_samples {
        t.test_samples = v;
    }
    if let Some(v) = task.noise_std {
        t.noise_std = v;
    }
    if let Some(v) = task.observe_fraction {
        t.observe_fraction = v;
    }
    if let Some(v) = task.tau_a {
        t.tau_a = v;
    }
    cfg.task.validate()?;
    cfg.train.validate()?;
    if let Some(n) = &cfg.network {
        n.validate()?;
    }
    Ok(cfg)
}

fn network_config(cfg: &RunConfig) -> CliResult<NetworkConfig> {
    cfg.network
        .clone()
        .ok_or_else(|| Failure::usage("config has no `network` section"))
}

fn load_split(
    cfg: &RunConfig,
    data: Option<&Path>,
    split: Split,
) -> CliResult<Vec<SequenceSample>> {
    match data {
        Some(dir) => {
            let name = match split {
                Split::Train => TRAIN_FILE,
                Split::Test => TEST_FILE,
            };
            Ok(read_split(&dir.join(name))?.1)
        }
        None => Ok(generate_split(&cfg.task, split)?),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        Failure::from(HorstError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { config, task, out } => {
            let cfg = load_config(&config, &task)?;
            fs::create_dir_all(&out).map_err(|e| {
                Failure::from(HorstError::Io {
                    path: out.clone(),
                    source: e,
                })
            })?;
            for (split, name) in [(Split::Train, TRAIN_FILE), (Split::Test, TEST_FILE)] {
                let samples = generate_split(&cfg.task, split)?;
                let path = out.join(name);
                write_split(&path, &cfg.task, &samples)?;
                println!("wrote {} samples to {}", samples.len(), path.display());
            }
        }
        Command::Train {
            config,
            task,
            data,
            out,
            loss_csv,
            epochs,
            lr,
            batch_size,
            weight_decay,
            train_seed,
            init_seed,
        } => {
            let mut cfg = load_config(&config, &task)?;
            let tc = &mut cfg.train;
            if let Some(v) = epochs {
                tc.epochs = v;
            }
            if let Some(v) = lr {
                tc.learning_rate = v;
            }
            if let Some(v) = batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = weight_decay {
                tc.weight_decay = v;
            }
            if let Some(v) = train_seed {
                tc.seed = v;
            }
            if let Some(v) = init_seed {
                cfg.init_seed = v;
            }
            cfg.train.validate()?;
            let net_cfg = network_config(&cfg)?;
            let samples = load_split(&cfg, data.as_deref(), Split::Train)?;
            let mut net = Network::new(net_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.init_seed))?;
            let start = Instant::now();
            let curve = train_with(&mut net, &samples, &cfg.train, |e| {
                println!(
                    "epoch {} mean_loss {:.6} lr {} elapsed {:.1}s",
                    e.epoch,
                    e.mean_loss,
                    e.learning_rate,
                    start.elapsed().as_secs_f64()
                );
            })?;
            net.save(&out)?;
            if let Some(path) = loss_csv {
                write_text(&path, &curve.to_csv())?;
            }
            println!("saved {}", out.display());
        }
        Command::Eval {
            config,
            task,
            checkpoint,
            data,
            k,
            metrics_csv,
            workers,
        } => {
            let cfg = load_config(&config, &task)?;
            let net = Network::load(&checkpoint)?;
            let samples = load_split(&cfg, data.as_deref(), Split::Test)?;
            let k = k.min(net.config.num_actions);
            let report = if workers > 1 {
                horst::train::evaluate_sharded(&net, &samples, k, cfg.train.target, workers)?
            } else {
                evaluate(&net, &samples, k, cfg.train.target)?
            };
            match metrics_csv {
                Some(path) => {
                    write_text(&path, &report.to_csv())?;
                    println!("top1 {:.4} top{k} {:.4}", report.top1, report.topk);
                }
                None => print!("{}", report.to_csv()),
            }
        }
        Command::DumpAttn {
            config,
            task,
            checkpoint,
            sample,
            out,
        } => {
            let cfg = load_config(&config, &task)?;
            let net = Network::load(&checkpoint)?;
            let samples = generate_split(
                &TaskSpec {
                    test_samples: sample + 1,
                    ..cfg.task.clone()
                },
                Split::Test,
            )?;
            let preds = net.forward_sequence(&samples[sample].frames)?;
            let orders: Vec<usize> = net.config.layers.iter().map(|l| l.order).collect();
            let run = export_attention(&out, &layer_traces(&preds, &orders)?)?;
            println!("{}", run.display());
        }
        Command::CountOps {
            cin,
            cout,
            hw,
            order,
        } => {
            let report = count_params_mulops(&LayerConfig::new(cin, cout, order), hw, hw)?;
            print!("{}", report.to_text());
            let t = attention_complexity(hw, hw, cin, order)?;
            let joint = if t.joint_saturated {
                "saturated".to_string()
            } else {
                t.joint.to_string()
            };
            println!(
                "attention complexity: joint {joint}, full_temporal {}, decomposed {}",
                t.full_temporal, t.decomposed
            );
        }
        Command::BenchAttn {
            hw,
            channels,
            order,
            iters,
            warmup,
        } => {
            if hw == 0 || channels == 0 || order == 0 || iters == 0 {
                return Err(Failure::usage("hw, channels, order and iters must be >= 1"));
            }
            let timings =
                std::thread::spawn(move || bench_attention(hw, channels, order, iters, warmup))
                    .join()
                    .map_err(|_| Failure {
                        usage: false,
                        kind: "runtime",
                        message: "benchmark thread panicked".into(),
                    })??;
            println!("mode,mean_us");
            for (mode, t) in timings {
                println!("{},{:.1}", mode.name(), t.as_secs_f64() * 1e6);
            }
        }
        Command::GradCheck { seed, epsilon } => {
            if epsilon.is_nan() || epsilon <= 0.0 {
                return Err(Failure::usage("epsilon must be > 0"));
            }
            let (net, sample) = grad_check_fixture(seed)?;
            let report = network_grad_check(&net, &sample, &TrainConfig::default(), epsilon)?;
            let names = net.named_tensors();
            println!(
                "max_rel_error {:e} at {}[{}] analytic {:e} numeric {:e} entries {}",
                report.max_rel_error,
                names[report.worst.0].0,
                report.worst.1,
                report.analytic,
                report.numeric,
                report.entries
            );
            if report.max_rel_error > GRAD_TOLERANCE {
                return Err(Failure {
                    usage: false,
                    kind: "grad_check",
                    message: format!(
                        "max relative error {:e} exceeds {GRAD_TOLERANCE:e}",
                        report.max_rel_error
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Mean time per `st_att` call with a full queue, per mode.
fn bench_attention(
    hw: usize,
    c: usize,
    order: usize,
    iters: usize,
    warmup: usize,
) -> CliResult<Vec<(AttentionMode, Duration)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [c, hw, hw];
    let q = Tensor::uniform(&shape, 1.0, &mut rng);
    let keys: Vec<Tensor> = (0..order)
        .map(|_| Tensor::uniform(&shape, 1.0, &mut rng))
        .collect();
    let values: Vec<Tensor> = (0..order)
        .map(|_| Tensor::uniform(&shape, 1.0, &mut rng))
        .collect();
    let tq = Tensor::uniform(&[1, 2, 3, 3], 0.1, &mut rng);
    let tk = Tensor::uniform(&[1, 2, 3, 3], 0.1, &mut rng);
    let mut out = Vec::new();
    for mode in AttentionMode::ALL {
        let once = || -> CliResult<()> {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let kv: Vec<Var> = keys.iter().map(|k| g.constant(k.clone())).collect();
            let vv: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
            let (a, b) = (g.constant(tq.clone()), g.constant(tk.clone()));
            st_att(&mut g, qv, &kv, &vv, a, b, mode, 0)?;
            Ok(())
        };
        for _ in 0..warmup {
            once()?;
        }
        let start = Instant::now();
        for _ in 0..iters {
            once()?;
        }
        out.push((mode, start.elapsed() / iters as u32));
    }
    Ok(out)
}

fn print_error(kind: &str, message: &str) {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} message={:?}", flat);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            print_error("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            print_error(f.kind, &f.message);
            ExitCode::from(if f.usage { 2 } else { 1 })
        }
    }
}
