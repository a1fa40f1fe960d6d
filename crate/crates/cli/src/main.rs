mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use maskrdt::bench::{self, BenchConfig, BenchMode, TrackingAllocator};
use maskrdt::checkpoint;
use maskrdt::metrics::{topk_metrics, write_report};
use maskrdt::model::ModelPolicy;
use maskrdt::retention::RetentionMode;
use maskrdt::simulator::{read_items, write_items, OraclePolicy, Simulator, UniformPolicy};
use maskrdt::training::{Trainer, METRICS_HEADER};
use maskrdt::trajectory::{read_dataset, write_dataset, DatasetHeader};

use config::RunConfig;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

/// Exit status when training diverges.
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "maskrdt",
    version,
    about = "Retentive decision transformer for sequential recommendation"
)]
struct Cli {
    /// TOML run configuration; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the simulator, data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the scripted expert and write a trajectory dataset plus item table.
    GenData(GenDataArgs),
    /// Train a model on a trajectory dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint online in the simulator or offline on logged data.
    Eval(EvalArgs),
    /// Time retention modes against softmax attention.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Item-embedding sidecar output path.
    #[arg(long)]
    items: Option<PathBuf>,
    /// Number of episodes to record.
    #[arg(long)]
    episodes: Option<usize>,
    /// Expert exploration rate.
    #[arg(long)]
    eps: Option<f64>,
    /// Steps per episode.
    #[arg(long)]
    episode_len: Option<usize>,
    /// Number of items.
    #[arg(long)]
    catalog: Option<usize>,
    /// Observable state dimension.
    #[arg(long)]
    state_dim: Option<usize>,
    /// Preference drift per recommendation.
    #[arg(long)]
    drift: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Trajectory dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint; `--steps` is the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the action loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Global gradient-norm ceiling (0 disables).
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Metrics row interval.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Always expose the full context instead of sampling the exposed length.
    #[arg(long)]
    no_adaptive_mask: bool,
    /// Retention evaluation order: recurrent, parallel or chunkwise.
    #[arg(long)]
    mode: Option<RetentionMode>,
    /// Hidden width.
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Number of blocks.
    #[arg(long)]
    layers: Option<usize>,
    /// Context length in timesteps.
    #[arg(long)]
    context: Option<usize>,
    /// Chunk length for chunkwise retention.
    #[arg(long)]
    seg_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
#[group(skip)]
#[command(group(ArgGroup::new("kind").required(true).args(["online", "offline"])))]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Roll the greedy policy out in the simulator and report CTR.
    #[arg(long)]
    online: bool,
    /// Rank logged actions of a dataset and report recall/precision/nDCG.
    #[arg(long)]
    offline: bool,
    /// Item table for online evaluation.
    #[arg(long)]
    items: Option<PathBuf>,
    /// Dataset for offline evaluation.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Online episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Ranking cutoff.
    #[arg(long)]
    k: Option<usize>,
    /// Return the policy is conditioned on.
    #[arg(long)]
    target_return: Option<f64>,
    /// Sample actions from the softmax instead of taking the argmax.
    #[arg(long)]
    sample: bool,
    /// Override the retention evaluation order stored in the checkpoint.
    #[arg(long)]
    mode: Option<RetentionMode>,
    /// Report CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    lengths: Vec<usize>,
    /// Modes to time: parallel, chunkwise, recurrent, attention.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "parallel,chunkwise,recurrent,attention"
    )]
    modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Chunk length for chunkwise retention.
    #[arg(long, default_value_t = 64)]
    seg_len: usize,
    /// Repetitions per measurement (median reported).
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Time forward plus backward.
    #[arg(long)]
    backward: bool,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn setup_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MASKRDT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("MASKRDT_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("MASKRDT_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> anyhow::Result<()> {
    if let Some(v) = a.out {
        cfg.paths.data = v;
    }
    if let Some(v) = a.items {
        cfg.paths.items = v;
    }
    if let Some(v) = a.episodes {
        cfg.data.episodes = v;
    }
    if let Some(v) = a.eps {
        cfg.data.eps = v;
    }
    if let Some(v) = a.episode_len {
        cfg.sim.episode_len = v;
    }
    if let Some(v) = a.catalog {
        cfg.sim.catalog = v;
    }
    if let Some(v) = a.state_dim {
        cfg.sim.d_s = v;
    }
    if let Some(v) = a.drift {
        cfg.sim.drift = v;
    }
    cfg.announce();
    if !(0.0..=1.0).contains(&cfg.data.eps) {
        bail!("eps must lie in [0, 1]");
    }
    let sim = Simulator::new(cfg.sim.clone())?;
    if cfg.data.episodes == 0 {
        eprintln!("warning: --episodes 0 writes an empty dataset");
    }
    let roll = sim.rollout(
        &OraclePolicy { eps: cfg.data.eps },
        cfg.data.episodes,
        cfg.sim.seed,
    )?;
    let header = DatasetHeader::new(cfg.sim.d_s, cfg.sim.catalog, cfg.sim.r_max);
    write_dataset(&cfg.paths.data, &header, &roll.trajectories)
        .with_context(|| format!("writing {}", cfg.paths.data.display()))?;
    write_items(&cfg.paths.items, sim.items())
        .with_context(|| format!("writing {}", cfg.paths.items.display()))?;
    println!(
        "wrote {} episodes to {}; oracle ctr {:.4}",
        roll.trajectories.len(),
        cfg.paths.data.display(),
        roll.mean_ctr()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> anyhow::Result<ExitCode> {
    if let Some(v) = a.data {
        cfg.paths.data = v;
    }
    if let Some(v) = a.out {
        cfg.paths.checkpoint = v;
    }
    if let Some(v) = a.metrics {
        cfg.paths.metrics = v;
    }
    let t = &mut cfg.train;
    a.steps.inspect(|&v| t.steps = v);
    a.batch_size.inspect(|&v| t.batch_size = v);
    a.lr.inspect(|&v| t.lr = v);
    a.beta.inspect(|&v| t.beta = v);
    a.grad_clip.inspect(|&v| t.grad_clip = v);
    a.eval_every.inspect(|&v| t.eval_every = v);
    if a.no_adaptive_mask {
        t.adaptive_mask = false;
    }
    let m = &mut cfg.model;
    a.mode.inspect(|&v| m.mode = v);
    a.d_h.inspect(|&v| m.d_h = v);
    a.heads.inspect(|&v| m.heads = v);
    a.layers.inspect(|&v| m.layers = v);
    a.context.inspect(|&v| m.context = v);
    a.seg_len.inspect(|&v| m.seg_len = v);
    a.dropout.inspect(|&v| m.dropout = v);

    let (header, data) = read_dataset(&cfg.paths.data, 1.0)
        .with_context(|| format!("reading dataset {}", cfg.paths.data.display()))?;
    if data.is_empty() {
        bail!("dataset {} has no trajectories", cfg.paths.data.display());
    }
    let longest = data.iter().map(|t| t.len()).max().unwrap_or(1);
    cfg.model.d_s = header.state_dim;
    cfg.model.catalog = header.catalog;
    cfg.model.max_timestep = longest;
    cfg.model.rtg_scale = 1.0 / (longest as f64 * header.r_max);

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if t.model.config.d_s != header.state_dim || t.model.config.catalog != header.catalog {
                bail!("checkpoint does not match dataset dimensions");
            }
            t.train.steps = cfg.train.steps;
            cfg.model = t.model.config.clone();
            cfg.train = t.train.clone();
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    cfg.announce();

    let metrics_file = if a.resume.is_some() && cfg.paths.metrics.exists() {
        OpenOptions::new().append(true).open(&cfg.paths.metrics)?
    } else {
        let mut f = File::create(&cfg.paths.metrics)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let mut metrics = BufWriter::new(metrics_file);
    let every = cfg.train.eval_every;
    let result = trainer.run(&data, Some(&mut metrics), |r| {
        if r.step % (every * 10) == 0 {
            eprintln!(
                "step {:>6}  reward {:.5}  action {:.5}  total {:.5}",
                r.step, r.losses.reward, r.losses.action, r.losses.total
            );
        }
    });
    metrics.flush()?;
    checkpoint::save(&cfg.paths.checkpoint, &trainer)
        .with_context(|| format!("writing checkpoint {}", cfg.paths.checkpoint.display()))?;
    match result {
        Ok(records) => {
            if let Some(last) = records.last() {
                println!(
                    "trained to step {}: loss_reward {} loss_action {} loss_total {}",
                    last.step, last.losses.reward, last.losses.action, last.losses.total
                );
            } else {
                println!("checkpoint already at step {}", trainer.steps_done());
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ maskrdt::Error::Diverged { .. }) => {
            eprintln!(
                "error: {e}; last good parameters saved to {}",
                cfg.paths.checkpoint.display()
            );
            Ok(ExitCode::from(EXIT_DIVERGED))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> anyhow::Result<()> {
    if let Some(v) = a.checkpoint {
        cfg.paths.checkpoint = v;
    }
    if let Some(v) = a.items {
        cfg.paths.items = v;
    }
    if let Some(v) = a.data {
        cfg.paths.data = v;
    }
    if let Some(v) = a.out {
        cfg.paths.report = v;
    }
    a.episodes.inspect(|&v| cfg.eval.episodes = v);
    a.k.inspect(|&v| cfg.eval.k = v);
    if a.target_return.is_some() {
        cfg.eval.target_return = a.target_return;
    }
    if a.sample {
        cfg.eval.sample = true;
    }
    let mut trainer = checkpoint::load(&cfg.paths.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.paths.checkpoint.display()))?;
    if let Some(mode) = a.mode {
        trainer.model.config.mode = mode;
    }
    let model = trainer.model;
    cfg.model = model.config.clone();

    let rows: Vec<(&str, Option<usize>, f64)> = if a.online {
        let items = read_items(&cfg.paths.items)
            .with_context(|| format!("reading items {}", cfg.paths.items.display()))?;
        cfg.sim.catalog = items.len();
        cfg.sim.d_s = items.first().map_or(0, Vec::len);
        if cfg.sim.catalog != model.config.catalog || cfg.sim.d_s != model.config.d_s {
            bail!(
                "checkpoint expects {} items of dim {}, item table has {} of dim {}",
                model.config.catalog,
                model.config.d_s,
                cfg.sim.catalog,
                cfg.sim.d_s
            );
        }
        cfg.announce();
        let sim = Simulator::with_items(cfg.sim.clone(), items)?;
        let target = cfg
            .eval
            .target_return
            .unwrap_or(cfg.sim.r_max * cfg.sim.episode_len as f64);
        let policy = ModelPolicy {
            model: &model,
            target_return: target,
            sample: cfg.eval.sample,
        };
        // evaluation episodes use a stream disjoint from data generation
        let seed = cfg.sim.seed.wrapping_add(1);
        let roll = sim.rollout(&policy, cfg.eval.episodes, seed)?;
        let base = sim.rollout(&UniformPolicy, cfg.eval.episodes, seed)?;
        vec![
            ("ctr", None, roll.mean_ctr()),
            ("ctr_std", None, roll.std_ctr()),
            ("ctr_uniform", None, base.mean_ctr()),
            ("episodes", None, cfg.eval.episodes as f64),
        ]
    } else {
        cfg.announce();
        let (header, data) = read_dataset(&cfg.paths.data, 1.0)
            .with_context(|| format!("reading dataset {}", cfg.paths.data.display()))?;
        if header.catalog != model.config.catalog || header.state_dim != model.config.d_s {
            bail!("checkpoint does not match dataset dimensions");
        }
        let examples = model.ranking_examples(&data, 256)?;
        let m = topk_metrics(&examples, cfg.eval.k)?;
        vec![
            ("recall", Some(m.k), m.recall),
            ("precision", Some(m.k), m.precision),
            ("ndcg", Some(m.k), m.ndcg),
            ("examples", None, examples.len() as f64),
        ]
    };
    write_report(BufWriter::new(File::create(&cfg.paths.report)?), &rows)?;
    write_report(std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn run_bench(cfg: RunConfig, a: BenchArgs) -> anyhow::Result<()> {
    let bc = BenchConfig {
        hidden: a.hidden,
        heads: a.heads,
        seg_len: a.seg_len,
        reps: a.reps,
        backward: a.backward,
        seed: cfg.train.seed,
    };
    eprintln!("# bench {bc:?}");
    let rows = bench::run(&a.lengths, &a.modes, &bc)?;
    let out = a.out.unwrap_or(cfg.paths.bench);
    bench::write_csv(BufWriter::new(File::create(&out)?), &rows)?;
    bench::write_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    setup_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a)?,
        Command::Train(a) => return train(cfg, a),
        Command::Eval(a) => eval(cfg, a)?,
        Command::Bench(a) => run_bench(cfg, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
