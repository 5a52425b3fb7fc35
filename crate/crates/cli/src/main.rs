use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use igdf_core::contrastive::{self, ContrastiveConfig, Encoder};
use igdf_core::data::{Dataset, Domain};
use igdf_core::envs::{Family, Quality};
use igdf_core::filter::{self, FilterConfig};
use igdf_core::harness::{self, ExperimentConfig};
use igdf_core::info::{self, DensityRatioScore, MiGapReport};
use igdf_core::iql::{self, BatchSampler, EvalPolicy, EvalSpec, IqlConfig, IqlNets, SourceMode};
use igdf_core::mdp;
use igdf_core::par::Execution;

/// Info-gap data filtering for cross-domain offline RL.
#[derive(Parser, Debug)]
#[command(name = "igdf", version, about)]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a behaviour dataset from one domain of an environment family.
    GenData(GenData),
    /// Train the contrastive (s,a) / s' encoder on source and target data.
    TrainEncoder(TrainEncoder),
    /// Exact mutual-information gap of two tabular datasets.
    Oracle(Oracle),
    /// Histogram of encoder scores over a source dataset.
    FilterStats(FilterStats),
    /// Train IQL on target data plus (optionally filtered) source data.
    TrainRl(TrainRl),
    /// Evaluate a trained checkpoint in an environment.
    Eval(Eval),
    /// Run an experiment described by a TOML config.
    Run(Run),
    /// Sweep one config parameter over a list of values.
    Ablate(Ablate),
}

#[derive(Args, Debug)]
struct GenData {
    /// gridworld or pointmass.
    #[arg(long)]
    env: Option<String>,
    /// Shift family: slip, broken or mass, or a full name such as gridworld/slip.
    #[arg(long)]
    family: Option<String>,
    #[arg(long, default_value = "source")]
    domain: Domain,
    /// medium, medium_replay_mix or expert_mix.
    #[arg(long, default_value = "medium")]
    quality: Quality,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainEncoder {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tar: PathBuf,
    /// Representation dimension.
    #[arg(long = "d", alias = "dim", default_value_t = 16)]
    dim: usize,
    /// Candidates per positive K, i.e. K - 1 source negatives.
    #[arg(long, default_value_t = 128)]
    k: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 7000)]
    steps: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "256,256", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the metrics CSV here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Oracle {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tar: PathBuf,
    /// Which dataset supplies the (s, a) sampling distribution.
    #[arg(long, default_value = "source")]
    sampler: Domain,
    /// Also estimate InfoNCE with K candidates: the optimal density-ratio
    /// score, plus the encoder's score when `--encoder` is given.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Monte-Carlo draws for the optimal-score estimate.
    #[arg(long, default_value_t = 20_000)]
    draws: usize,
    /// Evaluation batches for the encoder estimate.
    #[arg(long, default_value_t = 32)]
    eval_batches: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FilterStats {
    /// Encoder checkpoint.
    #[arg(long, alias = "encoder")]
    ckpt: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Kept fraction of the whole dataset.
    #[arg(long, default_value_t = 0.25)]
    xi: f64,
    /// Histogram bins over [1/e, e].
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Per-transition `index,score,kept` table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainRl {
    /// Encoder checkpoint; required for filtering.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Source dataset; omitted means target-only training.
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tar: PathBuf,
    /// Use unfiltered merged batches even when an encoder is given.
    #[arg(long)]
    merge: bool,
    #[arg(long, default_value_t = 0.25)]
    xi: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.7)]
    tau: f64,
    #[arg(long, default_value_t = 3.0)]
    temp: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0.005)]
    mu: f64,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10_000)]
    td_steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pi_steps: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value = "256,256", value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Train V, Q and the policy in every step.
    #[arg(long)]
    interleaved: bool,
    /// Family whose target environment is used for evaluation.
    #[arg(long)]
    family: Option<String>,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, default_value_t = 10)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `checkpoint.txt` and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    family: String,
    #[arg(long, default_value = "target")]
    domain: Domain,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Episode length; defaults to the family's horizon.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Ablate {
    #[arg(long)]
    config: PathBuf,
    /// Dotted config path or alias (xi, alpha, dim, sigma, ratio, mode, ...).
    #[arg(long)]
    param: String,
    /// Comma-separated TOML literals.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_text(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_encoder(path: &Path) -> anyhow::Result<Encoder> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Encoder::read_text(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Writes a CSV table to `out`, or to stdout when `out` is `None`.
fn emit_csv(out: Option<&Path>, header: &str, rows: &[String]) -> anyhow::Result<()> {
    match out {
        None => print_csv(header, rows),
        Some(p) => {
            create_parent(p)?;
            let mut text = format!("{header}\n");
            for r in rows {
                text.push_str(r);
                text.push('\n');
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            Ok(())
        }
    }
}

fn print_csv(header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{header}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

fn gen_data(a: GenData, exec: Execution) -> anyhow::Result<()> {
    let name = match (&a.env, &a.family) {
        (_, Some(f)) if f.contains('/') => f.clone(),
        (Some(e), Some(f)) => format!("{e}/{f}"),
        (Some(e), None) => e.clone(),
        (None, Some(f)) => f.clone(),
        (None, None) => bail!(igdf_core::Error::Config(
            "gen-data needs --env or --family".into()
        )),
    };
    let fam = Family::by_name(&name)?;
    let ds = fam.generate(a.domain, a.quality, a.n, a.seed, exec)?;
    create_parent(&a.out)?;
    ds.write_text(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?)?;
    print_csv(
        "path,env,domain,behavior,transitions",
        &[format!(
            "{},{},{},{},{}",
            a.out.display(),
            ds.env_id,
            ds.domain,
            ds.behavior_id,
            ds.len()
        )],
    )
}

fn train_encoder(a: TrainEncoder) -> anyhow::Result<()> {
    let (src, tar) = (load_dataset(&a.src)?, load_dataset(&a.tar)?);
    if a.k < 2 {
        bail!(igdf_core::Error::Config("--k must be >= 2".into()));
    }
    let cfg = ContrastiveConfig {
        dim: a.dim,
        negatives_per_positive: a.k - 1,
        learning_rate: a.lr,
        batch_size: a.batch,
        update_count: a.steps,
        hidden: a.hidden,
        seed: a.seed,
        state_encoding: None,
    };
    let (enc, metrics) = contrastive::train_encoder(&cfg, &src, &tar)?;
    create_parent(&a.out)?;
    fs::write(&a.out, enc.to_text()).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(m) = &a.metrics {
        create_parent(m)?;
        harness::write_encoder_metrics(m, &metrics)?;
    }
    let rows: Vec<String> = metrics.iter().map(|m| m.csv_row()).collect();
    print_csv(contrastive::METRICS_HEADER, &rows)
}

fn oracle(a: Oracle, exec: Execution) -> anyhow::Result<()> {
    let (src, tar) = (load_dataset(&a.src)?, load_dataset(&a.tar)?);
    let (es, et) = (
        mdp::estimate_empirical(&src)?,
        mdp::estimate_empirical(&tar)?,
    );
    let sampler = match a.sampler {
        Domain::Source => &src,
        Domain::Target => &tar,
    };
    let report = info::decompose_gap(&es, &et, sampler, a.sampler)?;
    let mut header = MiGapReport::CSV_HEADER.to_string();
    let mut row = report.csv_row();
    if a.encoder.is_some() && a.k.is_none() {
        bail!(igdf_core::Error::Config("--encoder needs --k".into()));
    }
    if let Some(k) = a.k {
        let score = DensityRatioScore { tar: &et, src: &es };
        let opt = info::exact_infonce(&score, &et, &es, k, a.draws, a.seed, exec)?;
        header.push_str(",k,i_nce_optimal,i_nce_optimal_std_error");
        row.push_str(&format!(",{k},{},{}", opt.mean, opt.std_error));
        if let Some(p) = &a.encoder {
            let enc = load_encoder(p)?;
            let est = contrastive::estimate_i_nce(
                &enc,
                &src,
                &tar,
                k,
                a.eval_batches,
                a.batch,
                a.seed,
                exec,
            )?;
            header.push_str(",i_nce_encoder,i_nce_encoder_std_error");
            row.push_str(&format!(",{},{}", est.mean, est.std_error));
        }
    }
    emit_csv(a.out.as_deref(), &header, &[row])
}

fn filter_stats(a: FilterStats, exec: Execution) -> anyhow::Result<()> {
    if a.bins == 0 {
        bail!(igdf_core::Error::Invalid("bins must be >= 1".into()));
    }
    let enc = load_encoder(&a.ckpt)?;
    let src = load_dataset(&a.src)?;
    let scores = enc.scores(&src.transitions, exec)?;
    let fb = filter::filter_scores(&scores, a.xi)?;
    if let Some(out) = &a.out {
        let rows: Vec<String> = scores
            .iter()
            .zip(&fb.mask)
            .enumerate()
            .map(|(i, (s, k))| format!("{i},{s},{}", u8::from(*k)))
            .collect();
        emit_csv(Some(out), "index,score,kept", &rows)?;
    }
    let hist = filter::histogram(&scores, (-1f64).exp(), 1f64.exp(), a.bins);
    let mut header = String::from("threshold,kept_count,total");
    let mut row = format!("{},{},{}", fb.threshold, fb.kept.len(), scores.len());
    for (b, c) in hist.iter().enumerate() {
        header.push_str(&format!(",bin_{b:02}"));
        row.push_str(&format!(",{c}"));
    }
    print_csv(&header, &[row])
}

fn train_rl(a: TrainRl, exec: Execution) -> anyhow::Result<()> {
    let tar = load_dataset(&a.tar)?;
    let src = a.src.as_deref().map(load_dataset).transpose()?;
    let cfg = IqlConfig {
        tau: a.tau,
        awr_temperature: a.temp,
        gamma: a.gamma,
        mu: a.mu,
        q_lr: a.lr,
        v_lr: a.lr,
        pi_lr: a.lr,
        td_steps: a.td_steps,
        policy_steps: a.pi_steps,
        batch_size: a.batch,
        hidden: a.hidden,
        interleaved: a.interleaved,
        eval_every: a.eval_every,
        eval_episodes: a.eval_episodes,
        seed: a.seed,
        ..IqlConfig::default()
    };
    let mode = match (&src, &a.encoder, a.merge) {
        (None, Some(_), _) => bail!(igdf_core::Error::Config("--encoder needs --src".into())),
        (None, None, _) => SourceMode::TargetOnly,
        (Some(s), None, _) | (Some(s), Some(_), true) => SourceMode::Merge(s),
        (Some(s), Some(p), false) => SourceMode::Filter {
            src: s,
            scores: load_encoder(p)?.scores(&s.transitions, exec)?,
            fcfg: FilterConfig {
                xi: a.xi,
                alpha: a.alpha,
                batch_size: a.batch,
            },
        },
    };
    let eval = match &a.family {
        Some(name) => {
            let fam = Family::by_name(name)?;
            Some(EvalSpec {
                env: fam.env(Domain::Target)?,
                horizon: fam.horizon(),
                seed: a.seed,
            })
        }
        None => None,
    };
    let sampler = BatchSampler::new(&tar, mode, a.batch)?;
    let (nets, metrics) = iql::train_iql(&cfg, &sampler, eval.as_ref(), exec)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("checkpoint.txt"), nets.to_text())?;
    harness::write_iql_metrics(&a.out.join("metrics.csv"), &metrics)?;
    let last = metrics
        .last()
        .map(|m| m.csv_row())
        .into_iter()
        .collect::<Vec<_>>();
    print_csv(iql::METRICS_HEADER, &last)
}

fn eval(a: Eval, exec: Execution) -> anyhow::Result<()> {
    let f =
        File::open(&a.checkpoint).with_context(|| format!("opening {}", a.checkpoint.display()))?;
    let nets = IqlNets::read_text(BufReader::new(f))
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let fam = Family::by_name(&a.family)?;
    let env = fam.env(a.domain)?;
    if env.space() != nets.space {
        bail!(igdf_core::Error::Shape(format!(
            "checkpoint space {:?} does not match {}",
            nets.space,
            fam.name()
        )));
    }
    let horizon = a.horizon.unwrap_or(fam.horizon());
    let (m, s) = iql::evaluate_policy(
        &env,
        EvalPolicy::Learned(&nets.policy),
        a.episodes,
        horizon,
        a.seed,
        exec,
    )?;
    print_csv(
        "family,domain,episodes,return_mean,return_std",
        &[format!(
            "{},{},{},{m},{s}",
            fam.name(),
            a.domain,
            a.episodes
        )],
    )
}

fn load_config(path: &Path, out: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn run(a: Run, exec: Execution) -> anyhow::Result<()> {
    let cfg = load_config(&a.config, a.out)?;
    harness::run_experiment_config(&cfg, exec)?;
    print!(
        "{}",
        fs::read_to_string(cfg.output_dir.join(harness::SUMMARY_FILE))?
    );
    Ok(())
}

fn ablate(a: Ablate, exec: Execution) -> anyhow::Result<()> {
    let cfg = load_config(&a.config, a.out)?;
    harness::run_ablation(&cfg, &a.param, &a.values, exec)?;
    print!(
        "{}",
        fs::read_to_string(cfg.output_dir.join("ablation.csv"))?
    );
    Ok(())
}

/// Stable error class for the one-line error report.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(ie) = cause.downcast_ref::<igdf_core::Error>() {
            return ie.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "other"
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!(
                "error: kind=usage message={}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::TrainEncoder(a) => train_encoder(a),
        Command::Oracle(a) => oracle(a, exec),
        Command::FilterStats(a) => filter_stats(a, exec),
        Command::TrainRl(a) => train_rl(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Run(a) => run(a, exec),
        Command::Ablate(a) => ablate(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error: kind={} message={}",
                error_kind(&e),
                one_line(&format!("{e:#}"))
            );
            ExitCode::from(1)
        }
    }
}
