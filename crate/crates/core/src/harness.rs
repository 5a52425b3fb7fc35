//! Experiment orchestration: versioned TOML configs, per-seed pipelines,
//! summaries, manifests and parameter sweeps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::{self, ContrastiveConfig, EncoderMetrics};
use crate::data::{Dataset, Domain};
use crate::envs::{Family, Quality};
use crate::filter::{self, DaraConfig, FilterConfig};
use crate::iql::{self, BatchSampler, EvalSpec, IqlConfig, IqlMetrics, SourceMode};
use crate::par::{self, Execution};
use crate::rng;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Igdf,
    NaiveMerge,
    TargetOnly,
    DaraReward,
    RewardModVariant,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Igdf,
        Mode::NaiveMerge,
        Mode::TargetOnly,
        Mode::DaraReward,
        Mode::RewardModVariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Igdf => "igdf",
            Mode::NaiveMerge => "naive_merge",
            Mode::TargetOnly => "target_only",
            Mode::DaraReward => "dara_reward",
            Mode::RewardModVariant => "reward_mod_variant",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_ratio() -> f64 {
    0.1
}
fn default_seeds() -> usize {
    5
}
fn default_sigma() -> f64 {
    1.0
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/experiment")
}

/// Full description of an experiment. The nested `seed` fields are replaced
/// per run by seeds derived from `base_seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: Mode,
    pub env: Family,
    #[serde(default)]
    pub source_quality: Quality,
    #[serde(default)]
    pub target_quality: Quality,
    /// Source transitions; defaults by family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_source: Option<usize>,
    /// Full target dataset before Γ subsampling; defaults by family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_target: Option<usize>,
    /// Γ: fraction of the target dataset kept per seed.
    #[serde(default = "default_ratio")]
    pub target_data_ratio: f64,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Reward shift coefficient of `reward_mod_variant`.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub iql: IqlConfig,
    #[serde(default)]
    pub dara: DaraConfig,
}

impl ExperimentConfig {
    pub fn new(mode: Mode, env: Family) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: default_name(),
            mode,
            env,
            source_quality: Quality::default(),
            target_quality: Quality::default(),
            n_source: None,
            n_target: None,
            target_data_ratio: default_ratio(),
            n_seeds: default_seeds(),
            base_seed: 0,
            sigma: default_sigma(),
            output_dir: default_output(),
            contrastive: ContrastiveConfig::default(),
            filter: FilterConfig::default(),
            iql: IqlConfig::default(),
            dara: DaraConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.target_data_ratio > 0.0 && self.target_data_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "target_data_ratio = {} must lie in (0, 1]",
                self.target_data_ratio
            )));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.n_source == Some(0) || self.n_target == Some(0) {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be finite".into()));
        }
        self.contrastive.validate()?;
        self.filter.validate()?;
        self.iql.validate()?;
        if self.filter.batch_size != self.iql.batch_size {
            return Err(Error::Config(format!(
                "filter.batch_size {} differs from iql.batch_size {}",
                self.filter.batch_size, self.iql.batch_size
            )));
        }
        self.env.pair()?;
        Ok(())
    }

    /// `(n_source, n_target)` with family defaults filled in.
    pub fn dataset_sizes(&self) -> (usize, usize) {
        let (s, t) = if self.env.is_tabular() {
            (50_000, 50_000)
        } else {
            (100_000, 100_000)
        };
        (self.n_source.unwrap_or(s), self.n_target.unwrap_or(t))
    }

    /// Copy with every defaulted field written out.
    pub fn resolved(&self) -> Self {
        let (s, t) = self.dataset_sizes();
        ExperimentConfig {
            n_source: Some(s),
            n_target: Some(t),
            ..self.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64)
            .map(|i| self.base_seed + i)
            .collect()
    }

    /// Copy with the parameter at `path` (dotted, or a short alias such as
    /// `xi`, `alpha`, `dim`, `sigma`, `ratio`) set to the TOML literal `value`.
    pub fn with_param(&self, path: &str, value: &str) -> Result<Self> {
        let path = resolve_alias(path);
        let mut table =
            toml::Table::try_from(self.resolved()).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields one key");
        let mut cur = &mut table;
        for k in parents {
            cur = match cur.get_mut(*k) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("unknown parameter `{path}`"))),
            };
        }
        let old = cur
            .get(*last)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{path}`")))?;
        let new = parse_toml_literal(value, old)?;
        cur.insert((*last).to_string(), new);
        let cfg: ExperimentConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    Error::Config(format!(
                        "{path} = {value}: {}",
                        e.to_string().trim().replace('\n', " ")
                    ))
                })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn resolve_alias(name: &str) -> &str {
    match name {
        "xi" => "filter.xi",
        "alpha" => "filter.alpha",
        "d" | "dim" => "contrastive.dim",
        "negatives" => "contrastive.negatives_per_positive",
        "ratio" | "gamma_ratio" => "target_data_ratio",
        "tau" => "iql.tau",
        "temperature" => "iql.awr_temperature",
        "eta" => "dara.eta",
        other => other,
    }
}

fn parse_toml_literal(value: &str, like: &toml::Value) -> Result<toml::Value> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    Ok(match (parsed, like) {
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, toml::Value::String(_)) => toml::Value::String(value.to_string()),
        (None, _) => return Err(Error::Config(format!("cannot parse value `{value}`"))),
    })
}

/// One measurement row of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: usize,
    pub values: Vec<(String, f64)>,
}

/// Append-only record list with non-decreasing steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
}

pub const RECORDS_HEADER: [&str; 5] = ["run_id", "seed", "step", "name", "value"];

impl MetricsLog {
    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if last.run_id == rec.run_id && rec.step < last.step {
                return Err(Error::invalid(format!(
                    "step {} after step {} in run {}",
                    rec.step, last.step, rec.run_id
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    /// Long-format CSV: one line per named value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RECORDS_HEADER)?;
        for r in &self.records {
            for (name, v) in &r.values {
                w.write_record([
                    r.run_id.clone(),
                    r.seed.to_string(),
                    r.step.to_string(),
                    name.clone(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn iql_records(
    run_id: &str,
    seed: u64,
    metrics: &[IqlMetrics],
    log: &mut MetricsLog,
) -> Result<()> {
    for m in metrics {
        let mut values = Vec::new();
        let named = [
            ("v_loss", m.v_loss),
            ("q_loss", m.q_loss),
            ("pi_loss", m.pi_loss),
            ("eval_return_mean", m.eval.map(|e| e.0)),
            ("eval_return_std", m.eval.map(|e| e.1)),
        ];
        for (n, v) in named {
            if let Some(v) = v {
                values.push((n.to_string(), v));
            }
        }
        log.push(MetricsRecord {
            run_id: run_id.into(),
            seed,
            step: m.step,
            values,
        })?;
    }
    Ok(())
}

pub fn write_iql_metrics(path: &Path, metrics: &[IqlMetrics]) -> Result<()> {
    let mut text = String::from(iql::METRICS_HEADER);
    text.push('\n');
    for m in metrics {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_encoder_metrics(path: &Path, metrics: &[EncoderMetrics]) -> Result<()> {
    let mut text = String::from(contrastive::METRICS_HEADER);
    text.push('\n');
    for m in metrics {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Source, full target and Γ-subsampled target data of one seed. Shared by
/// every mode.
pub fn seed_datasets(
    cfg: &ExperimentConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Dataset, Dataset)> {
    let (ns, nt) = cfg.dataset_sizes();
    let src = cfg.env.generate(
        Domain::Source,
        cfg.source_quality,
        ns,
        rng::derive_seed(seed, "source-data"),
        exec,
    )?;
    let tar_full = cfg.env.generate(
        Domain::Target,
        cfg.target_quality,
        nt,
        rng::derive_seed(seed, "target-data"),
        exec,
    )?;
    let tar = tar_full.subsample(
        cfg.target_data_ratio,
        &mut rng::seeded(rng::derive_seed(seed, "target-subsample")),
    )?;
    Ok((src, tar))
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub eval: (f64, f64),
    pub iql_metrics: Vec<IqlMetrics>,
    pub encoder_metrics: Vec<EncoderMetrics>,
    pub nets: iql::IqlNets,
}

/// The mode's pipeline for one seed: data, optional encoder or classifier
/// training, IQL, final evaluation on the target environment.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, exec: Execution) -> Result<SeedRun> {
    let (src, tar) = seed_datasets(cfg, seed, exec)?;
    let ccfg = ContrastiveConfig {
        seed: rng::derive_seed(seed, "encoder"),
        ..cfg.contrastive.clone()
    };
    let icfg = IqlConfig {
        seed: rng::derive_seed(seed, "iql"),
        ..cfg.iql.clone()
    };
    let mut encoder_metrics = Vec::new();
    let modified;
    let mode = match cfg.mode {
        Mode::TargetOnly => SourceMode::TargetOnly,
        Mode::NaiveMerge => SourceMode::Merge(&src),
        Mode::Igdf => {
            let (enc, m) = contrastive::train_encoder(&ccfg, &src, &tar)?;
            encoder_metrics = m;
            SourceMode::Filter {
                src: &src,
                scores: enc.scores(&src.transitions, exec)?,
                fcfg: cfg.filter.clone(),
            }
        }
        Mode::RewardModVariant => {
            let (enc, m) = contrastive::train_encoder(&ccfg, &src, &tar)?;
            encoder_metrics = m;
            modified = contrastive::reward_mod_variant(&enc, &src, cfg.sigma, exec)?;
            SourceMode::Merge(&modified)
        }
        Mode::DaraReward => {
            let dcfg = DaraConfig {
                seed: rng::derive_seed(seed, "dara"),
                ..cfg.dara.clone()
            };
            let clf = filter::dara_baseline_train(&src, &tar, &dcfg)?;
            modified = filter::dara_reward_dataset(&clf, &src, dcfg.eta)?;
            SourceMode::Merge(&modified)
        }
    };
    let sampler = BatchSampler::new(&tar, mode, icfg.batch_size)?;
    let eval = EvalSpec {
        env: cfg.env.env(Domain::Target)?,
        horizon: cfg.env.horizon(),
        seed: rng::derive_seed(seed, "eval"),
    };
    let (nets, iql_metrics) = iql::train_iql(&icfg, &sampler, Some(&eval), exec)?;
    let final_eval = iql_metrics
        .last()
        .and_then(|m| m.eval)
        .ok_or_else(|| Error::Numerical("training produced no evaluation".into()))?;
    if !final_eval.0.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite evaluation return {}",
            final_eval.0
        )));
    }
    Ok(SeedRun {
        seed,
        eval: final_eval,
        iql_metrics,
        encoder_metrics,
        nets,
    })
}

/// Outcome of one seed: final `(mean, std)` return or the failure reason.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: std::result::Result<(f64, f64), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub mode: Mode,
    pub outcomes: Vec<SeedOutcome>,
}

pub const SUMMARY_HEADER: [&str; 5] = ["seed", "status", "return_mean", "return_std", "error"];

impl ExperimentSummary {
    pub fn returns(&self) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok().map(|r| r.0))
            .collect()
    }

    /// Mean and population std of the final returns over successful seeds.
    pub fn mean_std(&self) -> Option<(f64, f64)> {
        mean_std(&self.returns())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(SUMMARY_HEADER)?;
        for o in &self.outcomes {
            match &o.result {
                Ok((m, s)) => w.write_record([
                    o.seed.to_string(),
                    "ok".into(),
                    m.to_string(),
                    s.to_string(),
                    String::new(),
                ])?,
                Err(e) => w.write_record([
                    o.seed.to_string(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ])?,
            }
        }
        let (m, s) = self
            .mean_std()
            .map(|(m, s)| (m.to_string(), s.to_string()))
            .unwrap_or_default();
        w.write_record(["mean", "", &m, "", ""])?;
        w.write_record(["std", "", &s, "", ""])?;
        w.flush()?;
        Ok(())
    }
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Some((
        m,
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    ))
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}

fn write_seed_artifacts(cfg: &ExperimentConfig, run: &SeedRun) -> Result<()> {
    let dir = seed_dir(cfg, run.seed);
    fs::create_dir_all(&dir)?;
    write_iql_metrics(&dir.join("metrics.csv"), &run.iql_metrics)?;
    if !run.encoder_metrics.is_empty() {
        write_encoder_metrics(&dir.join("encoder_metrics.csv"), &run.encoder_metrics)?;
    }
    let mut log = MetricsLog::default();
    iql_records(&cfg.name, run.seed, &run.iql_metrics, &mut log)?;
    log.write_csv(&dir.join("records.csv"))?;
    fs::write(dir.join("checkpoint.txt"), run.nets.to_text())?;
    Ok(())
}

/// Runs every seed, records failures per seed, and writes the manifest, the
/// per-seed artifacts and `summary.csv` under `cfg.output_dir`.
pub fn run_experiment_config(cfg: &ExperimentConfig, exec: Execution) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    fs::create_dir_all(&cfg.output_dir)?;
    let manifest = format!(
        "# igdf-core {}\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.to_toml()?
    );
    fs::write(cfg.output_dir.join(MANIFEST_FILE), manifest)?;
    let seeds = cfg.seeds();
    let outcomes = par::map_slice(&seeds, exec, |&seed| {
        let result = run_seed(&cfg, seed, exec)
            .and_then(|run| write_seed_artifacts(&cfg, &run).map(|_| run.eval))
            .map_err(|e| one_line(&e.to_string()));
        if let Err(e) = &result {
            let dir = seed_dir(&cfg, seed);
            let _ = fs::create_dir_all(&dir)
                .and_then(|_| fs::write(dir.join("error.txt"), format!("{e}\n")));
        }
        SeedOutcome { seed, result }
    });
    let summary = ExperimentSummary {
        mode: cfg.mode,
        outcomes,
    };
    summary.write_csv(&cfg.output_dir.join(SUMMARY_FILE))?;
    Ok(summary)
}

pub fn run_experiment(config_path: &Path, exec: Execution) -> Result<ExperimentSummary> {
    run_experiment_config(&ExperimentConfig::load(config_path)?, exec)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Results of a sweep, one summary per value.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub parameter: String,
    pub values: Vec<String>,
    pub summaries: Vec<ExperimentSummary>,
}

pub const ABLATION_HEADER: [&str; 6] = [
    "parameter",
    "value",
    "seed",
    "status",
    "return_mean",
    "return_std",
];

impl AblationTable {
    /// Long table keyed by `(value, seed)`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(ABLATION_HEADER)?;
        for (v, s) in self.values.iter().zip(&self.summaries) {
            for o in &s.outcomes {
                let (status, m, sd) = match &o.result {
                    Ok((m, sd)) => ("ok", m.to_string(), sd.to_string()),
                    Err(_) => ("failed", String::new(), String::new()),
                };
                w.write_record([
                    self.parameter.as_str(),
                    v,
                    &o.seed.to_string(),
                    status,
                    &m,
                    &sd,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Paired table: one row per seed, one return column per value, then
    /// mean and std rows.
    pub fn write_paired_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["seed".to_string()];
        header.extend(
            self.values
                .iter()
                .map(|v| format!("{}={v}", self.parameter)),
        );
        w.write_record(&header)?;
        let seeds: Vec<u64> = self
            .summaries
            .first()
            .map(|s| s.outcomes.iter().map(|o| o.seed).collect())
            .unwrap_or_default();
        for (i, seed) in seeds.iter().enumerate() {
            let mut row = vec![seed.to_string()];
            for s in &self.summaries {
                row.push(
                    s.outcomes
                        .get(i)
                        .and_then(|o| o.result.as_ref().ok())
                        .map(|r| r.0.to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row)?;
        }
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let mut row = vec![label.to_string()];
            for s in &self.summaries {
                row.push(
                    s.mean_std()
                        .map(|ms| if pick == 0 { ms.0 } else { ms.1 }.to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One experiment per value of `parameter`, each in its own subdirectory of
/// `base.output_dir`, consolidated into `ablation.csv` and `paired.csv`.
pub fn run_ablation(
    base: &ExperimentConfig,
    parameter: &str,
    values: &[String],
    exec: Execution,
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.with_param(parameter, v)?;
            c.output_dir = base
                .output_dir
                .join(format!("{}={v}", resolve_alias(parameter)));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::with_capacity(configs.len());
    for c in &configs {
        summaries.push(run_experiment_config(c, exec)?);
    }
    let table = AblationTable {
        parameter: resolve_alias(parameter).to_string(),
        values: values.to_vec(),
        summaries,
    };
    fs::create_dir_all(&base.output_dir)?;
    table.write_csv(&base.output_dir.join("ablation.csv"))?;
    table.write_paired_csv(&base.output_dir.join("paired.csv"))?;
    Ok(table)
}
