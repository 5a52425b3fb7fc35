//! Implicit Q-learning with score-weighted source TD errors.
//!
//! Per step the trainer draws a combined batch: `B/2` target transitions plus
//! the kept part of a raw source batch (or `B` target transitions when there is
//! no source data). V, Q and the policy all train on that combined batch.

mod policy;

pub use policy::{
    Actions, GaussianPolicy, Policy, PolicyGrads, PolicyOptimizer, SoftmaxTable, LOG_STD_MAX,
    LOG_STD_MIN,
};

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Space};
use crate::envs::{rollout_episode, ContinuousEnv, Env, PdController};
use crate::filter::{self, FilterConfig};
use crate::mdp::{self, TabularMDP, TabularPolicy};
use crate::nn::{Adam, Mlp, MlpGrads};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqlConfig {
    pub tau: f64,
    /// Inverse temperature of the advantage weights.
    pub awr_temperature: f64,
    pub gamma: f64,
    pub mu: f64,
    pub q_lr: f64,
    pub v_lr: f64,
    pub pi_lr: f64,
    pub td_steps: usize,
    pub policy_steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Upper clip of the advantage weights.
    pub awr_clip: f64,
    /// Train V, Q and the policy in the same step instead of two phases.
    pub interleaved: bool,
    /// Evaluate every this many policy steps (0: only at the end).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            tau: 0.7,
            awr_temperature: 3.0,
            gamma: 0.99,
            mu: 0.005,
            q_lr: 3e-4,
            v_lr: 3e-4,
            pi_lr: 3e-4,
            td_steps: 10_000,
            policy_steps: 10_000,
            batch_size: 256,
            hidden: vec![256, 256],
            awr_clip: 100.0,
            interleaved: false,
            eval_every: 0,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau = {} must lie in (0, 1)",
                self.tau
            )));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::Config(format!(
                "mu = {} must lie in (0, 1]",
                self.mu
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma = {} must lie in [0, 1)",
                self.gamma
            )));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config("batch_size must be even and >= 2".into()));
        }
        if !(self.awr_temperature >= 0.0) || !(self.awr_clip > 0.0) {
            return Err(Error::Config(
                "awr_temperature must be >= 0 and awr_clip > 0".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// `|τ - 1(u < 0)| u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

fn expectile_grad(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    2.0 * w * u
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqlNets {
    pub q: Mlp,
    pub q_target: Mlp,
    pub v: Mlp,
    pub policy: Policy,
    pub space: Space,
}

impl IqlNets {
    pub fn new(space: Space, hidden: &[usize], seed: u64) -> Result<Self> {
        let (sw, aw) = (space.state_width(), space.action_width());
        let dims = |input: usize, out: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(out);
            d
        };
        let q = Mlp::new(&dims(sw + aw, 1), rng::derive_seed(seed, "q"))?;
        let policy = match space {
            Space::Tabular {
                n_states,
                n_actions,
            } => Policy::Tabular(SoftmaxTable {
                logits: Array2::zeros((n_states, n_actions)),
            }),
            Space::Continuous {
                state_dim,
                action_dim,
            } => Policy::Gaussian(GaussianPolicy {
                mean: Mlp::new(&dims(state_dim, action_dim), rng::derive_seed(seed, "pi"))?,
                log_std: Array1::zeros(action_dim),
            }),
        };
        Ok(IqlNets {
            q_target: q.clone(),
            q,
            v: Mlp::new(&dims(sw, 1), rng::derive_seed(seed, "v"))?,
            policy,
            space,
        })
    }

    /// `θ̂ ← (1 - μ) θ̂ + μ θ`.
    pub fn polyak(&mut self, mu: f64) -> Result<()> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::invalid(format!("mu = {mu} must lie in (0, 1]")));
        }
        self.q_target.polyak_from(&self.q, mu);
        Ok(())
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let (a, b) = (self.space.state_width(), self.space.action_width());
        writeln!(
            w,
            "igdf-iql v1; kind={}; dims={a},{b}",
            self.space.kind_name()
        )?;
        self.q.write_text(&mut w)?;
        self.q_target.write_text(&mut w)?;
        self.v.write_text(&mut w)?;
        self.policy.write_text(&mut w)
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("Vec write");
        String::from_utf8(buf).expect("ASCII")
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<IqlNets> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty checkpoint"))??;
        let err = || Error::parse(1, "expected `igdf-iql v1; kind=..; dims=a,b` header");
        let rest = header.strip_prefix("igdf-iql v1; kind=").ok_or_else(err)?;
        let (kind, dims) = rest.split_once("; dims=").ok_or_else(err)?;
        let (a, b) = dims.split_once(',').ok_or_else(err)?;
        let (a, b): (usize, usize) = (a.parse().map_err(|_| err())?, b.parse().map_err(|_| err())?);
        let space = match kind {
            "tabular" => Space::Tabular {
                n_states: a,
                n_actions: b,
            },
            "continuous" => Space::Continuous {
                state_dim: a,
                action_dim: b,
            },
            _ => return Err(err()),
        };
        let mut n = 1;
        let q = Mlp::read_text(&mut lines, &mut n)?;
        let q_target = Mlp::read_text(&mut lines, &mut n)?;
        let v = Mlp::read_text(&mut lines, &mut n)?;
        let policy = Policy::read_text(&mut lines, &mut n)?;
        Ok(IqlNets {
            q,
            q_target,
            v,
            policy,
            space,
        })
    }
}

/// Network encodings of a list of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub s: Array2<f64>,
    pub sa: Array2<f64>,
    pub s2: Array2<f64>,
    pub reward: Array1<f64>,
    /// `1 - terminal`.
    pub not_done: Array1<f64>,
    pub action_ids: Vec<usize>,
    pub actions: Array2<f64>,
}

impl Encoded {
    pub fn new(ds: &Dataset) -> Encoded {
        let sp = ds.space;
        let (sw, aw) = (sp.state_width(), sp.action_width());
        let n = ds.len();
        let (mut s, mut sa, mut s2, mut act) = (
            Vec::with_capacity(n * sw),
            Vec::with_capacity(n * (sw + aw)),
            Vec::with_capacity(n * sw),
            Vec::with_capacity(n * aw),
        );
        for t in &ds.transitions {
            sp.push_state(&t.state, &mut s);
            sp.push_state(&t.state, &mut sa);
            sp.push_action(&t.action, &mut sa);
            sp.push_state(&t.next_state, &mut s2);
            sp.push_action(&t.action, &mut act);
        }
        Encoded {
            s: Array2::from_shape_vec((n, sw), s).expect("width"),
            sa: Array2::from_shape_vec((n, sw + aw), sa).expect("width"),
            s2: Array2::from_shape_vec((n, sw), s2).expect("width"),
            reward: ds.transitions.iter().map(|t| t.reward).collect(),
            not_done: ds
                .transitions
                .iter()
                .map(|t| if t.terminal { 0.0 } else { 1.0 })
                .collect(),
            action_ids: ds
                .transitions
                .iter()
                .map(|t| t.action.id().unwrap_or(0))
                .collect(),
            actions: Array2::from_shape_vec((n, aw), act).expect("width"),
        }
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Encoded {
        Encoded {
            s: self.s.select(Axis(0), idx),
            sa: self.sa.select(Axis(0), idx),
            s2: self.s2.select(Axis(0), idx),
            reward: self.reward.select(Axis(0), idx),
            not_done: self.not_done.select(Axis(0), idx),
            action_ids: idx.iter().map(|&i| self.action_ids[i]).collect(),
            actions: self.actions.select(Axis(0), idx),
        }
    }

    pub fn concat(&self, other: &Encoded) -> Encoded {
        let cat2 = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width")
        };
        let cat1 = |a: &Array1<f64>, b: &Array1<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("1-d")
        };
        Encoded {
            s: cat2(&self.s, &other.s),
            sa: cat2(&self.sa, &other.sa),
            s2: cat2(&self.s2, &other.s2),
            reward: cat1(&self.reward, &other.reward),
            not_done: cat1(&self.not_done, &other.not_done),
            action_ids: self
                .action_ids
                .iter()
                .chain(&other.action_ids)
                .copied()
                .collect(),
            actions: cat2(&self.actions, &other.actions),
        }
    }

    fn policy_actions(&self, space: Space) -> Actions<'_> {
        if space.is_tabular() {
            Actions::Ids(&self.action_ids)
        } else {
            Actions::Rows(&self.actions)
        }
    }
}

/// Combined batch: the first `n_tar` rows are target transitions, the rest
/// source transitions with TD weights `src_weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdBatch {
    pub data: Encoded,
    pub n_tar: usize,
    pub src_weights: Vec<f64>,
}

impl TdBatch {
    pub fn target_only(data: Encoded) -> TdBatch {
        TdBatch {
            n_tar: data.len(),
            data,
            src_weights: Vec::new(),
        }
    }

    pub fn combined(tar: Encoded, src: Encoded, weights: Vec<f64>) -> Result<TdBatch> {
        if weights.len() != src.len() {
            return Err(Error::shape(format!(
                "{} weights for {} source transitions",
                weights.len(),
                src.len()
            )));
        }
        Ok(TdBatch {
            n_tar: tar.len(),
            data: tar.concat(&src),
            src_weights: weights,
        })
    }

    /// Per-row coefficient `c_i` of `Σ c_i δ_i²`.
    fn td_coefficients(&self) -> Vec<f64> {
        let n_src = self.src_weights.len();
        let mut c = Vec::with_capacity(self.data.len());
        if n_src == 0 {
            c.resize(self.n_tar, 1.0 / self.n_tar as f64);
        } else {
            c.resize(self.n_tar, 0.5 / self.n_tar as f64);
            c.extend(self.src_weights.iter().map(|w| 0.5 * w / n_src as f64));
        }
        c
    }
}

fn column(x: &Array2<f64>) -> Array1<f64> {
    x.column(0).to_owned()
}

/// Expectile loss of `V(s)` against the frozen target Q, with gradient.
pub fn v_loss(nets: &IqlNets, b: &TdBatch, tau: f64) -> Result<(f64, MlpGrads)> {
    let q = column(&nets.q_target.predict(&b.data.sa)?);
    let (v, cache) = nets.v.forward(&b.data.s)?;
    let n = b.data.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros(v.raw_dim());
    for i in 0..b.data.len() {
        let u = q[i] - v[[i, 0]];
        loss += expectile_loss(u, tau);
        g[[i, 0]] = -expectile_grad(u, tau) / n;
    }
    Ok((loss / n, nets.v.backward(&cache, &g)?.0))
}

/// `½ mean_tar δ² + ½ (1/n_src) Σ w_i δ_i²` with `δ = r + γ (1 - d) V(s') - Q(s, a)`;
/// plain `mean δ²` when the batch has no source rows.
pub fn q_loss(nets: &IqlNets, b: &TdBatch, gamma: f64) -> Result<(f64, MlpGrads)> {
    let v2 = column(&nets.v.predict(&b.data.s2)?);
    let y = &b.data.reward + &(&b.data.not_done * &v2 * gamma);
    let (q, cache) = nets.q.forward(&b.data.sa)?;
    let c = b.td_coefficients();
    let mut loss = 0.0;
    let mut g = Array2::zeros(q.raw_dim());
    for i in 0..b.data.len() {
        let d = y[i] - q[[i, 0]];
        loss += c[i] * d * d;
        g[[i, 0]] = -2.0 * c[i] * d;
    }
    Ok((loss, nets.q.backward(&cache, &g)?.0))
}

/// Advantage weights `min(exp(λ (Q̂(s,a) - V(s))), clip)`.
pub fn awr_weights(
    nets: &IqlNets,
    data: &Encoded,
    temperature: f64,
    clip: f64,
) -> Result<Vec<f64>> {
    let q = column(&nets.q_target.predict(&data.sa)?);
    let v = column(&nets.v.predict(&data.s)?);
    Ok((0..data.len())
        .map(|i| (temperature * (q[i] - v[i])).exp().min(clip))
        .collect())
}

/// Advantage-weighted negative log-likelihood of the batch actions.
pub fn policy_loss(
    nets: &IqlNets,
    data: &Encoded,
    temperature: f64,
    clip: f64,
) -> Result<(f64, PolicyGrads)> {
    let w = awr_weights(nets, data, temperature, clip)?;
    nets.policy
        .awr_loss_grad(&data.s, data.policy_actions(nets.space), &w)
}

/// Optimiser state for the three trained components.
#[derive(Debug, Clone)]
pub struct IqlOptimizers {
    pub q: Adam,
    pub v: Adam,
    pub pi: PolicyOptimizer,
}

impl IqlOptimizers {
    pub fn new(nets: &IqlNets, cfg: &IqlConfig) -> Self {
        IqlOptimizers {
            q: Adam::for_mlp(cfg.q_lr, &nets.q),
            v: Adam::for_mlp(cfg.v_lr, &nets.v),
            pi: nets.policy.optimizer(cfg.pi_lr),
        }
    }
}

pub fn update_v(
    nets: &mut IqlNets,
    opt: &mut IqlOptimizers,
    b: &TdBatch,
    cfg: &IqlConfig,
) -> Result<f64> {
    let (l, g) = v_loss(nets, b, cfg.tau)?;
    opt.v.step_mlp(&mut nets.v, &g)?;
    Ok(l)
}

pub fn update_q(
    nets: &mut IqlNets,
    opt: &mut IqlOptimizers,
    b: &TdBatch,
    cfg: &IqlConfig,
) -> Result<f64> {
    let (l, g) = q_loss(nets, b, cfg.gamma)?;
    opt.q.step_mlp(&mut nets.q, &g)?;
    Ok(l)
}

pub fn update_policy_awr(
    nets: &mut IqlNets,
    opt: &mut IqlOptimizers,
    b: &TdBatch,
    cfg: &IqlConfig,
) -> Result<f64> {
    let (l, g) = policy_loss(nets, &b.data, cfg.awr_temperature, cfg.awr_clip)?;
    nets.policy.apply(&mut opt.pi, &g)?;
    Ok(l)
}

/// Where the source half of each batch comes from.
pub enum SourceMode<'a> {
    /// `B` target transitions per step.
    TargetOnly,
    /// `B/2` source transitions per step with weight 1.
    Merge(&'a Dataset),
    /// A raw batch of `fcfg.source_batch_size()` source transitions, filtered by
    /// the precomputed per-transition scores.
    Filter {
        src: &'a Dataset,
        scores: Vec<f64>,
        fcfg: FilterConfig,
    },
}

/// Draws combined batches from a fixed RNG stream. Target indices are always
/// drawn before source indices, so modes with equal batch arithmetic consume
/// the stream identically.
pub struct BatchSampler<'a> {
    tar: Encoded,
    src: Option<Encoded>,
    mode: SourceMode<'a>,
    batch_size: usize,
    space: Space,
}

impl<'a> BatchSampler<'a> {
    pub fn new(tar: &Dataset, mode: SourceMode<'a>, batch_size: usize) -> Result<Self> {
        let src = match &mode {
            SourceMode::TargetOnly => None,
            SourceMode::Merge(s) => Some(s),
            SourceMode::Filter { src, scores, fcfg } => {
                fcfg.validate()?;
                if scores.len() != src.len() {
                    return Err(Error::shape("one score per source transition required"));
                }
                if fcfg.batch_size != batch_size {
                    return Err(Error::Config(format!(
                        "filter batch_size {} differs from IQL batch_size {batch_size}",
                        fcfg.batch_size
                    )));
                }
                Some(src)
            }
        };
        if let Some(s) = src {
            crate::contrastive::check_pair(s, tar)?;
        }
        Ok(BatchSampler {
            tar: Encoded::new(tar),
            src: src.map(|s| Encoded::new(s)),
            mode,
            batch_size,
            space: tar.space,
        })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<TdBatch> {
        let draw = |n: usize, len: usize, rng: &mut Rng| -> Vec<usize> {
            (0..n).map(|_| rng::uniform_index(len, rng)).collect()
        };
        let half = self.batch_size / 2;
        match (&self.mode, &self.src) {
            (SourceMode::TargetOnly, _) => Ok(TdBatch::target_only(self.tar.gather(&draw(
                self.batch_size,
                self.tar.len(),
                rng,
            )))),
            (SourceMode::Merge(_), Some(src)) => {
                let t = self.tar.gather(&draw(half, self.tar.len(), rng));
                let s = src.gather(&draw(half, src.len(), rng));
                TdBatch::combined(t, s, vec![1.0; half])
            }
            (SourceMode::Filter { scores, fcfg, .. }, Some(src)) => {
                let t = self.tar.gather(&draw(half, self.tar.len(), rng));
                let raw = draw(fcfg.source_batch_size(), src.len(), rng);
                let raw_scores: Vec<f64> = raw.iter().map(|&i| scores[i]).collect();
                let fb = filter::filter_scores(&raw_scores, fcfg.xi)?;
                let w = filter::td_weights(&fb, fcfg.alpha)?;
                let kept: Vec<usize> = fb.kept.iter().map(|&k| raw[k]).collect();
                let kept_w: Vec<f64> = fb.kept.iter().map(|&k| w[k]).collect();
                TdBatch::combined(t, src.gather(&kept), kept_w)
            }
            _ => unreachable!("source encoding exists for source modes"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Td,
    Policy,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Td => "td",
            Phase::Policy => "policy",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqlMetrics {
    pub step: usize,
    pub phase: Phase,
    pub v_loss: Option<f64>,
    pub q_loss: Option<f64>,
    pub pi_loss: Option<f64>,
    pub eval: Option<(f64, f64)>,
}

pub const METRICS_HEADER: &str =
    "step,phase,v_loss,q_loss,pi_loss,eval_return_mean,eval_return_std";

fn opt_field(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl IqlMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.phase.name(),
            opt_field(self.v_loss),
            opt_field(self.q_loss),
            opt_field(self.pi_loss),
            opt_field(self.eval.map(|e| e.0)),
            opt_field(self.eval.map(|e| e.1)),
        )
    }
}

/// Environment used for periodic evaluation.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub env: Env,
    pub horizon: usize,
    pub seed: u64,
}

/// Two-phase (or interleaved) IQL on the batches drawn by `sampler`.
pub fn train_iql(
    cfg: &IqlConfig,
    sampler: &BatchSampler<'_>,
    eval: Option<&EvalSpec>,
    exec: Execution,
) -> Result<(IqlNets, Vec<IqlMetrics>)> {
    cfg.validate()?;
    let space = sampler.space;
    let mut nets = IqlNets::new(space, &cfg.hidden, cfg.seed)?;
    let mut opt = IqlOptimizers::new(&nets, cfg);
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "iql-batches"));
    let mut metrics = Vec::new();
    let evaluate = |nets: &IqlNets| -> Result<Option<(f64, f64)>> {
        match eval {
            Some(e) => Ok(Some(evaluate_policy(
                &e.env,
                EvalPolicy::Learned(&nets.policy),
                cfg.eval_episodes,
                e.horizon,
                e.seed,
                exec,
            )?)),
            None => Ok(None),
        }
    };
    let due = |k: usize, total: usize| {
        (cfg.eval_every > 0 && (k + 1).is_multiple_of(cfg.eval_every)) || k + 1 == total
    };
    if cfg.interleaved {
        let total = cfg.td_steps.max(cfg.policy_steps);
        for k in 0..total {
            let b = sampler.sample(&mut rng)?;
            let v = update_v(&mut nets, &mut opt, &b, cfg)?;
            let q = update_q(&mut nets, &mut opt, &b, cfg)?;
            nets.polyak(cfg.mu)?;
            let p = update_policy_awr(&mut nets, &mut opt, &b, cfg)?;
            let ev = if due(k, total) {
                evaluate(&nets)?
            } else {
                None
            };
            metrics.push(IqlMetrics {
                step: k,
                phase: Phase::Joint,
                v_loss: Some(v),
                q_loss: Some(q),
                pi_loss: Some(p),
                eval: ev,
            });
        }
    } else {
        for k in 0..cfg.td_steps {
            let b = sampler.sample(&mut rng)?;
            let v = update_v(&mut nets, &mut opt, &b, cfg)?;
            let q = update_q(&mut nets, &mut opt, &b, cfg)?;
            nets.polyak(cfg.mu)?;
            metrics.push(IqlMetrics {
                step: k,
                phase: Phase::Td,
                v_loss: Some(v),
                q_loss: Some(q),
                pi_loss: None,
                eval: None,
            });
        }
        for k in 0..cfg.policy_steps {
            let b = sampler.sample(&mut rng)?;
            let p = update_policy_awr(&mut nets, &mut opt, &b, cfg)?;
            let ev = if due(k, cfg.policy_steps) {
                evaluate(&nets)?
            } else {
                None
            };
            metrics.push(IqlMetrics {
                step: cfg.td_steps + k,
                phase: Phase::Policy,
                v_loss: None,
                q_loss: None,
                pi_loss: Some(p),
                eval: ev,
            });
        }
        if cfg.policy_steps == 0 {
            if let Some(last) = metrics.last_mut() {
                last.eval = evaluate(&nets)?;
            }
        }
    }
    Ok((nets, metrics))
}

/// IGDF: filtered, score-weighted source batches on top of target batches.
pub fn train_igdf_iql(
    cfg: &IqlConfig,
    fcfg: &FilterConfig,
    enc: &crate::contrastive::Encoder,
    src: &Dataset,
    tar: &Dataset,
    eval: Option<&EvalSpec>,
    exec: Execution,
) -> Result<(IqlNets, Vec<IqlMetrics>)> {
    let scores = enc.scores(&src.transitions, exec)?;
    let sampler = BatchSampler::new(
        tar,
        SourceMode::Filter {
            src,
            scores,
            fcfg: fcfg.clone(),
        },
        cfg.batch_size,
    )?;
    train_iql(cfg, &sampler, eval, exec)
}

/// Policy to evaluate.
pub enum EvalPolicy<'a> {
    Tabular(&'a TabularPolicy),
    /// Learned policies act greedily: argmax for tables, the clipped mean for Gaussians.
    Learned(&'a Policy),
    Controller(&'a PdController),
}

fn tabular_episode(mdp: &TabularMDP, pi: &TabularPolicy, horizon: usize, rng: &mut Rng) -> f64 {
    let mut s = rng::categorical(mdp.initial_dist.as_slice().expect("contiguous"), rng);
    let mut ret = 0.0;
    for _ in 0..horizon {
        let a = pi.sample(s, rng);
        ret += mdp.reward[[s, a]];
        let row = mdp.transition.slice(ndarray::s![s, a, ..]);
        s = rng::categorical(row.as_slice().expect("contiguous"), rng);
        if mdp.terminal[s] {
            break;
        }
    }
    ret
}

/// Undiscounted episodic return over `n_episodes` independent RNG streams: `(mean, std)`.
pub fn evaluate_policy(
    env: &Env,
    policy: EvalPolicy<'_>,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    let greedy;
    let returns: Vec<f64> = match (env, policy) {
        (Env::Tabular(m), EvalPolicy::Tabular(pi)) => par::map_indexed(n_episodes, exec, |e| {
            tabular_episode(m, pi, horizon, &mut rng::stream(seed, e as u64))
        }),
        (Env::Tabular(m), EvalPolicy::Learned(p @ Policy::Tabular(_))) => {
            greedy = p.greedy_tabular().expect("tabular");
            if greedy.n_states() != m.n_states {
                return Err(Error::shape("policy table does not match the environment"));
            }
            par::map_indexed(n_episodes, exec, |e| {
                tabular_episode(m, &greedy, horizon, &mut rng::stream(seed, e as u64))
            })
        }
        (Env::Continuous(c), EvalPolicy::Learned(p @ Policy::Gaussian(_))) => {
            let runs = par::map_indexed(n_episodes, exec, |e| -> Result<f64> {
                let mut r = rng::stream(seed, e as u64);
                let mut err = None;
                let ep = rollout_episode(
                    c,
                    |s, _| {
                        p.mean_action(s).unwrap_or_else(|x| {
                            err = Some(x);
                            vec![0.0; c.action_dim()]
                        })
                    },
                    &mut r,
                );
                match err {
                    Some(x) => Err(x),
                    None => Ok(ep.iter().map(|t| t.reward).sum()),
                }
            });
            runs.into_iter().collect::<Result<Vec<f64>>>()?
        }
        (Env::Continuous(c), EvalPolicy::Controller(pd)) => {
            par::map_indexed(n_episodes, exec, |e| {
                let mut r = rng::stream(seed, e as u64);
                let noise = pd.episode_noise(&mut r);
                rollout_episode(c, |s, rr| pd.act(s, noise, rr), &mut r)
                    .iter()
                    .map(|t| t.reward)
                    .sum()
            })
        }
        _ => {
            return Err(Error::UnsupportedKind {
                expected: if matches!(env, Env::Tabular(_)) {
                    "tabular"
                } else {
                    "continuous"
                },
                found: "policy of the other kind",
            })
        }
    };
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, std))
}

/// Probability, per start state, of reaching a `goal` state within `horizon`
/// steps under `policy` in `mdp`.
pub fn goal_reach_probabilities(
    mdp: &TabularMDP,
    policy: &TabularPolicy,
    goal: &[bool],
    horizon: usize,
) -> Result<Vec<f64>> {
    Ok(mdp::hitting_probability(mdp, policy, goal, horizon)?.to_vec())
}
