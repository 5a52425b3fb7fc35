//! Policies extracted by advantage-weighted regression.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};

use crate::mdp::{argmax, TabularPolicy};
use crate::nn::{self, Adam, Mlp};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Softmax over a free logit table, one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxTable {
    pub logits: Array2<f64>,
}

/// Diagonal Gaussian with an MLP mean and a state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    /// Raw parameter; the effective log-std is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Tabular(SoftmaxTable),
    Gaussian(GaussianPolicy),
}

/// Actions of a batch: ids for tabular policies, rows for Gaussian ones.
pub enum Actions<'a> {
    Ids(&'a [usize]),
    Rows(&'a Array2<f64>),
}

impl GaussianPolicy {
    pub fn effective_log_std(&self) -> Array1<f64> {
        self.log_std.mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
    }
}

impl Policy {
    /// Mean of `-w_i log π(a_i | s_i)` and the gradient step applied by `opt`.
    /// `states` holds the encoded states (one-hot for tabular).
    pub fn awr_loss_grad(
        &self,
        states: &Array2<f64>,
        actions: Actions<'_>,
        w: &[f64],
    ) -> Result<(f64, PolicyGrads)> {
        let n = w.len() as f64;
        match (self, actions) {
            (Policy::Tabular(t), Actions::Ids(a)) => {
                let ids = state_ids(states);
                let z = t.logits.select(Axis(0), &ids);
                let logp = nn::log_softmax_rows(&z);
                let mut g = Array2::zeros(t.logits.raw_dim());
                let mut loss = 0.0;
                for (i, (&s, &ai)) in ids.iter().zip(a).enumerate() {
                    loss -= w[i] * logp[[i, ai]];
                    for k in 0..t.logits.ncols() {
                        let ind = if k == ai { 1.0 } else { 0.0 };
                        g[[s, k]] -= w[i] * (ind - logp[[i, k]].exp()) / n;
                    }
                }
                Ok((loss / n, PolicyGrads::Tabular(g)))
            }
            (Policy::Gaussian(p), Actions::Rows(a)) => {
                let (mu, cache) = p.mean.forward(states)?;
                let ls = p.effective_log_std();
                let mut dmu = Array2::zeros(mu.raw_dim());
                let mut dls = Array1::zeros(ls.len());
                let mut loss = 0.0;
                for i in 0..mu.nrows() {
                    for k in 0..mu.ncols() {
                        let var = (2.0 * ls[k]).exp();
                        let d = a[[i, k]] - mu[[i, k]];
                        let logp = -d * d / (2.0 * var) - ls[k] - HALF_LN_2PI;
                        loss -= w[i] * logp;
                        dmu[[i, k]] = -w[i] * d / var / n;
                        dls[k] -= w[i] * (d * d / var - 1.0) / n;
                    }
                }
                for k in 0..ls.len() {
                    if p.log_std[k] < LOG_STD_MIN || p.log_std[k] > LOG_STD_MAX {
                        dls[k] = 0.0;
                    }
                }
                let (gm, _) = p.mean.backward(&cache, &dmu)?;
                Ok((loss / n, PolicyGrads::Gaussian(gm, dls)))
            }
            _ => Err(Error::invalid("action kind does not match the policy kind")),
        }
    }

    pub fn optimizer(&self, lr: f64) -> PolicyOptimizer {
        match self {
            Policy::Tabular(t) => PolicyOptimizer::Tabular(Adam::new(lr, &[t.logits.len()])),
            Policy::Gaussian(p) => {
                let mut sizes: Vec<usize> = p
                    .mean
                    .weights
                    .iter()
                    .zip(&p.mean.biases)
                    .flat_map(|(w, b)| [w.len(), b.len()])
                    .collect();
                sizes.push(p.log_std.len());
                PolicyOptimizer::Gaussian(Adam::new(lr, &sizes))
            }
        }
    }

    pub fn apply(&mut self, opt: &mut PolicyOptimizer, grads: &PolicyGrads) -> Result<()> {
        match (self, opt, grads) {
            (Policy::Tabular(t), PolicyOptimizer::Tabular(o), PolicyGrads::Tabular(g)) => o.update(
                vec![(
                    "logits".into(),
                    t.logits.as_slice_mut().expect("standard layout"),
                )],
                &[g.as_slice().expect("standard layout")],
            ),
            (Policy::Gaussian(p), PolicyOptimizer::Gaussian(o), PolicyGrads::Gaussian(gm, gl)) => {
                let mut gs: Vec<&[f64]> = gm
                    .weights
                    .iter()
                    .zip(&gm.biases)
                    .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
                    .collect();
                gs.push(gl.as_slice().expect("standard layout"));
                let mut params = p.mean.params_mut();
                params.push((
                    "log_std".into(),
                    p.log_std.as_slice_mut().expect("standard layout"),
                ));
                o.update(params, &gs)
            }
            _ => Err(Error::invalid("optimizer does not match the policy")),
        }
    }

    /// Deterministic tabular policy picking the most likely action.
    pub fn greedy_tabular(&self) -> Option<TabularPolicy> {
        match self {
            Policy::Tabular(t) => {
                let acts: Vec<usize> = t
                    .logits
                    .rows()
                    .into_iter()
                    .map(|r| argmax(r.iter().copied()))
                    .collect();
                Some(TabularPolicy::deterministic(&acts, t.logits.ncols()))
            }
            Policy::Gaussian(_) => None,
        }
    }

    /// Mean action clipped to the action box.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Policy::Gaussian(p) => {
                let x = Array2::from_shape_vec((1, state.len()), state.to_vec())
                    .map_err(|e| Error::shape(e.to_string()))?;
                Ok(p.mean
                    .predict(&x)?
                    .row(0)
                    .iter()
                    .map(|a| a.clamp(-1.0, 1.0))
                    .collect())
            }
            Policy::Tabular(_) => Err(Error::invalid("tabular policy has no continuous action")),
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        match self {
            Policy::Tabular(t) => {
                writeln!(
                    w,
                    "igdf-table v1; rows={}; cols={}",
                    t.logits.nrows(),
                    t.logits.ncols()
                )?;
                for x in t.logits.iter() {
                    writeln!(w, "{x:.16e}")?;
                }
            }
            Policy::Gaussian(p) => {
                writeln!(w, "igdf-gaussian v1; action_dim={}", p.log_std.len())?;
                for x in p.log_std.iter() {
                    writeln!(w, "{x:.16e}")?;
                }
                p.mean.write_text(&mut w)?;
            }
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(
        lines: &mut std::io::Lines<R>,
        line_no: &mut usize,
    ) -> Result<Policy> {
        *line_no += 1;
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(*line_no, "missing policy header"))??;
        let mut read_reals = |n: usize, line_no: &mut usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    *line_no += 1;
                    let l = lines
                        .next()
                        .ok_or_else(|| Error::parse(*line_no, "truncated policy"))??;
                    l.trim()
                        .parse()
                        .map_err(|_| Error::parse(*line_no, format!("bad real `{l}`")))
                })
                .collect()
        };
        if let Some(rest) = header.strip_prefix("igdf-table v1; rows=") {
            let (r, c) = rest
                .split_once("; cols=")
                .ok_or_else(|| Error::parse(*line_no, "bad table header"))?;
            let (r, c): (usize, usize) = (
                r.parse().map_err(|_| Error::parse(*line_no, "bad rows"))?,
                c.parse().map_err(|_| Error::parse(*line_no, "bad cols"))?,
            );
            let vals = read_reals(r * c, line_no)?;
            Ok(Policy::Tabular(SoftmaxTable {
                logits: Array2::from_shape_vec((r, c), vals).expect("r * c values"),
            }))
        } else if let Some(rest) = header.strip_prefix("igdf-gaussian v1; action_dim=") {
            let d: usize = rest
                .parse()
                .map_err(|_| Error::parse(*line_no, "bad action_dim"))?;
            let ls = read_reals(d, line_no)?;
            let mean = Mlp::read_text(lines, line_no)?;
            Ok(Policy::Gaussian(GaussianPolicy {
                mean,
                log_std: Array1::from(ls),
            }))
        } else {
            Err(Error::parse(*line_no, "unknown policy header"))
        }
    }
}

#[derive(Debug, Clone)]
pub enum PolicyGrads {
    Tabular(Array2<f64>),
    Gaussian(nn::MlpGrads, Array1<f64>),
}

impl PolicyGrads {
    pub fn flat(&self) -> Vec<f64> {
        match self {
            PolicyGrads::Tabular(g) => g.iter().copied().collect(),
            PolicyGrads::Gaussian(m, l) => {
                let mut v = m.flat();
                v.extend(l.iter());
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum PolicyOptimizer {
    Tabular(Adam),
    Gaussian(Adam),
}

/// Index of the hot entry of each one-hot row.
pub(crate) fn state_ids(states: &Array2<f64>) -> Vec<usize> {
    states
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect()
}
