//! Score-ranked selection of source transitions, TD weights, and the
//! classifier-based dynamics-ratio baseline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::contrastive::{check_pair, Encoder};
use crate::data::{Dataset, Space, Transition};
use crate::nn::{self, Adam, Mlp};
use crate::par::Execution;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Slack used when rounding `ξ · n` up, so `0.7 · 10` keeps 7 and not 8.
const ROUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Fraction of each raw source batch that is kept.
    pub xi: f64,
    /// Scale of the score weight on kept source TD errors; 0 means uniform weight 1.
    pub alpha: f64,
    /// Combined batch size `B`: `B/2` target plus `B/2` kept source transitions.
    pub batch_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            xi: 0.25,
            alpha: 1.0,
            batch_size: 256,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::Config(format!(
                "xi = {} must lie in (0, 1]",
                self.xi
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha = {} must be >= 0",
                self.alpha
            )));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size = {} must be even and positive",
                self.batch_size
            )));
        }
        Ok(())
    }

    pub fn target_batch_size(&self) -> usize {
        self.batch_size / 2
    }

    /// Raw source batch `n = ⌊B / (2ξ)⌋`, the largest `n` with `⌈ξ n⌉ = B/2`,
    /// so the kept half always has exactly `B/2` transitions. Equals
    /// `⌈B / (2ξ)⌉` whenever `B / (2ξ)` is an integer.
    pub fn source_batch_size(&self) -> usize {
        ((self.batch_size as f64 / (2.0 * self.xi)) + ROUND_SLACK).floor() as usize
    }
}

/// Number of transitions kept from a raw batch of `n`: `⌈ξ n⌉`, at least 1.
pub fn kept_count(xi: f64, n: usize) -> usize {
    ((xi * n as f64 - ROUND_SLACK).ceil() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBatch {
    /// Score of every raw transition.
    pub scores: Vec<f64>,
    /// `ω`: true for kept transitions.
    pub mask: Vec<bool>,
    /// Indices of kept transitions, ascending.
    pub kept: Vec<usize>,
    /// Score of the lowest kept transition.
    pub threshold: f64,
}

impl FilteredBatch {
    pub fn kept_scores(&self) -> Vec<f64> {
        self.kept.iter().map(|&i| self.scores[i]).collect()
    }
}

/// Keep the `⌈ξ n⌉` highest scores; ties go to the lower index.
pub fn filter_scores(scores: &[f64], xi: f64) -> Result<FilteredBatch> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot filter an empty batch"));
    }
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::invalid(format!("xi = {xi} must lie in (0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n = scores.len();
    let m = kept_count(xi, n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort on descending score keeps lower indices first among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = order[..m].to_vec();
    kept.sort_unstable();
    let mut mask = vec![false; n];
    for &i in &kept {
        mask[i] = true;
    }
    let threshold = scores[order[m - 1]];
    Ok(FilteredBatch {
        scores: scores.to_vec(),
        mask,
        kept,
        threshold,
    })
}

/// Score `raw` with the encoder and keep the top `ξ` fraction.
pub fn rank_and_filter(
    enc: &Encoder,
    raw: &[Transition],
    xi: f64,
    exec: Execution,
) -> Result<FilteredBatch> {
    if raw.is_empty() {
        return Err(Error::invalid("cannot filter an empty batch"));
    }
    filter_scores(&enc.scores(raw, exec)?, xi)
}

/// Per-raw-transition TD weights: `α h` for kept, 0 for masked out; `α = 0`
/// gives kept transitions uniform weight 1.
pub fn td_weights(batch: &FilteredBatch, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha = {alpha} must be >= 0")));
    }
    Ok(batch
        .scores
        .iter()
        .zip(&batch.mask)
        .map(|(&h, &keep)| match (keep, alpha == 0.0) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => alpha * h,
        })
        .collect())
}

/// Counts of scores in `bins` equal-width bins over `[lo, hi]`; values outside are clamped.
pub fn histogram(scores: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    for &s in scores {
        let x = ((s - lo) / (hi - lo) * bins as f64).floor();
        out[(x.max(0.0) as usize).min(bins - 1)] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaraConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    /// Transitions per step, half from each domain.
    pub batch_size: usize,
    pub seed: u64,
    /// `|Δr|` clip applied by [`DaraClassifiers::delta_r`].
    pub clip: f64,
    /// Reward modification coefficient: `r ← r + eta · Δr`.
    pub eta: f64,
}

impl Default for DaraConfig {
    fn default() -> Self {
        DaraConfig {
            hidden: vec![256, 256],
            learning_rate: 3e-4,
            steps: 7000,
            batch_size: 128,
            seed: 0,
            clip: 10.0,
            eta: 0.1,
        }
    }
}

/// Domain classifiers on `(s, a, s')` and `(s, a)`; class 1 is the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DaraClassifiers {
    pub sas: Mlp,
    pub sa: Mlp,
    pub space: Space,
    pub clip: f64,
}

pub(crate) fn encode(space: Space, ts: &[&Transition], with_next: bool) -> Array2<f64> {
    let w = space.state_width() * if with_next { 2 } else { 1 } + space.action_width();
    let mut v = Vec::with_capacity(ts.len() * w);
    for t in ts {
        space.push_state(&t.state, &mut v);
        space.push_action(&t.action, &mut v);
        if with_next {
            space.push_state(&t.next_state, &mut v);
        }
    }
    Array2::from_shape_vec((ts.len(), w), v).expect("consistent width")
}

impl DaraClassifiers {
    pub fn new(space: Space, hidden: &[usize], clip: f64, seed: u64) -> Result<Self> {
        let (sw, aw) = (space.state_width(), space.action_width());
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(2);
            d
        };
        Ok(DaraClassifiers {
            sas: Mlp::new(&dims(2 * sw + aw), rng::derive_seed(seed, "dara-sas"))?,
            sa: Mlp::new(&dims(sw + aw), rng::derive_seed(seed, "dara-sa"))?,
            space,
            clip,
        })
    }

    /// Mean cross-entropy of both classifiers on a labelled batch (1 = target), with gradients.
    pub fn loss(
        &self,
        ts: &[&Transition],
        labels: &[usize],
    ) -> Result<(f64, nn::MlpGrads, nn::MlpGrads)> {
        let (z1, c1) = self.sas.forward(&encode(self.space, ts, true))?;
        let (z2, c2) = self.sa.forward(&encode(self.space, ts, false))?;
        let (l1, g1) = nn::softmax_cross_entropy(&z1, labels);
        let (l2, g2) = nn::softmax_cross_entropy(&z2, labels);
        Ok((
            l1 + l2,
            self.sas.backward(&c1, &g1)?.0,
            self.sa.backward(&c2, &g2)?.0,
        ))
    }

    /// `Δr = ln q_sas(tar)/q_sas(src) - ln q_sa(tar)/q_sa(src)` without clipping.
    pub fn delta_r_unclipped(&self, ts: &[Transition]) -> Result<Vec<f64>> {
        let refs: Vec<&Transition> = ts.iter().collect();
        let z1 = self.sas.predict(&encode(self.space, &refs, true))?;
        let z2 = self.sa.predict(&encode(self.space, &refs, false))?;
        Ok((0..ts.len())
            .map(|i| (z1[[i, 1]] - z1[[i, 0]]) - (z2[[i, 1]] - z2[[i, 0]]))
            .collect())
    }

    /// `Δr` clipped to `[-clip, clip]`.
    pub fn delta_r(&self, ts: &[Transition]) -> Result<Vec<f64>> {
        Ok(self
            .delta_r_unclipped(ts)?
            .into_iter()
            .map(|d| d.clamp(-self.clip, self.clip))
            .collect())
    }
}

fn sample_labelled<'a>(
    src: &'a Dataset,
    tar: &'a Dataset,
    n: usize,
    rng: &mut Rng,
) -> (Vec<&'a Transition>, Vec<usize>) {
    let half = n / 2;
    let mut ts = Vec::with_capacity(2 * half);
    let mut labels = Vec::with_capacity(2 * half);
    for _ in 0..half {
        ts.push(src.get(rng::uniform_index(src.len(), rng)));
        labels.push(0);
    }
    for _ in 0..half {
        ts.push(tar.get(rng::uniform_index(tar.len(), rng)));
        labels.push(1);
    }
    (ts, labels)
}

/// Train both domain classifiers with balanced batches and Adam.
pub fn dara_baseline_train(
    src: &Dataset,
    tar: &Dataset,
    cfg: &DaraConfig,
) -> Result<DaraClassifiers> {
    check_pair(src, tar)?;
    if src.domain == tar.domain {
        return Err(Error::invalid(format!(
            "classifier baseline needs one source and one target dataset, got two tagged `{}`",
            src.domain
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("DARA batch_size must be >= 2".into()));
    }
    let mut clf = DaraClassifiers::new(tar.space, &cfg.hidden, cfg.clip, cfg.seed)?;
    let mut opt1 = Adam::for_mlp(cfg.learning_rate, &clf.sas);
    let mut opt2 = Adam::for_mlp(cfg.learning_rate, &clf.sa);
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "dara-batches"));
    for _ in 0..cfg.steps {
        let (ts, labels) = sample_labelled(src, tar, cfg.batch_size, &mut rng);
        let (_, g1, g2) = clf.loss(&ts, &labels)?;
        opt1.step_mlp(&mut clf.sas, &g1)?;
        opt2.step_mlp(&mut clf.sa, &g2)?;
    }
    Ok(clf)
}

/// Source dataset with rewards `r + eta · clip(Δr)`.
pub fn dara_reward_dataset(clf: &DaraClassifiers, src: &Dataset, eta: f64) -> Result<Dataset> {
    let dr = clf.delta_r(&src.transitions)?;
    Ok(src.map_rewards(|i, t| t.reward + eta * dr[i]))
}
