//! Contrastive score encoders `φ(s, a)`, `ψ(s')` and the simplified InfoNCE objective.
//!
//! The score of a transition is `h = exp(φ(s,a)ᵀ ψ(s'))`. Both encoder outputs
//! are projected onto the unit sphere, so `h ∈ [1/e, e]`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Point, Space, Transition};
use crate::info::McEstimate;
use crate::nn::{self, Adam, Mlp, MlpGrads};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Trailing window of the running `I_NCE` estimate in training metrics.
pub const METRIC_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    OneHot,
    RawVector,
}

impl StateEncoding {
    pub fn for_space(space: Space) -> Self {
        if space.is_tabular() {
            StateEncoding::OneHot
        } else {
            StateEncoding::RawVector
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub dim: usize,
    /// `K - 1`; each positive is contrasted against this many source next states.
    pub negatives_per_positive: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub update_count: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Must agree with the dataset kind; `None` picks it from the data.
    pub state_encoding: Option<StateEncoding>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            dim: 16,
            negatives_per_positive: 127,
            learning_rate: 3e-4,
            batch_size: 128,
            update_count: 7000,
            hidden: vec![256, 256],
            seed: 0,
            state_encoding: None,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_positive < 1 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        if self.dim == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "dim, batch_size and learning_rate must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.negatives_per_positive + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub phi: Mlp,
    pub psi: Mlp,
    pub dim: usize,
    pub space: Space,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub phi: MlpGrads,
    pub psi: MlpGrads,
}

/// One row per positive: the `(s, a)` encoding, and `K` candidate indices
/// into the deduplicated next-state rows, the positive first.
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    pub sa: Array2<f64>,
    pub next: Array2<f64>,
    pub candidates: Vec<Vec<usize>>,
}

/// Deduplicates next-state encodings so each distinct state is encoded once.
struct RowSet {
    width: usize,
    index: HashMap<Vec<u64>, usize>,
    rows: Vec<f64>,
}

impl RowSet {
    fn new(width: usize) -> Self {
        RowSet {
            width,
            index: HashMap::new(),
            rows: Vec::new(),
        }
    }

    fn insert(&mut self, space: Space, p: &Point) -> usize {
        let mut enc = Vec::with_capacity(self.width);
        space.push_state(p, &mut enc);
        let key: Vec<u64> = enc.iter().map(|x| x.to_bits()).collect();
        let n = self.index.len();
        *self.index.entry(key).or_insert_with(|| {
            self.rows.extend_from_slice(&enc);
            n
        })
    }

    fn into_matrix(self) -> Array2<f64> {
        let n = self.rows.len() / self.width;
        Array2::from_shape_vec((n, self.width), self.rows).expect("consistent width")
    }
}

impl ContrastBatch {
    pub fn build(
        space: Space,
        positives: &[&Transition],
        negatives: &[Vec<&Point>],
    ) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::invalid(
                "contrastive batch needs at least one positive",
            ));
        }
        if negatives.len() != positives.len() {
            return Err(Error::shape("one negative set per positive required"));
        }
        let k1 = negatives[0].len();
        if k1 == 0 {
            return Err(Error::invalid("empty negative set"));
        }
        if negatives.iter().any(|n| n.len() != k1) {
            return Err(Error::shape(
                "every positive must carry the same number of negatives",
            ));
        }
        let in_phi = space.state_width() + space.action_width();
        let mut sa = Vec::with_capacity(positives.len() * in_phi);
        let mut set = RowSet::new(space.state_width());
        let mut candidates = Vec::with_capacity(positives.len());
        for (t, negs) in positives.iter().zip(negatives) {
            space.push_state(&t.state, &mut sa);
            space.push_action(&t.action, &mut sa);
            let mut c = Vec::with_capacity(k1 + 1);
            c.push(set.insert(space, &t.next_state));
            for n in negs {
                c.push(set.insert(space, n));
            }
            candidates.push(c);
        }
        Ok(ContrastBatch {
            sa: Array2::from_shape_vec((positives.len(), in_phi), sa).expect("consistent width"),
            next: set.into_matrix(),
            candidates,
        })
    }

    /// Positives drawn uniformly from `tar`, negatives uniformly with replacement from `src` next states.
    pub fn sample(
        src: &Dataset,
        tar: &Dataset,
        batch: usize,
        negatives: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pos: Vec<&Transition> = (0..batch)
            .map(|_| tar.get(rng::uniform_index(tar.len(), rng)))
            .collect();
        let neg: Vec<Vec<&Point>> = (0..batch)
            .map(|_| {
                (0..negatives)
                    .map(|_| &src.get(rng::uniform_index(src.len(), rng)).next_state)
                    .collect()
            })
            .collect();
        ContrastBatch::build(tar.space, &pos, &neg)
    }

    pub fn k(&self) -> usize {
        self.candidates[0].len()
    }
}

fn row_dot(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    a.row(i).dot(&b.row(j))
}

impl Encoder {
    pub fn new(space: Space, dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut phi_dims = vec![space.state_width() + space.action_width()];
        phi_dims.extend_from_slice(hidden);
        phi_dims.push(dim);
        let mut psi_dims = vec![space.state_width()];
        psi_dims.extend_from_slice(hidden);
        psi_dims.push(dim);
        Ok(Encoder {
            phi: Mlp::new(&phi_dims, rng::derive_seed(seed, "phi"))?,
            psi: Mlp::new(&psi_dims, rng::derive_seed(seed, "psi"))?,
            dim,
            space,
        })
    }

    fn sa_matrix(&self, ts: &[Transition]) -> Array2<f64> {
        let w = self.space.state_width() + self.space.action_width();
        let mut v = Vec::with_capacity(ts.len() * w);
        for t in ts {
            self.space.push_state(&t.state, &mut v);
            self.space.push_action(&t.action, &mut v);
        }
        Array2::from_shape_vec((ts.len(), w), v).expect("consistent width")
    }

    fn next_matrix(&self, ts: &[Transition]) -> Array2<f64> {
        let w = self.space.state_width();
        let mut v = Vec::with_capacity(ts.len() * w);
        for t in ts {
            self.space.push_state(&t.next_state, &mut v);
        }
        Array2::from_shape_vec((ts.len(), w), v).expect("consistent width")
    }

    /// Unit-norm `φ(s, a)` rows.
    pub fn phi_rows(&self, sa: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(nn::normalize_sphere(&self.phi.predict(sa)?).0)
    }

    /// Unit-norm `ψ(s')` rows.
    pub fn psi_rows(&self, next: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(nn::normalize_sphere(&self.psi.predict(next)?).0)
    }

    fn check_space(&self, space: Space) -> Result<()> {
        if space != self.space {
            return Err(Error::shape(format!(
                "encoder built for {:?}, data is {:?}",
                self.space, space
            )));
        }
        Ok(())
    }

    /// `φ(s,a)ᵀψ(s')` for each transition, in `[-1, 1]`.
    pub fn inner_products(&self, ts: &[Transition], exec: Execution) -> Result<Vec<f64>> {
        for t in ts {
            self.space.check_point(&t.state, true)?;
            self.space.check_point(&t.action, false)?;
            self.space.check_point(&t.next_state, true)?;
        }
        const CHUNK: usize = 1024;
        let chunks: Vec<&[Transition]> = ts.chunks(CHUNK).collect();
        let parts = par::map_slice(&chunks, exec, |c| -> Result<Vec<f64>> {
            let f = self.phi_rows(&self.sa_matrix(c))?;
            let g = self.psi_rows(&self.next_matrix(c))?;
            Ok((0..c.len()).map(|i| row_dot(&f, i, &g, i)).collect())
        });
        let mut out = Vec::with_capacity(ts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Scores `exp(φᵀψ)` of every transition.
    pub fn scores(&self, ts: &[Transition], exec: Execution) -> Result<Vec<f64>> {
        Ok(self
            .inner_products(ts, exec)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    pub fn score(&self, t: &Transition) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(t), Execution::Sequential)?[0])
    }

    /// Mean contrastive loss of a batch, without gradients.
    pub fn batch_loss(&self, batch: &ContrastBatch) -> Result<f64> {
        let f = self.phi_rows(&batch.sa)?;
        let g = self.psi_rows(&batch.next)?;
        let mut total = 0.0;
        for (i, c) in batch.candidates.iter().enumerate() {
            let z: Vec<f64> = c.iter().map(|&j| row_dot(&f, i, &g, j)).collect();
            total += logsumexp(&z) - z[0];
        }
        Ok(total / batch.candidates.len() as f64)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let (a, b) = (self.space.state_width(), self.space.action_width());
        writeln!(
            w,
            "igdf-encoder v1; kind={}; dims={a},{b}; d={}",
            self.space.kind_name(),
            self.dim
        )?;
        self.phi.write_text(&mut w)?;
        self.psi.write_text(&mut w)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("Vec write");
        String::from_utf8(buf).expect("ASCII")
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Encoder> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty encoder file"))??;
        let err = || {
            Error::parse(
                1,
                "expected `igdf-encoder v1; kind=..; dims=a,b; d=..` header",
            )
        };
        let rest = header
            .strip_prefix("igdf-encoder v1; kind=")
            .ok_or_else(err)?;
        let (kind, rest) = rest.split_once("; dims=").ok_or_else(err)?;
        let (dims, d) = rest.split_once("; d=").ok_or_else(err)?;
        let (a, b) = dims.split_once(',').ok_or_else(err)?;
        let (a, b): (usize, usize) = (a.parse().map_err(|_| err())?, b.parse().map_err(|_| err())?);
        let dim: usize = d.trim().parse().map_err(|_| err())?;
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
        let mut line_no = 1;
        let phi = Mlp::read_text(&mut lines, &mut line_no)?;
        let psi = Mlp::read_text(&mut lines, &mut line_no)?;
        if phi.input_dim() != a + b
            || psi.input_dim() != a
            || phi.output_dim() != dim
            || psi.output_dim() != dim
        {
            return Err(Error::parse(
                1,
                "network shapes disagree with the encoder header",
            ));
        }
        Ok(Encoder {
            phi,
            psi,
            dim,
            space,
        })
    }

    pub fn from_text(s: &str) -> Result<Encoder> {
        Encoder::read_text(s.as_bytes())
    }
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over positives of `-ln[h(s,a,s'_B) / Σ_candidates h(s,a,s')]` and its
/// gradient with respect to both encoders.
pub fn nce_loss(enc: &Encoder, batch: &ContrastBatch) -> Result<(f64, EncoderGrads)> {
    let (uf, cache_f) = enc.phi.forward(&batch.sa)?;
    let (ug, cache_g) = enc.psi.forward(&batch.next)?;
    let (f, nf) = nn::normalize_sphere(&uf);
    let (g, ng) = nn::normalize_sphere(&ug);
    let b = batch.candidates.len();
    let mut df = Array2::zeros(f.raw_dim());
    let mut dg = Array2::zeros(g.raw_dim());
    let mut total = 0.0;
    for (i, c) in batch.candidates.iter().enumerate() {
        let z: Vec<f64> = c.iter().map(|&j| row_dot(&f, i, &g, j)).collect();
        let lse = logsumexp(&z);
        total += lse - z[0];
        for (slot, (&j, &zj)) in c.iter().zip(&z).enumerate() {
            let mut dz = (zj - lse).exp();
            if slot == 0 {
                dz -= 1.0;
            }
            dz /= b as f64;
            if dz == 0.0 {
                continue;
            }
            for k in 0..enc.dim {
                df[[i, k]] += dz * g[[j, k]];
                dg[[j, k]] += dz * f[[i, k]];
            }
        }
    }
    let duf = nn::normalize_sphere_backward(&uf, &nf, &df);
    let dug = nn::normalize_sphere_backward(&ug, &ng, &dg);
    let (gphi, _) = enc.phi.backward(&cache_f, &duf)?;
    let (gpsi, _) = enc.psi.backward(&cache_g, &dug)?;
    Ok((
        total / b as f64,
        EncoderGrads {
            phi: gphi,
            psi: gpsi,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderMetrics {
    pub step: usize,
    pub loss: f64,
    /// `ln(K-1)` minus the mean loss over the trailing [`METRIC_WINDOW`] steps.
    pub i_nce_estimate: f64,
}

pub const METRICS_HEADER: &str = "step,loss,i_nce_estimate";

impl EncoderMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.i_nce_estimate)
    }
}

pub(crate) fn check_pair(src: &Dataset, tar: &Dataset) -> Result<()> {
    if src.space.kind_name() != tar.space.kind_name() {
        return Err(Error::UnsupportedKind {
            expected: tar.space.kind_name(),
            found: src.space.kind_name(),
        });
    }
    if src.space != tar.space {
        return Err(Error::shape(format!(
            "source space {:?} vs target {:?}",
            src.space, tar.space
        )));
    }
    Ok(())
}

/// Adam on the contrastive loss for `update_count` steps. Deterministic per `cfg.seed`.
pub fn train_encoder(
    cfg: &ContrastiveConfig,
    src: &Dataset,
    tar: &Dataset,
) -> Result<(Encoder, Vec<EncoderMetrics>)> {
    cfg.validate()?;
    check_pair(src, tar)?;
    if let Some(e) = cfg.state_encoding {
        if e != StateEncoding::for_space(tar.space) {
            return Err(Error::Config(format!(
                "state_encoding {e:?} does not fit {} data",
                tar.space.kind_name()
            )));
        }
    }
    let mut enc = Encoder::new(tar.space, cfg.dim, &cfg.hidden, cfg.seed)?;
    let mut opt_phi = Adam::for_mlp(cfg.learning_rate, &enc.phi);
    let mut opt_psi = Adam::for_mlp(cfg.learning_rate, &enc.psi);
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "encoder-batches"));
    let ln_neg = (cfg.negatives_per_positive as f64).ln();
    let mut window = std::collections::VecDeque::with_capacity(METRIC_WINDOW);
    let mut window_sum = 0.0;
    let mut metrics = Vec::with_capacity(cfg.update_count);
    for step in 0..cfg.update_count {
        let batch = ContrastBatch::sample(
            src,
            tar,
            cfg.batch_size,
            cfg.negatives_per_positive,
            &mut rng,
        )?;
        let (loss, grads) = nce_loss(&enc, &batch)?;
        opt_phi.step_mlp(&mut enc.phi, &grads.phi)?;
        opt_psi.step_mlp(&mut enc.psi, &grads.psi)?;
        window.push_back(loss);
        window_sum += loss;
        if window.len() > METRIC_WINDOW {
            window_sum -= window.pop_front().expect("non-empty");
        }
        metrics.push(EncoderMetrics {
            step,
            loss,
            i_nce_estimate: ln_neg - window_sum / window.len() as f64,
        });
    }
    Ok((enc, metrics))
}

/// `ln(K-1) - L̂` over `n_eval_batches` fresh batches, with standard error across batches.
#[allow(clippy::too_many_arguments)]
pub fn estimate_i_nce(
    enc: &Encoder,
    src: &Dataset,
    tar: &Dataset,
    k: usize,
    n_eval_batches: usize,
    batch_size: usize,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "k = {k}: need at least one negative"
        )));
    }
    if n_eval_batches < 2 {
        return Err(Error::invalid(
            "need at least two evaluation batches for a standard error",
        ));
    }
    check_pair(src, tar)?;
    enc.check_space(tar.space)?;
    let ln_neg = ((k - 1) as f64).ln();
    let values = par::map_indexed(n_eval_batches, exec, |b| -> Result<f64> {
        let mut r = rng::stream(seed, b as u64);
        let batch = ContrastBatch::sample(src, tar, batch_size, k - 1, &mut r)?;
        Ok(ln_neg - enc.batch_loss(&batch)?)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        draws: n_eval_batches,
    })
}

/// Copy of `d_src` with rewards shifted by `sigma · φ(s,a)ᵀψ(s')`.
pub fn reward_mod_variant(
    enc: &Encoder,
    src: &Dataset,
    sigma: f64,
    exec: Execution,
) -> Result<Dataset> {
    enc.check_space(src.space)?;
    let ip = enc.inner_products(&src.transitions, exec)?;
    Ok(src.map_rewards(|i, t| t.reward + sigma * ip[i]))
}

/// Mean of a score vector, used in held-out comparisons.
pub fn mean(xs: &[f64]) -> f64 {
    Array1::from(xs.to_vec()).mean().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::nn::{central_difference, max_relative_error};
    use std::f64::consts::E;

    fn space3() -> Space {
        Space::Tabular {
            n_states: 3,
            n_actions: 2,
        }
    }

    fn toy_dataset(domain: Domain, shift: usize) -> Dataset {
        let ts = (0..30)
            .map(|i| Transition::tabular(i % 3, i % 2, 0.0, (i + shift) % 3, false))
            .collect();
        Dataset::new(ts, domain, "toy", "b", 0, space3()).unwrap()
    }

    /// Single linear layer with weights chosen so φ and ψ are fixed unit vectors.
    fn fixed_encoder(phi_rows: &[[f64; 2]], psi_rows: &[[f64; 2]]) -> Encoder {
        let mut enc = Encoder::new(space3(), 2, &[], 0).unwrap();
        enc.phi.weights[0].fill(0.0);
        enc.phi.biases[0].fill(0.0);
        enc.psi.weights[0].fill(0.0);
        enc.psi.biases[0].fill(0.0);
        for (s, r) in phi_rows.iter().enumerate() {
            enc.phi.weights[0][[s, 0]] = r[0];
            enc.phi.weights[0][[s, 1]] = r[1];
        }
        for (s, r) in psi_rows.iter().enumerate() {
            enc.psi.weights[0][[s, 0]] = r[0];
            enc.psi.weights[0][[s, 1]] = r[1];
        }
        enc
    }

    #[test]
    fn score_range_endpoints() {
        let enc = fixed_encoder(&[[1.0, 0.0]; 3], &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let at = |s2| {
            enc.score(&Transition::tabular(0, 0, 0.0, s2, false))
                .unwrap()
        };
        assert!((at(0) - E).abs() < 1e-15);
        assert!((at(1) - 1.0).abs() < 1e-15);
        assert!((at(2) - 1.0 / E).abs() < 1e-15);
    }

    #[test]
    fn constant_encoder_loss_is_ln_k() {
        let enc = fixed_encoder(&[[1.0, 0.0]; 3], &[[0.6, 0.8]; 3]);
        let (src, tar) = (
            toy_dataset(Domain::Source, 1),
            toy_dataset(Domain::Target, 0),
        );
        for k1 in [1, 4, 9] {
            let batch = ContrastBatch::sample(&src, &tar, 16, k1, &mut rng::seeded(1)).unwrap();
            let (loss, _) = nce_loss(&enc, &batch).unwrap();
            assert!((loss - ((k1 + 1) as f64).ln()).abs() < 1e-12);
            let est =
                estimate_i_nce(&enc, &src, &tar, k1 + 1, 4, 16, 0, Execution::Sequential).unwrap();
            assert!((est.mean - ((k1 as f64).ln() - ((k1 + 1) as f64).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn two_candidate_closed_form() {
        let enc = fixed_encoder(&[[1.0, 0.0]; 3], &[[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]);
        let pos = Transition::tabular(0, 0, 0.0, 0, false);
        let neg = Point::Id(1);
        let batch = ContrastBatch::build(space3(), &[&pos], &[vec![&neg]]).unwrap();
        let (loss, _) = nce_loss(&enc, &batch).unwrap();
        assert!((loss - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn empty_negatives_rejected() {
        let pos = Transition::tabular(0, 0, 0.0, 0, false);
        assert!(ContrastBatch::build(space3(), &[&pos], &[vec![]]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (src, tar) = (
            toy_dataset(Domain::Source, 1),
            toy_dataset(Domain::Target, 0),
        );
        for seed in 0..3 {
            let enc = Encoder::new(space3(), 4, &[6], seed).unwrap();
            let batch = ContrastBatch::sample(&src, &tar, 5, 3, &mut rng::seeded(seed)).unwrap();
            let (_, g) = nce_loss(&enc, &batch).unwrap();
            let phi = enc.phi.flat_params();
            let num = central_difference(
                |p| {
                    let mut e = enc.clone();
                    e.phi.set_flat_params(p).unwrap();
                    e.batch_loss(&batch).unwrap()
                },
                &phi,
                1e-6,
            );
            assert!(max_relative_error(&g.phi.flat(), &num) < 1e-5);
            let psi = enc.psi.flat_params();
            let num = central_difference(
                |p| {
                    let mut e = enc.clone();
                    e.psi.set_flat_params(p).unwrap();
                    e.batch_loss(&batch).unwrap()
                },
                &psi,
                1e-6,
            );
            assert!(max_relative_error(&g.psi.flat(), &num) < 1e-5);
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (src, tar) = (
            toy_dataset(Domain::Source, 1),
            toy_dataset(Domain::Target, 0),
        );
        let cfg = ContrastiveConfig {
            dim: 4,
            negatives_per_positive: 3,
            learning_rate: 1e-2,
            batch_size: 16,
            update_count: 200,
            hidden: vec![16],
            seed: 5,
            state_encoding: None,
        };
        let (a, ma) = train_encoder(&cfg, &src, &tar).unwrap();
        let (b, _) = train_encoder(&cfg, &src, &tar).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert!(ma.last().unwrap().loss < ma[0].loss);
        assert_eq!(Encoder::from_text(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn reward_shift_is_bounded_by_sigma() {
        let enc = fixed_encoder(&[[1.0, 0.0]; 3], &[[1.0, 0.0]; 3]);
        let src = toy_dataset(Domain::Source, 1);
        let same = reward_mod_variant(&enc, &src, 0.0, Execution::Sequential).unwrap();
        assert_eq!(same, src);
        let shifted = reward_mod_variant(&enc, &src, 1.0, Execution::Sequential).unwrap();
        for (x, y) in shifted.transitions.iter().zip(&src.transitions) {
            assert!((x.reward - y.reward - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let tar = toy_dataset(Domain::Target, 0);
        let src = Dataset::new(
            vec![Transition {
                state: Point::Vector(vec![0.0]),
                action: Point::Vector(vec![0.0]),
                reward: 0.0,
                next_state: Point::Vector(vec![0.0]),
                terminal: false,
            }],
            Domain::Source,
            "p",
            "b",
            0,
            Space::Continuous {
                state_dim: 1,
                action_dim: 1,
            },
        )
        .unwrap();
        let cfg = ContrastiveConfig {
            update_count: 1,
            ..Default::default()
        };
        assert!(train_encoder(&cfg, &src, &tar).is_err());
    }
}
