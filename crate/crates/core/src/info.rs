//! Exact information quantities on tabular empirical MDPs.
//!
//! Every expectation here is an exact sum over the frequency weights of a
//! sampler dataset (its `(s, a, s')` count tensor), so no sampling noise enters
//! except in [`exact_infonce`], whose negatives are Monte-Carlo draws.
//!
//! Conventions: `0 ln 0 = 0`; a log-density ratio with both numerator and
//! denominator zero counts as 0 (the tuple carries no information in either
//! direction); a zero numerator alone gives an explicit `-inf` sentinel.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain};
use crate::mdp::{self, EmpiricalMDP, TabularMDP, TabularPolicy};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Real number extended with explicit infinities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtReal {
    Finite(f64),
    PosInf,
    NegInf,
    /// Result of `inf - inf`.
    Undefined,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(x) => Some(x),
            _ => None,
        }
    }

    /// IEEE view: infinities map to `±inf`, undefined to NaN.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtReal::Finite(x) => x,
            ExtReal::PosInf => f64::INFINITY,
            ExtReal::NegInf => f64::NEG_INFINITY,
            ExtReal::Undefined => f64::NAN,
        }
    }

    pub fn abs(self) -> ExtReal {
        match self {
            ExtReal::Finite(x) => ExtReal::Finite(x.abs()),
            ExtReal::PosInf | ExtReal::NegInf => ExtReal::PosInf,
            ExtReal::Undefined => ExtReal::Undefined,
        }
    }
}

impl From<f64> for ExtReal {
    fn from(x: f64) -> Self {
        if x.is_nan() {
            ExtReal::Undefined
        } else if x == f64::INFINITY {
            ExtReal::PosInf
        } else if x == f64::NEG_INFINITY {
            ExtReal::NegInf
        } else {
            ExtReal::Finite(x)
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;
    fn add(self, rhs: ExtReal) -> ExtReal {
        use ExtReal::*;
        match (self, rhs) {
            (Undefined, _) | (_, Undefined) | (PosInf, NegInf) | (NegInf, PosInf) => Undefined,
            (PosInf, _) | (_, PosInf) => PosInf,
            (NegInf, _) | (_, NegInf) => NegInf,
            (Finite(a), Finite(b)) => Finite(a + b),
        }
    }
}

impl Neg for ExtReal {
    type Output = ExtReal;
    fn neg(self) -> ExtReal {
        match self {
            ExtReal::Finite(x) => ExtReal::Finite(-x),
            ExtReal::PosInf => ExtReal::NegInf,
            ExtReal::NegInf => ExtReal::PosInf,
            ExtReal::Undefined => ExtReal::Undefined,
        }
    }
}

impl Sub for ExtReal {
    type Output = ExtReal;
    fn sub(self, rhs: ExtReal) -> ExtReal {
        self + -rhs
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(x) => write!(f, "{x}"),
            ExtReal::PosInf => f.write_str("inf"),
            ExtReal::NegInf => f.write_str("-inf"),
            ExtReal::Undefined => f.write_str("undefined"),
        }
    }
}

/// A sampled tuple whose log-ratio is infinite under some empirical MDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportViolation {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiValue {
    pub value: ExtReal,
    pub violations: Vec<SupportViolation>,
}

/// Shannon entropy in nats.
pub fn entropy(p: &Array1<f64>) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `KL(p || q)`, `+inf` when `q` misses mass of `p`.
pub fn kl(p: impl IntoIterator<Item = f64>, q: impl IntoIterator<Item = f64>) -> ExtReal {
    let mut acc = 0.0;
    for (pi, qi) in p.into_iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return ExtReal::PosInf;
            }
            acc += pi * (pi / qi).ln();
        }
    }
    ExtReal::Finite(acc)
}

/// `ln(num / den)` with the module's zero conventions.
fn log_ratio(num: f64, den: f64) -> ExtReal {
    match (num > 0.0, den > 0.0) {
        (true, true) => ExtReal::Finite((num / den).ln()),
        (false, false) => ExtReal::Finite(0.0),
        (false, true) => ExtReal::NegInf,
        (true, false) => ExtReal::PosInf,
    }
}

fn check_dims(counts: &Array3<u64>, emp: &EmpiricalMDP) -> Result<()> {
    if counts.dim() != emp.counts.dim() {
        return Err(Error::shape(format!(
            "sampler counts {:?} vs empirical MDP {:?}",
            counts.dim(),
            emp.counts.dim()
        )));
    }
    Ok(())
}

/// Frequency-weighted expectation of `f(s, a, s')` over the sampler tuples.
fn expect(
    counts: &Array3<u64>,
    mut f: impl FnMut(usize, usize, usize) -> ExtReal,
) -> (ExtReal, Vec<SupportViolation>) {
    let total: u64 = counts.iter().sum();
    let mut finite = 0.0;
    let mut acc = ExtReal::Finite(0.0);
    let mut violations = Vec::new();
    for ((s, a, s2), &c) in counts.indexed_iter() {
        if c == 0 {
            continue;
        }
        match f(s, a, s2) {
            ExtReal::Finite(x) => finite += c as f64 / total as f64 * x,
            other => {
                violations.push(SupportViolation {
                    state: s,
                    action: a,
                    next_state: s2,
                });
                acc = acc + other;
            }
        }
    }
    (acc + ExtReal::Finite(finite), violations)
}

/// `E_sampler[ln p̂(s'|s,a) / ρ̂(s')]` under the given empirical MDP.
pub fn exact_mi(emp: &EmpiricalMDP, sampler: &Dataset) -> Result<MiValue> {
    exact_mi_counts(emp, &mdp::count_tensor(sampler)?)
}

pub fn exact_mi_counts(emp: &EmpiricalMDP, sampler: &Array3<u64>) -> Result<MiValue> {
    check_dims(sampler, emp)?;
    let (value, violations) = expect(sampler, |s, a, s2| {
        log_ratio(emp.p_hat[[s, a, s2]], emp.rho_hat_next[s2])
    });
    Ok(MiValue { value, violations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiGapReport {
    pub i_tar: ExtReal,
    pub i_src: ExtReal,
    /// `i_tar - i_src`.
    pub delta_i: ExtReal,
    /// `KL(ρ̂_src || ρ̂_tar)` for source data, `KL(ρ̂_tar || ρ̂_src)` for target data.
    pub kl_state: ExtReal,
    /// `E_(s,a)[KL(P̂_src || P̂_tar)]` for source data, `E_(s,a)[KL(P̂_tar || P̂_src)]` for target data.
    pub kl_dynamics: ExtReal,
    pub h_rho_src: f64,
    pub h_rho_tar: f64,
    pub data_domain: Domain,
    pub violations: Vec<SupportViolation>,
}

impl MiGapReport {
    /// The KL side of the decomposition: `kl_state - kl_dynamics` on source
    /// data, `kl_dynamics - kl_state` on target data.
    pub fn identity_rhs(&self) -> ExtReal {
        match self.data_domain {
            Domain::Source => self.kl_state - self.kl_dynamics,
            Domain::Target => self.kl_dynamics - self.kl_state,
        }
    }

    /// `|delta_i - identity_rhs|` when both are finite.
    pub fn identity_residual(&self) -> Option<f64> {
        Some((self.delta_i.finite()? - self.identity_rhs().finite()?).abs())
    }

    pub fn is_finite(&self) -> bool {
        self.delta_i.is_finite()
    }

    /// `-H(ρ̂_src) <= delta_i <= H(ρ̂_tar)` with additive `slack`; `None` when delta_i is infinite.
    pub fn within_entropy_bounds(&self, slack: f64) -> Option<bool> {
        let d = self.delta_i.finite()?;
        Some(-self.h_rho_src - slack <= d && d <= self.h_rho_tar + slack)
    }

    pub const CSV_HEADER: &'static str = "data_domain,i_tar,i_src,delta_i,kl_state,kl_dynamics,h_rho_src,h_rho_tar,identity_rhs,n_violations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.data_domain,
            self.i_tar,
            self.i_src,
            self.delta_i,
            self.kl_state,
            self.kl_dynamics,
            self.h_rho_src,
            self.h_rho_tar,
            self.identity_rhs(),
            self.violations.len()
        )
    }
}

/// Gap report with `data_domain` taken from the sampler's tag.
pub fn mi_gap(src: &EmpiricalMDP, tar: &EmpiricalMDP, sampler: &Dataset) -> Result<MiGapReport> {
    decompose_gap_counts(src, tar, &mdp::count_tensor(sampler)?, sampler.domain)
}

pub fn decompose_gap(
    src: &EmpiricalMDP,
    tar: &EmpiricalMDP,
    sampler: &Dataset,
    data_domain: Domain,
) -> Result<MiGapReport> {
    decompose_gap_counts(src, tar, &mdp::count_tensor(sampler)?, data_domain)
}

/// Computes `delta_i` directly from the two MI terms and, independently, the
/// state-marginal and expected dynamics KL terms for `data_domain`.
pub fn decompose_gap_counts(
    src: &EmpiricalMDP,
    tar: &EmpiricalMDP,
    sampler: &Array3<u64>,
    data_domain: Domain,
) -> Result<MiGapReport> {
    check_dims(sampler, src)?;
    check_dims(sampler, tar)?;
    let i_tar = exact_mi_counts(tar, sampler)?;
    let i_src = exact_mi_counts(src, sampler)?;
    let (from, to) = match data_domain {
        Domain::Source => (src, tar),
        Domain::Target => (tar, src),
    };
    let kl_state = kl(
        from.rho_hat_next.iter().copied(),
        to.rho_hat_next.iter().copied(),
    );
    let kl_dynamics = expected_dynamics_kl(from, to, &sa_weights(sampler));
    let mut violations = i_tar.violations;
    violations.extend(i_src.violations);
    Ok(MiGapReport {
        delta_i: i_tar.value - i_src.value,
        i_tar: i_tar.value,
        i_src: i_src.value,
        kl_state,
        kl_dynamics,
        h_rho_src: entropy(&src.rho_hat_next),
        h_rho_tar: entropy(&tar.rho_hat_next),
        data_domain,
        violations,
    })
}

/// Normalised `(s, a)` frequencies of a count tensor.
pub fn sa_weights(counts: &Array3<u64>) -> Array2<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .sum_axis(ndarray::Axis(2))
        .mapv(|c| c as f64 / total as f64)
}

/// `Σ_(s,a) w(s,a) KL(P_p(.|s,a) || P_q(.|s,a))` over rows of two empirical MDPs.
pub fn expected_dynamics_kl(p: &EmpiricalMDP, q: &EmpiricalMDP, weights: &Array2<f64>) -> ExtReal {
    expected_kl_tensors(&p.p_hat, &q.p_hat, weights)
}

/// Same quantity for any pair of transition tensors, e.g. two true MDPs.
pub fn expected_kl_tensors(p: &Array3<f64>, q: &Array3<f64>, weights: &Array2<f64>) -> ExtReal {
    let mut acc = ExtReal::Finite(0.0);
    for ((s, a), &w) in weights.indexed_iter() {
        if w == 0.0 {
            continue;
        }
        let row = kl(
            p.slice(ndarray::s![s, a, ..]).iter().copied(),
            q.slice(ndarray::s![s, a, ..]).iter().copied(),
        );
        acc = acc
            + match row {
                ExtReal::Finite(x) => ExtReal::Finite(w * x),
                other => other,
            };
    }
    acc
}

/// `E_sampler[ln P̂_tar(s'|s,a) / P̂_src(s'|s,a)]`.
pub fn dynamics_ratio_exact(
    src: &EmpiricalMDP,
    tar: &EmpiricalMDP,
    sampler: &Dataset,
) -> Result<MiValue> {
    dynamics_ratio_counts(src, tar, &mdp::count_tensor(sampler)?)
}

pub fn dynamics_ratio_counts(
    src: &EmpiricalMDP,
    tar: &EmpiricalMDP,
    sampler: &Array3<u64>,
) -> Result<MiValue> {
    check_dims(sampler, src)?;
    check_dims(sampler, tar)?;
    let (value, violations) = expect(sampler, |s, a, s2| {
        let (pt, ps) = (tar.p_hat[[s, a, s2]], src.p_hat[[s, a, s2]]);
        // a tuple outside the target support is an unbounded ratio even if
        // the source estimate is also zero
        if pt == 0.0 {
            ExtReal::NegInf
        } else {
            log_ratio(pt, ps)
        }
    });
    Ok(MiValue { value, violations })
}

/// Right-hand side of the performance-difference bound,
/// `-(γ R_max / (1-γ)²) {2 E_ρ̂tar[TV(P_tar, P̂_tar)] + sqrt(2 KL(ρ̂_src||ρ̂_tar) + 2|ΔI|)}`.
///
/// The TV expectation is over the normalised discounted `(s, a)` occupancy of
/// `policy` in the target empirical MDP.
pub fn performance_bound_rhs(
    true_tar: &TabularMDP,
    tar: &EmpiricalMDP,
    src: &EmpiricalMDP,
    policy: &TabularPolicy,
    r_max: f64,
    report: &MiGapReport,
) -> Result<ExtReal> {
    let kl_state = kl(
        src.rho_hat_next.iter().copied(),
        tar.rho_hat_next.iter().copied(),
    );
    let inner = match (kl_state, report.delta_i.abs()) {
        (ExtReal::Finite(k), ExtReal::Finite(d)) => (2.0 * k + 2.0 * d).sqrt(),
        _ => return Ok(ExtReal::NegInf),
    };
    let emp_tar = tar.to_mdp(true_tar)?;
    let rho_s = mdp::discounted_visitation(&emp_tar, policy)?;
    let mut tv = 0.0;
    for s in 0..true_tar.n_states {
        for a in 0..true_tar.n_actions {
            let w = rho_s[s] * policy.probs[[s, a]];
            if w == 0.0 {
                continue;
            }
            let l1: f64 = (0..true_tar.n_states)
                .map(|s2| (true_tar.transition[[s, a, s2]] - emp_tar.transition[[s, a, s2]]).abs())
                .sum();
            tv += w * 0.5 * l1;
        }
    }
    let g = true_tar.discount;
    let scale = g * r_max / (1.0 - g).powi(2);
    Ok(ExtReal::Finite(-scale * (2.0 * tv + inner)))
}

/// Score pair of the two-function contrastive objective: `positive` scores the
/// target tuple, `negative` the constructed tuples with source next states.
pub trait ContrastScore: Sync {
    fn positive(&self, s: usize, a: usize, s_next: usize) -> f64;
    fn negative(&self, s: usize, a: usize, s_next: usize) -> f64;
}

/// One score function used for both roles.
pub struct SingleScore<F>(pub F);

impl<F: Fn(usize, usize, usize) -> f64 + Sync> ContrastScore for SingleScore<F> {
    fn positive(&self, s: usize, a: usize, s2: usize) -> f64 {
        (self.0)(s, a, s2)
    }
    fn negative(&self, s: usize, a: usize, s2: usize) -> f64 {
        (self.0)(s, a, s2)
    }
}

/// Information-density scores: `P̂_tar/ρ̂_tar` on positives, `P̂_src/ρ̂_src` on negatives.
pub struct DensityRatioScore<'a> {
    pub tar: &'a EmpiricalMDP,
    pub src: &'a EmpiricalMDP,
}

fn density(emp: &EmpiricalMDP, s: usize, a: usize, s2: usize) -> f64 {
    let r = emp.rho_hat_next[s2];
    if r > 0.0 {
        emp.p_hat[[s, a, s2]] / r
    } else {
        0.0
    }
}

impl ContrastScore for DensityRatioScore<'_> {
    fn positive(&self, s: usize, a: usize, s2: usize) -> f64 {
        density(self.tar, s, a, s2)
    }
    fn negative(&self, s: usize, a: usize, s2: usize) -> f64 {
        density(self.src, s, a, s2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
}

const MC_BLOCK: usize = 4096;

/// Contrastive loss `-E ln[h⁺ / (h⁺ + Σ_{K-1} h⁻)]` with positives drawn from
/// the target empirical tuple frequencies and K-1 i.i.d. negatives from
/// `ρ̂_src`. `k` counts candidates (negatives + 1).
pub fn exact_infonce(
    score: &dyn ContrastScore,
    tar: &EmpiricalMDP,
    src: &EmpiricalMDP,
    k: usize,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "k = {k}: need at least one negative (k >= 2)"
        )));
    }
    if draws < 2 {
        return Err(Error::invalid("need at least two Monte-Carlo draws"));
    }
    let tuples: Vec<(usize, usize, usize)> = tar
        .counts
        .indexed_iter()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| i)
        .collect();
    let weights: Vec<f64> = tar
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64)
        .collect();
    let rho_src = src.rho_hat_next.to_vec();
    let n_blocks = draws.div_ceil(MC_BLOCK);
    let blocks = par::map_indexed(n_blocks, exec, |b| {
        let mut rng: Rng = rng::stream(seed, b as u64);
        let n = MC_BLOCK.min(draws - b * MC_BLOCK);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let (s, a, s2) = tuples[rng::categorical(&weights, &mut rng)];
            let pos = score.positive(s, a, s2);
            let mut denom = pos;
            for _ in 0..k - 1 {
                denom += score.negative(s, a, rng::categorical(&rho_src, &mut rng));
            }
            let l = -(pos / denom).ln();
            sum += l;
            sq += l * l;
        }
        (sum, sq)
    });
    let (sum, sq) = blocks
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let n = draws as f64;
    let mean = sum / n;
    let var = ((sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        draws,
    })
}
