//! Tabular MDPs, behaviour sampling, count-based empirical MDPs and exact
//! policy evaluation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Axis};

use crate::data::{Dataset, Domain, Space, Transition};
use crate::rng::{self, Rng};
use crate::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[[s, a, s']]`
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    pub discount: f64,
    pub initial_dist: Array1<f64>,
    /// Absorbing states that end an episode when entered.
    pub terminal: Vec<bool>,
}

impl TabularMDP {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        discount: f64,
        initial_dist: Array1<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid(
                "MDP needs at least one state and one action",
            ));
        }
        if n_next != n_states {
            return Err(Error::shape(format!(
                "transition tensor is {n_states}x{n_actions}x{n_next}; last axis must equal the state count"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::shape(format!(
                "reward is {:?}, expected ({n_states}, {n_actions})",
                reward.dim()
            )));
        }
        if initial_dist.len() != n_states || terminal.len() != n_states {
            return Err(Error::shape("initial distribution / terminal mask length"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid(format!(
                "discount {discount} must lie in [0, 1)"
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                check_distribution(row.iter().copied(), &format!("P(.|{s},{a})"))?;
            }
        }
        check_distribution(initial_dist.iter().copied(), "initial distribution")?;
        Ok(TabularMDP {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            initial_dist,
            terminal,
        })
    }

    pub fn space(&self) -> Space {
        Space::Tabular {
            n_states: self.n_states,
            n_actions: self.n_actions,
        }
    }

    /// State-to-state kernel and expected reward under `policy`.
    pub fn under_policy(&self, policy: &TabularPolicy) -> (Array2<f64>, Array1<f64>) {
        let mut p = Array2::zeros((self.n_states, self.n_states));
        let mut r = Array1::zeros(self.n_states);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                r[s] += w * self.reward[[s, a]];
                for s2 in 0..self.n_states {
                    p[[s, s2]] += w * self.transition[[s, a, s2]];
                }
            }
        }
        (p, r)
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    }
}

fn check_distribution(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!(
                "{what} has a negative or non-finite entry"
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::invalid(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// `probs[[s, a]]`
    pub probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.axis_iter(Axis(0)).enumerate() {
            check_distribution(row.iter().copied(), &format!("pi(.|{s})"))?;
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        TabularPolicy { probs }
    }

    /// Greedy in `q`, ties to the lowest action index.
    pub fn greedy(q: &Array2<f64>) -> Self {
        let n_actions = q.ncols();
        let actions: Vec<usize> = q
            .axis_iter(Axis(0))
            .map(|row| argmax(row.iter().copied()))
            .collect();
        Self::deterministic(&actions, n_actions)
    }

    /// Mix `1 - eps` of the greedy action with `eps` spread uniformly, per state.
    pub fn epsilon_greedy(q: &Array2<f64>, eps: &[f64]) -> Self {
        let (n_states, n_actions) = q.dim();
        let mut probs = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            let best = argmax(q.row(s).iter().copied());
            for a in 0..n_actions {
                probs[[s, a]] = eps[s] / n_actions as f64;
            }
            probs[[s, best]] += 1.0 - eps[s];
        }
        TabularPolicy { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        rng::categorical(self.probs.row(s).as_slice().expect("contiguous row"), rng)
    }

    pub fn argmax_actions(&self) -> Vec<usize> {
        self.probs
            .axis_iter(Axis(0))
            .map(|row| argmax(row.iter().copied()))
            .collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Provenance recorded on sampled datasets.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub domain: Domain,
    pub env_id: String,
    pub behavior_id: String,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            domain: Domain::Target,
            env_id: "tabular".into(),
            behavior_id: "unknown".into(),
        }
    }
}

/// Roll out `policy` in `mdp` until `n_transitions` are collected.
///
/// Episodes restart from the initial distribution after `horizon` steps or on
/// entering a terminal state.
pub fn sample_dataset(
    mdp: &TabularMDP,
    policy: &TabularPolicy,
    n_transitions: usize,
    horizon: usize,
    seed: u64,
    meta: &DatasetMeta,
) -> Result<Dataset> {
    if n_transitions == 0 || horizon == 0 {
        return Err(Error::invalid(
            "n_transitions and horizon must be at least 1",
        ));
    }
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(Error::shape("policy table does not match the MDP"));
    }
    let mut rng = rng::seeded(seed);
    let init = mdp.initial_dist.as_slice().expect("contiguous");
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut s = rng::categorical(init, &mut rng);
    let mut t = 0;
    while transitions.len() < n_transitions {
        let a = policy.sample(s, &mut rng);
        let row = mdp.transition.slice(ndarray::s![s, a, ..]);
        let s2 = rng::categorical(row.as_slice().expect("contiguous"), &mut rng);
        let terminal = mdp.terminal[s2];
        transitions.push(Transition::tabular(s, a, mdp.reward[[s, a]], s2, terminal));
        t += 1;
        if terminal || t >= horizon {
            s = rng::categorical(init, &mut rng);
            t = 0;
        } else {
            s = s2;
        }
    }
    Dataset::new(
        transitions,
        meta.domain,
        meta.env_id.clone(),
        meta.behavior_id.clone(),
        seed,
        mdp.space(),
    )
}

/// Count-based maximum-likelihood dynamics of a tabular dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMDP {
    pub counts: Array3<u64>,
    pub p_hat: Array3<f64>,
    /// Frequency of each state in the next-state column.
    pub rho_hat_next: Array1<f64>,
    pub support_mask: Array2<bool>,
}

impl EmpiricalMDP {
    pub fn from_counts(counts: Array3<u64>) -> Result<Self> {
        let (ns, na, nn) = counts.dim();
        if ns != nn {
            return Err(Error::shape("count tensor must be [state, action, state]"));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid(
                "empirical MDP needs at least one transition",
            ));
        }
        let mut p_hat = Array3::zeros((ns, na, ns));
        let mut support_mask = Array2::from_elem((ns, na), false);
        let mut rho = Array1::zeros(ns);
        for s in 0..ns {
            for a in 0..na {
                let row_total: u64 = counts.slice(ndarray::s![s, a, ..]).sum();
                if row_total == 0 {
                    continue;
                }
                support_mask[[s, a]] = true;
                for s2 in 0..ns {
                    let c = counts[[s, a, s2]];
                    p_hat[[s, a, s2]] = c as f64 / row_total as f64;
                    rho[s2] += c as f64;
                }
            }
        }
        rho.mapv_inplace(|c: f64| c / total as f64);
        Ok(EmpiricalMDP {
            counts,
            p_hat,
            rho_hat_next: rho,
            support_mask,
        })
    }

    pub fn n_states(&self) -> usize {
        self.counts.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.counts.dim().1
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Empirical frequency of each (s, a) pair.
    pub fn sa_frequency(&self) -> Array2<f64> {
        let total = self.total() as f64;
        self.counts.sum_axis(Axis(2)).mapv(|c| c as f64 / total)
    }

    /// Replace the dynamics of an MDP with this estimate; unsupported rows become self-loops.
    pub fn to_mdp(&self, like: &TabularMDP) -> Result<TabularMDP> {
        let mut transition = self.p_hat.clone();
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                if !self.support_mask[[s, a]] {
                    transition[[s, a, s]] = 1.0;
                }
            }
        }
        TabularMDP::new(
            transition,
            like.reward.clone(),
            like.discount,
            like.initial_dist.clone(),
            like.terminal.clone(),
        )
    }
}

pub fn count_tensor(dataset: &Dataset) -> Result<Array3<u64>> {
    let Space::Tabular {
        n_states,
        n_actions,
    } = dataset.space
    else {
        return Err(Error::UnsupportedKind {
            expected: "tabular",
            found: dataset.space.kind_name(),
        });
    };
    let mut counts = Array3::zeros((n_states, n_actions, n_states));
    for t in &dataset.transitions {
        let (s, a, s2) = tabular_ids(t);
        counts[[s, a, s2]] += 1;
    }
    Ok(counts)
}

pub fn estimate_empirical(dataset: &Dataset) -> Result<EmpiricalMDP> {
    EmpiricalMDP::from_counts(count_tensor(dataset)?)
}

pub(crate) fn tabular_ids(t: &Transition) -> (usize, usize, usize) {
    (
        t.state.id().expect("tabular state"),
        t.action.id().expect("tabular action"),
        t.next_state.id().expect("tabular next state"),
    )
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

fn check_policy(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(Error::shape("policy table does not match the MDP"));
    }
    Ok(())
}

/// Normalised discounted state occupancy, `(1 - γ) Σ_{t≥0} γ^t P(s_t = s)`.
pub fn discounted_visitation(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<Array1<f64>> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states;
    let (p, _) = mdp.under_policy(policy);
    let g = mdp.discount;
    // (I - γ Pᵀ) ρ = (1 - γ) ρ₀
    let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - g * p[[j, i]]);
    let b = DVector::from_fn(n, |i, _| (1.0 - g) * mdp.initial_dist[i]);
    let x = solve(a, b)?;
    let total: f64 = x.iter().sum();
    Ok(Array1::from_iter(x.iter().map(|v| (v / total).max(0.0))))
}

/// State values of `policy` by a direct linear solve.
pub fn policy_values(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<Array1<f64>> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states;
    let (p, r) = mdp.under_policy(policy);
    let g = mdp.discount;
    let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - g * p[[i, j]]);
    let b = DVector::from_fn(n, |i, _| r[i]);
    Ok(Array1::from_iter(solve(a, b)?.iter().copied()))
}

/// Exact discounted return `ρ₀ᵀ V_π`.
pub fn policy_return(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<f64> {
    Ok(mdp.initial_dist.dot(&policy_values(mdp, policy)?))
}

/// Iterative policy evaluation run until successive sweeps differ by less than `tol`.
pub fn iterative_policy_values(
    mdp: &TabularMDP,
    policy: &TabularPolicy,
    tol: f64,
) -> Result<Array1<f64>> {
    check_policy(mdp, policy)?;
    let (p, r) = mdp.under_policy(policy);
    let mut v = Array1::zeros(mdp.n_states);
    loop {
        let next = &r + &(p.dot(&v) * mdp.discount);
        let delta = (&next - &v).fold(0.0f64, |m, d| m.max(d.abs()));
        v = next;
        if delta < tol {
            return Ok(v);
        }
    }
}

/// Optimal action values by value iteration.
pub fn value_iteration(mdp: &TabularMDP, tol: f64) -> Array2<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = Array2::<f64>::zeros((ns, na));
    loop {
        let v: Array1<f64> =
            q.map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
        let mut next = mdp.reward.clone();
        for s in 0..ns {
            for a in 0..na {
                let row = mdp.transition.slice(ndarray::s![s, a, ..]);
                next[[s, a]] += mdp.discount * row.dot(&v);
            }
        }
        let delta = (&next - &q).fold(0.0f64, |m, d| m.max(d.abs()));
        q = next;
        if delta < tol {
            return q;
        }
    }
}

/// Expected undiscounted return over `horizon` steps (episodes stop in terminal states).
pub fn finite_horizon_return(
    mdp: &TabularMDP,
    policy: &TabularPolicy,
    horizon: usize,
) -> Result<f64> {
    check_policy(mdp, policy)?;
    let (p, r) = mdp.under_policy(policy);
    let live: Array1<f64> = mdp
        .terminal
        .iter()
        .map(|&t| if t { 0.0 } else { 1.0 })
        .collect();
    // values of states from which `k` steps remain; terminal states contribute nothing
    let mut v = Array1::<f64>::zeros(mdp.n_states);
    for _ in 0..horizon {
        v = (&r + &p.dot(&v)) * &live;
    }
    Ok(mdp.initial_dist.dot(&v))
}

/// Probability of entering a state in `goal` within `horizon` steps, per start state.
pub fn hitting_probability(
    mdp: &TabularMDP,
    policy: &TabularPolicy,
    goal: &[bool],
    horizon: usize,
) -> Result<Array1<f64>> {
    check_policy(mdp, policy)?;
    let (p, _) = mdp.under_policy(policy);
    let hit: Array1<f64> = goal.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let mut h = hit.clone();
    for _ in 0..horizon {
        let step = p.dot(&h);
        h = Array1::from_iter((0..mdp.n_states).map(|s| if goal[s] { 1.0 } else { step[s] }));
    }
    Ok(h)
}
