//! Slippery gridworlds and the broken-action variant.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::mdp::TabularMDP;
use crate::{Error, Result};

/// Moves for actions 0..4: up, right, down, left (y grows downwards).
pub const MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridworldShiftSpec {
    pub width: usize,
    pub height: usize,
    pub slip_source: f64,
    pub slip_target: f64,
    /// Goal cell `(x, y)`; absorbing and terminal.
    pub goal: (usize, usize),
    pub step_reward: f64,
    /// Reward for any action taken inside the goal cell. Since the goal is
    /// terminal this is never observed in sampled data; keep it 0 so exact
    /// returns agree with episodic returns.
    pub goal_reward: f64,
    pub discount: f64,
}

impl Default for GridworldShiftSpec {
    fn default() -> Self {
        GridworldShiftSpec {
            width: 5,
            height: 5,
            slip_source: 0.1,
            slip_target: 0.4,
            goal: (4, 4),
            step_reward: -1.0,
            goal_reward: 0.0,
            discount: 0.99,
        }
    }
}

/// Gridworld whose source domain has a broken action: taking it knocks the
/// agent, with probability `p_fall`, into an absorbing "fallen" state that the
/// target domain never reaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrokenActionSpec {
    pub width: usize,
    pub height: usize,
    pub broken_action: usize,
    pub p_fall: f64,
    pub slip: f64,
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub discount: f64,
}

impl Default for BrokenActionSpec {
    fn default() -> Self {
        BrokenActionSpec {
            width: 5,
            height: 5,
            broken_action: 1,
            p_fall: 0.5,
            slip: 0.0,
            goal: (4, 4),
            step_reward: -1.0,
            goal_reward: 0.0,
            discount: 0.99,
        }
    }
}

fn check_grid(width: usize, height: usize, goal: (usize, usize), discount: f64) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("grid dimensions must be positive"));
    }
    if goal.0 >= width || goal.1 >= height {
        return Err(Error::invalid(format!(
            "goal {goal:?} outside a {width}x{height} grid"
        )));
    }
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::invalid("discount must lie in [0, 1)"));
    }
    Ok(())
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{what} = {p} is not a probability")));
    }
    Ok(())
}

struct Grid {
    width: usize,
    height: usize,
    goal: usize,
}

impl Grid {
    fn cells(&self) -> usize {
        self.width * self.height
    }

    fn step(&self, s: usize, dir: usize) -> usize {
        let (x, y) = ((s % self.width) as i64, (s / self.width) as i64);
        let (dx, dy) = MOVES[dir];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            s
        } else {
            ny as usize * self.width + nx as usize
        }
    }

    /// Adds the slippery-move distribution of `(s, a)` scaled by `mass` into `row`.
    fn add_move(&self, s: usize, a: usize, slip: f64, mass: f64, row: &mut [f64]) {
        for (dir, _) in MOVES.iter().enumerate() {
            let p = if dir == a { 1.0 - slip } else { slip / 3.0 };
            if p > 0.0 {
                row[self.step(s, dir)] += mass * p;
            }
        }
    }

    fn assemble(
        &self,
        n_states: usize,
        mut fill: impl FnMut(usize, usize, &mut [f64]),
        step_reward: f64,
        goal_reward: f64,
        discount: f64,
        extra_absorbing: &[usize],
    ) -> Result<TabularMDP> {
        let mut t = Array3::zeros((n_states, 4, n_states));
        let mut r = Array2::from_elem((n_states, 4), step_reward);
        let mut terminal = vec![false; n_states];
        for s in 0..n_states {
            let absorbing = s == self.goal || extra_absorbing.contains(&s);
            for a in 0..4 {
                let mut row = vec![0.0; n_states];
                if absorbing {
                    row[s] = 1.0;
                } else {
                    fill(s, a, &mut row);
                }
                for (s2, p) in row.into_iter().enumerate() {
                    t[[s, a, s2]] = p;
                }
            }
            if absorbing {
                terminal[s] = true;
            }
            if s == self.goal {
                r.row_mut(s).fill(goal_reward);
            }
        }
        let starts: Vec<bool> = (0..n_states).map(|s| !terminal[s]).collect();
        let n_start = starts.iter().filter(|&&b| b).count() as f64;
        let init = Array1::from_iter(starts.iter().map(|&b| if b { 1.0 / n_start } else { 0.0 }));
        normalise_rows(&mut t);
        TabularMDP::new(t, r, discount, init, terminal)
    }
}

/// Re-normalise rows so accumulated rounding stays inside the 1e-12 row tolerance.
fn normalise_rows(t: &mut Array3<f64>) {
    let (ns, na, _) = t.dim();
    for s in 0..ns {
        for a in 0..na {
            let mut row = t.slice_mut(ndarray::s![s, a, ..]);
            let sum = row.sum();
            row.mapv_inplace(|p| p / sum);
        }
    }
}

/// Single gridworld with slip probability `slip`.
pub fn gridworld(spec: &GridworldShiftSpec, slip: f64) -> Result<TabularMDP> {
    check_grid(spec.width, spec.height, spec.goal, spec.discount)?;
    check_prob(slip, "slip")?;
    let grid = Grid {
        width: spec.width,
        height: spec.height,
        goal: spec.goal.1 * spec.width + spec.goal.0,
    };
    grid.assemble(
        grid.cells(),
        |s, a, row| grid.add_move(s, a, slip, 1.0, row),
        spec.step_reward,
        spec.goal_reward,
        spec.discount,
        &[],
    )
}

/// Source and target gridworlds differing only in slip probability.
pub fn make_gridworld_pair(spec: &GridworldShiftSpec) -> Result<(TabularMDP, TabularMDP)> {
    check_prob(spec.slip_source, "slip_source")?;
    check_prob(spec.slip_target, "slip_target")?;
    Ok((
        gridworld(spec, spec.slip_source)?,
        gridworld(spec, spec.slip_target)?,
    ))
}

/// Source (broken action) and target (intact) MDPs over `width * height + 1`
/// states; the last state is the fallen state.
pub fn make_broken_pair(spec: &BrokenActionSpec) -> Result<(TabularMDP, TabularMDP)> {
    check_grid(spec.width, spec.height, spec.goal, spec.discount)?;
    check_prob(spec.p_fall, "p_fall")?;
    check_prob(spec.slip, "slip")?;
    if spec.broken_action >= 4 {
        return Err(Error::invalid("broken_action must be one of 0..4"));
    }
    let grid = Grid {
        width: spec.width,
        height: spec.height,
        goal: spec.goal.1 * spec.width + spec.goal.0,
    };
    let fallen = grid.cells();
    let n = fallen + 1;
    let build = |broken: bool| {
        grid.assemble(
            n,
            |s, a, row| {
                if broken && a == spec.broken_action {
                    row[fallen] += spec.p_fall;
                    grid.add_move(s, a, spec.slip, 1.0 - spec.p_fall, row);
                } else {
                    grid.add_move(s, a, spec.slip, 1.0, row);
                }
            },
            spec.step_reward,
            spec.goal_reward,
            spec.discount,
            &[fallen],
        )
    };
    Ok((build(true)?, build(false)?))
}
