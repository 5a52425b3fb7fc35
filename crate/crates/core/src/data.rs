//! Offline transitions, tagged datasets and the canonical text format.
//!
//! ```text
//! igdf-dataset v1; kind=tabular; domain=source; env=gridworld/slip; seed=7; n=3; behavior=medium; dims=25,4
//! 0, 1, -1.00000000000000000, 5, 0
//! ```
//!
//! The first six header keys are mandatory and always written in that order.
//! `behavior` and `dims` follow as extension keys; `dims` is the number of
//! states and actions for tabular data and the state/action vector widths for
//! continuous data. Records are `s, a, r, s_next, terminal` separated by `", "`;
//! vectors are joined with a bare `,`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;

use crate::rng::Rng;
use crate::{Error, Result};

const MAGIC: &str = "igdf-dataset v1";
const DECIMALS: usize = 17;

/// A state or action: an integer id for tabular spaces, a real vector otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Point {
    Id(usize),
    Vector(Vec<f64>),
}

impl Point {
    pub fn id(&self) -> Option<usize> {
        match self {
            Point::Id(i) => Some(*i),
            Point::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Point::Id(_) => None,
            Point::Vector(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Point,
    pub action: Point,
    pub reward: f64,
    pub next_state: Point,
    pub terminal: bool,
}

impl Transition {
    pub fn tabular(s: usize, a: usize, r: f64, s_next: usize, terminal: bool) -> Self {
        Transition {
            state: Point::Id(s),
            action: Point::Id(a),
            reward: r,
            next_state: Point::Id(s_next),
            terminal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// State/action space shared by every transition of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Tabular { n_states: usize, n_actions: usize },
    Continuous { state_dim: usize, action_dim: usize },
}

impl Space {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Space::Tabular { .. } => "tabular",
            Space::Continuous { .. } => "continuous",
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Space::Tabular { .. })
    }

    /// Width of the network input encoding a state (one-hot for tabular).
    pub fn state_width(&self) -> usize {
        match *self {
            Space::Tabular { n_states, .. } => n_states,
            Space::Continuous { state_dim, .. } => state_dim,
        }
    }

    pub fn action_width(&self) -> usize {
        match *self {
            Space::Tabular { n_actions, .. } => n_actions,
            Space::Continuous { action_dim, .. } => action_dim,
        }
    }

    /// Append the network encoding of a state to `out`.
    pub fn push_state(&self, p: &Point, out: &mut Vec<f64>) {
        push_point(p, self.state_width(), out)
    }

    pub fn push_action(&self, p: &Point, out: &mut Vec<f64>) {
        push_point(p, self.action_width(), out)
    }

    pub fn check_point(&self, p: &Point, is_state: bool) -> Result<()> {
        let width = if is_state {
            self.state_width()
        } else {
            self.action_width()
        };
        match (self, p) {
            (Space::Tabular { .. }, Point::Id(i)) if *i < width => Ok(()),
            (Space::Continuous { .. }, Point::Vector(v)) if v.len() == width => Ok(()),
            _ => Err(Error::shape(format!(
                "{p:?} does not belong to {} space of width {width}",
                self.kind_name()
            ))),
        }
    }
}

fn push_point(p: &Point, width: usize, out: &mut Vec<f64>) {
    match p {
        Point::Id(i) => {
            let start = out.len();
            out.resize(start + width, 0.0);
            out[start + i] = 1.0;
        }
        Point::Vector(v) => out.extend_from_slice(v),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub domain: Domain,
    pub env_id: String,
    pub behavior_id: String,
    pub seed: u64,
    pub space: Space,
}

impl Dataset {
    pub fn new(
        transitions: Vec<Transition>,
        domain: Domain,
        env_id: impl Into<String>,
        behavior_id: impl Into<String>,
        seed: u64,
        space: Space,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::invalid(
                "dataset must contain at least one transition",
            ));
        }
        for t in &transitions {
            space.check_point(&t.state, true)?;
            space.check_point(&t.action, false)?;
            space.check_point(&t.next_state, true)?;
        }
        Ok(Dataset {
            transitions,
            domain,
            env_id: env_id.into(),
            behavior_id: behavior_id.into(),
            seed,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    /// Uniformly random subset holding `ceil(fraction * len)` transitions, in original order.
    pub fn subsample(&self, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "subsample fraction {fraction} not in (0, 1]"
            )));
        }
        let keep = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len());
        let mut idx = index::sample(rng, self.len(), keep).into_vec();
        idx.sort_unstable();
        let transitions = idx
            .into_iter()
            .map(|i| self.transitions[i].clone())
            .collect();
        Ok(Dataset {
            transitions,
            ..self.clone_header()
        })
    }

    /// Same header, rewards replaced by `f(index, transition)`.
    pub fn map_rewards(&self, mut f: impl FnMut(usize, &Transition) -> f64) -> Dataset {
        let transitions = self
            .transitions
            .iter()
            .enumerate()
            .map(|(i, t)| Transition {
                reward: f(i, t),
                ..t.clone()
            })
            .collect();
        Dataset {
            transitions,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            transitions: Vec::new(),
            domain: self.domain,
            env_id: self.env_id.clone(),
            behavior_id: self.behavior_id.clone(),
            seed: self.seed,
            space: self.space,
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let (d0, d1) = match self.space {
            Space::Tabular {
                n_states,
                n_actions,
            } => (n_states, n_actions),
            Space::Continuous {
                state_dim,
                action_dim,
            } => (state_dim, action_dim),
        };
        writeln!(
            w,
            "{MAGIC}; kind={}; domain={}; env={}; seed={}; n={}; behavior={}; dims={d0},{d1}",
            self.space.kind_name(),
            self.domain,
            self.env_id,
            self.seed,
            self.len(),
            self.behavior_id,
        )?;
        let mut line = String::new();
        for t in &self.transitions {
            line.clear();
            fmt_point(&t.state, &mut line);
            line.push_str(", ");
            fmt_point(&t.action, &mut line);
            line.push_str(", ");
            line.push_str(&fmt_real(t.reward));
            line.push_str(", ");
            fmt_point(&t.next_state, &mut line);
            line.push_str(if t.terminal { ", 1" } else { ", 0" });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("dataset text is ASCII")
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty dataset file"))??;
        let h = Header::parse(&header)?;
        let mut transitions = Vec::with_capacity(h.n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(parse_record(&line, h.space).map_err(|m| Error::parse(i + 2, m))?);
        }
        if transitions.len() != h.n {
            return Err(Error::parse(
                1,
                format!(
                    "header declares n={} but found {} records",
                    h.n,
                    transitions.len()
                ),
            ));
        }
        Dataset::new(transitions, h.domain, h.env, h.behavior, h.seed, h.space)
    }

    pub fn from_text(s: &str) -> Result<Dataset> {
        Dataset::read_text(s.as_bytes())
    }
}

struct Header {
    space: Space,
    domain: Domain,
    env: String,
    seed: u64,
    n: usize,
    behavior: String,
}

impl Header {
    fn parse(line: &str) -> Result<Header> {
        let mut parts = line.split("; ");
        if parts.next() != Some(MAGIC) {
            return Err(Error::parse(1, format!("expected `{MAGIC}` header")));
        }
        let mut kv = Vec::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::parse(1, format!("malformed header field `{p}`")))?;
            kv.push((k, v));
        }
        let required = ["kind", "domain", "env", "seed", "n"];
        for (i, key) in required.iter().enumerate() {
            if kv.get(i).map(|(k, _)| k) != Some(key) {
                return Err(Error::parse(
                    1,
                    format!("header field {} must be `{key}`", i + 1),
                ));
            }
        }
        let mut behavior = String::from("unknown");
        let mut dims = None;
        for (k, v) in &kv[required.len()..] {
            match *k {
                "behavior" => behavior = v.to_string(),
                "dims" => {
                    let (a, b) = v
                        .split_once(',')
                        .ok_or_else(|| Error::parse(1, "dims must be `<a>,<b>`"))?;
                    dims = Some((parse_num::<usize>(a, 1)?, parse_num::<usize>(b, 1)?));
                }
                other => return Err(Error::parse(1, format!("unknown header key `{other}`"))),
            }
        }
        let (d0, d1) = dims.ok_or_else(|| Error::parse(1, "missing `dims` header key"))?;
        let space = match kv[0].1 {
            "tabular" => Space::Tabular {
                n_states: d0,
                n_actions: d1,
            },
            "continuous" => Space::Continuous {
                state_dim: d0,
                action_dim: d1,
            },
            other => return Err(Error::parse(1, format!("unknown kind `{other}`"))),
        };
        Ok(Header {
            space,
            domain: kv[1]
                .1
                .parse()
                .map_err(|e: Error| Error::parse(1, e.to_string()))?,
            env: kv[2].1.to_string(),
            seed: parse_num(kv[3].1, 1)?,
            n: parse_num(kv[4].1, 1)?,
            behavior,
        })
    }
}

fn parse_num<T: FromStr>(s: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("cannot parse `{s}` as a number")))
}

fn parse_record(line: &str, space: Space) -> std::result::Result<Transition, String> {
    let fields: Vec<&str> = line.split(", ").collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let point = |s: &str, tabular: bool| -> std::result::Result<Point, String> {
        if tabular {
            s.trim()
                .parse()
                .map(Point::Id)
                .map_err(|_| format!("bad id `{s}`"))
        } else {
            s.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| format!("bad real `{x}`"))
                })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Point::Vector)
        }
    };
    let tab = space.is_tabular();
    let terminal = match fields[4].trim() {
        "0" => false,
        "1" => true,
        other => return Err(format!("terminal must be 0 or 1, got `{other}`")),
    };
    Ok(Transition {
        state: point(fields[0], tab)?,
        action: point(fields[1], tab)?,
        reward: fields[2]
            .trim()
            .parse()
            .map_err(|_| format!("bad reward `{}`", fields[2]))?,
        next_state: point(fields[3], tab)?,
        terminal,
    })
}

pub(crate) fn fmt_real(x: f64) -> String {
    let s = format!("{x:.DECIMALS$}");
    // keep "-0.000..." out of the files so equal values serialise equally
    if x == 0.0 {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn fmt_point(p: &Point, out: &mut String) {
    match p {
        Point::Id(i) => out.push_str(&i.to_string()),
        Point::Vector(v) => {
            for (k, x) in v.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&fmt_real(*x));
            }
        }
    }
}
