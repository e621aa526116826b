//! Trajectories, provenance tags and the plain-text episode format.
//!
//! File format: a header line `# episodes K H`, then one episode per line as
//! space-separated `s1 a1 s2 a2 ... sH aH` with 1-based indices.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{sample_trajectory, PolicyMixture, TabularMdp};

/// Where an episode came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Offline1,
    Offline2,
    /// Stage-1 sampling for step `h` (1-based); the slot `h = H` holds the
    /// initial-state episodes.
    Prepare(usize),
    Imitate,
    Explore,
    Eval,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Offline1 => write!(f, "offline1"),
            Provenance::Offline2 => write!(f, "offline2"),
            Provenance::Prepare(h) => write!(f, "prepare({h})"),
            Provenance::Imitate => write!(f, "imitate"),
            Provenance::Explore => write!(f, "explore"),
            Provenance::Eval => write!(f, "eval"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = crate::Error;

    fn from_str(text: &str) -> Result<Self> {
        Ok(match text {
            "offline1" => Provenance::Offline1,
            "offline2" => Provenance::Offline2,
            "imitate" => Provenance::Imitate,
            "explore" => Provenance::Explore,
            "eval" => Provenance::Eval,
            other => match other.strip_prefix("prepare(").and_then(|r| r.strip_suffix(')')) {
                Some(h) => Provenance::Prepare(
                    h.parse().map_err(|_| crate::Error::InvalidInput(format!("bad provenance tag {other}")))?,
                ),
                None => return invalid(format!("unknown provenance tag {other}")),
            },
        })
    }
}

/// One (possibly truncated) episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    states: Vec<usize>,
    actions: Vec<usize>,
    provenance: Provenance,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if states.is_empty() {
            return invalid("trajectory must contain at least one step");
        }
        if states.len() != actions.len() {
            return invalid(format!("{} states but {} actions", states.len(), actions.len()));
        }
        Ok(Self { states, actions, provenance })
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    fn check_bounds(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.states.iter().any(|&s| s >= num_states) || self.actions.iter().any(|&a| a >= num_actions) {
            return invalid(format!("trajectory index out of range for S={num_states}, A={num_actions}"));
        }
        Ok(())
    }
}

/// An ordered collection of episodes sharing one horizon.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectoryDataset {
    horizon: usize,
    episodes: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(horizon: usize, episodes: Vec<Trajectory>) -> Result<Self> {
        if horizon == 0 {
            return invalid("dataset horizon must be positive");
        }
        if let Some(t) = episodes.iter().find(|t| t.len() > horizon) {
            return invalid(format!("episode of length {} exceeds horizon {horizon}", t.len()));
        }
        Ok(Self { horizon, episodes })
    }

    pub fn empty(horizon: usize) -> Self {
        Self { horizon, episodes: Vec::new() }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn episodes(&self) -> &[Trajectory] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, t: Trajectory) -> Result<()> {
        if t.len() > self.horizon {
            return invalid(format!("episode of length {} exceeds horizon {}", t.len(), self.horizon));
        }
        self.episodes.push(t);
        Ok(())
    }

    pub fn extend(&mut self, other: TrajectoryDataset) -> Result<()> {
        if other.horizon != self.horizon {
            return invalid("cannot merge datasets with different horizons");
        }
        self.episodes.extend(other.episodes);
        Ok(())
    }

    /// Check every index against an MDP's dimensions.
    pub fn validate_for(&self, mdp: &TabularMdp) -> Result<()> {
        if self.horizon != mdp.horizon() {
            return invalid(format!("dataset horizon {} does not match MDP horizon {}", self.horizon, mdp.horizon()));
        }
        self.episodes
            .iter()
            .try_for_each(|t| t.check_bounds(mdp.num_states(), mdp.num_actions()))
    }

    /// First `⌊K/2⌋` episodes tagged `offline1`, the rest tagged `offline2`.
    pub fn split_offline_halves(&self) -> (TrajectoryDataset, TrajectoryDataset) {
        let half = self.episodes.len() / 2;
        let tag = |eps: &[Trajectory], p| TrajectoryDataset {
            horizon: self.horizon,
            episodes: eps.iter().cloned().map(|t| t.with_provenance(p)).collect(),
        };
        (tag(&self.episodes[..half], Provenance::Offline1), tag(&self.episodes[half..], Provenance::Offline2))
    }

    /// Per-provenance episode counts, sorted by tag.
    pub fn provenance_counts(&self) -> Vec<(Provenance, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for t in &self.episodes {
            *counts.entry(t.provenance).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# episodes {} {}", self.episodes.len(), self.horizon)?;
        for t in &self.episodes {
            let line: Vec<String> = t
                .states
                .iter()
                .zip(&t.actions)
                .flat_map(|(s, a)| [(s + 1).to_string(), (a + 1).to_string()])
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Parse the episode format; every episode gets `provenance`.
    pub fn read_from<R: Read>(r: R, provenance: Provenance) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => return invalid("dataset file is empty"),
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (k, horizon) = match fields.as_slice() {
            ["#", "episodes", k, h] => match (k.parse::<usize>(), h.parse::<usize>()) {
                (Ok(k), Ok(h)) => (k, h),
                _ => return invalid(format!("malformed dataset header: {header}")),
            },
            _ => return invalid(format!("malformed dataset header: {header}")),
        };
        let mut episodes = Vec::with_capacity(k);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let nums = line
                .split_whitespace()
                .map(|x| x.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| crate::Error::InvalidInput(format!("line {}: {e}", lineno + 2)))?;
            if nums.len() % 2 != 0 || nums.is_empty() || nums.contains(&0) {
                return invalid(format!("line {}: expected 1-based (state, action) pairs", lineno + 2));
            }
            let states = nums.iter().step_by(2).map(|x| x - 1).collect();
            let actions = nums.iter().skip(1).step_by(2).map(|x| x - 1).collect();
            episodes.push(Trajectory::new(states, actions, provenance)?);
        }
        if episodes.len() != k {
            return invalid(format!("header announces {k} episodes, found {}", episodes.len()));
        }
        Self::new(horizon, episodes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>, provenance: Provenance) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?, provenance)
    }
}

/// Draw `k` full-length episodes from `mixture`.
pub fn sample_dataset<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    mixture: &PolicyMixture,
    k: usize,
    rng: &mut R,
    provenance: Provenance,
) -> Result<TrajectoryDataset> {
    let episodes = (0..k)
        .map(|_| sample_trajectory(mdp, mixture, rng, None, provenance))
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(mdp.horizon(), episodes)
}
