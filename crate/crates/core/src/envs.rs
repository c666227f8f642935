//! Cooperative navigation on the square `[-1, 1]²`.
//!
//! `N` point agents move by a fixed displacement per step towards `N`
//! landmarks. Three variants differ only in which landmark each agent
//! observes and which landmark each agent is rewarded for reaching:
//!
//! * `ss`: agent `i` observes and targets landmark `i`.
//! * `ssc`: agent `i` targets landmark `i` but observes landmark `i + 1 (mod N)`,
//!   so reaching its target requires information held by another agent.
//! * `sscc` (three agents): agent 1 is rewarded (double weight) for landmark 3,
//!   agent 2 (double weight) for landmark 1, agent 3 for landmark 3. Each agent
//!   observes its own landmark. Success is agents 1 and 2 on their targets.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const AGENT_RADIUS: f64 = 0.1;
pub const STEP_SIZE: f64 = 0.1;
pub const EPISODE_LEN: usize = 25;
pub const ARENA: f64 = 1.0;
pub const SPAWN_MARGIN: f64 = 0.9;
pub const SUCCESS_RADIUS: f64 = 0.1;
/// Own position (2) and one relative landmark position (2).
pub const OBS_DIM: usize = 4;
pub const NUM_ACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Simple Spread: every agent sees its own landmark.
    Simple,
    /// Agents see the next agent's landmark instead of their own.
    Communication,
    /// Three agents with crossed reward targets.
    CrossCommunication,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Simple => "ss",
            Variant::Communication => "ssc",
            Variant::CrossCommunication => "sscc",
        }
    }

    /// Agent count used when none is given.
    pub fn default_agents(self) -> usize {
        match self {
            Variant::Simple | Variant::Communication => 2,
            Variant::CrossCommunication => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ss" => Ok(Variant::Simple),
            "ssc" => Ok(Variant::Communication),
            "sscc" => Ok(Variant::CrossCommunication),
            other => Err(format!(
                "unknown environment `{other}` (expected ss, ssc or sscc)"
            )),
        }
    }
}

/// Observation, reward, and success wiring of a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub variant: Variant,
    /// Landmark whose relative position agent `i` observes.
    pub obs_landmark: Vec<usize>,
    /// `(landmark, weight)` that agent `i` is rewarded for approaching.
    pub reward_target: Vec<(usize, f64)>,
    /// Agents that must sit on their reward target for the episode to succeed.
    pub success_set: Vec<usize>,
}

impl VariantSpec {
    pub fn new(variant: Variant, num_agents: usize) -> Result<Self> {
        let n = num_agents;
        let bad = |msg: &str| Err(Error::InvalidPartition(format!("{variant}: {msg}")));
        match variant {
            Variant::Simple => {
                if n == 0 {
                    return bad("needs at least one agent");
                }
                Ok(Self {
                    variant,
                    obs_landmark: (0..n).collect(),
                    reward_target: (0..n).map(|i| (i, 1.0)).collect(),
                    success_set: (0..n).collect(),
                })
            }
            Variant::Communication => {
                if n < 2 {
                    return bad("needs at least two agents");
                }
                Ok(Self {
                    variant,
                    obs_landmark: (0..n).map(|i| (i + 1) % n).collect(),
                    reward_target: (0..n).map(|i| (i, 1.0)).collect(),
                    success_set: (0..n).collect(),
                })
            }
            Variant::CrossCommunication => {
                if n != 3 {
                    return bad("is defined for exactly three agents");
                }
                Ok(Self {
                    variant,
                    obs_landmark: vec![0, 1, 2],
                    reward_target: vec![(2, 2.0), (0, 2.0), (2, 1.0)],
                    success_set: vec![0, 1],
                })
            }
        }
    }

    pub fn num_agents(&self) -> usize {
        self.obs_landmark.len()
    }
}

pub type Point = [f64; 2];

#[inline]
fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Moves for a single agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Noop,
    PosX,
    NegX,
    PosY,
    NegY,
}

impl Action {
    pub fn from_index(a: usize) -> Option<Self> {
        [
            Action::Noop,
            Action::PosX,
            Action::NegX,
            Action::PosY,
            Action::NegY,
        ]
        .get(a)
        .copied()
    }

    fn displacement(self) -> Point {
        match self {
            Action::Noop => [0.0, 0.0],
            Action::PosX => [STEP_SIZE, 0.0],
            Action::NegX => [-STEP_SIZE, 0.0],
            Action::PosY => [0.0, STEP_SIZE],
            Action::NegY => [0.0, -STEP_SIZE],
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Pairwise agent distances, `N × N`.
    pub distances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavWorld {
    spec: VariantSpec,
    agents: Vec<Point>,
    landmarks: Vec<Point>,
    step: usize,
}

impl NavWorld {
    /// Samples agent and landmark positions uniformly in `[-0.9, 0.9]²`.
    pub fn reset<R: Rng + ?Sized>(spec: &VariantSpec, rng: &mut R) -> (Self, Vec<f64>) {
        let n = spec.num_agents();
        let mut sample = || {
            [
                rng.random_range(-SPAWN_MARGIN..SPAWN_MARGIN),
                rng.random_range(-SPAWN_MARGIN..SPAWN_MARGIN),
            ]
        };
        let agents: Vec<Point> = (0..n).map(|_| sample()).collect();
        let landmarks: Vec<Point> = (0..n).map(|_| sample()).collect();
        let world = Self {
            spec: spec.clone(),
            agents,
            landmarks,
            step: 0,
        };
        let obs = world.observe();
        (world, obs)
    }

    /// Places agents and landmarks explicitly.
    pub fn from_positions(
        spec: &VariantSpec,
        agents: Vec<Point>,
        landmarks: Vec<Point>,
    ) -> Result<Self> {
        let n = spec.num_agents();
        if agents.len() != n {
            return Err(Error::dim("agent positions", n, agents.len()));
        }
        if landmarks.len() != n {
            return Err(Error::dim("landmark positions", n, landmarks.len()));
        }
        Ok(Self {
            spec: spec.clone(),
            agents,
            landmarks,
            step: 0,
        })
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn agents(&self) -> &[Point] {
        &self.agents
    }

    pub fn landmarks(&self) -> &[Point] {
        &self.landmarks
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Joint observation: for each agent, own position then the observed
    /// landmark's position relative to the agent.
    pub fn observe(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.agents.len() * OBS_DIM);
        for (i, p) in self.agents.iter().enumerate() {
            let l = self.landmarks[self.spec.obs_landmark[i]];
            obs.extend_from_slice(&[p[0], p[1], l[0] - p[0], l[1] - p[1]]);
        }
        obs
    }

    /// `r_i = -w_i ‖p_i − L_target(i)‖ − (number of other agents within 2 radii)`.
    pub fn rewards(&self) -> Vec<f64> {
        let n = self.agents.len();
        (0..n)
            .map(|i| {
                let (target, weight) = self.spec.reward_target[i];
                let collisions = (0..n)
                    .filter(|&j| {
                        j != i && distance(self.agents[i], self.agents[j]) < 2.0 * AGENT_RADIUS
                    })
                    .count();
                -weight * distance(self.agents[i], self.landmarks[target]) - collisions as f64
            })
            .collect()
    }

    /// Whether every agent of the success set is within the success radius of
    /// its reward target.
    pub fn targets_reached(&self) -> bool {
        self.spec.success_set.iter().all(|&i| {
            let (target, _) = self.spec.reward_target[i];
            distance(self.agents[i], self.landmarks[target]) <= SUCCESS_RADIUS
        })
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if actions.len() != self.agents.len() {
            return Err(Error::dim("joint action", self.agents.len(), actions.len()));
        }
        let moves: Vec<Action> = actions
            .iter()
            .map(|&a| Action::from_index(a).ok_or(Error::dim("action index bound", NUM_ACTIONS, a)))
            .collect::<Result<_>>()?;
        for (p, m) in self.agents.iter_mut().zip(moves) {
            let d = m.displacement();
            p[0] = (p[0] + d[0]).clamp(-ARENA, ARENA);
            p[1] = (p[1] + d[1]).clamp(-ARENA, ARENA);
        }
        self.step += 1;
        let n = self.agents.len();
        let distances = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| distance(self.agents[i], self.agents[j]))
                    .collect()
            })
            .collect();
        Ok(StepOutcome {
            observation: self.observe(),
            rewards: self.rewards(),
            done: self.step >= EPISODE_LEN,
            distances,
        })
    }
}

/// Agent positions and rewards after each step of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub spec: VariantSpec,
    pub landmarks: Vec<Point>,
    pub initial: Vec<Point>,
    /// `(positions, rewards)` after steps `1..=len`.
    pub frames: Vec<(Vec<Point>, Vec<f64>)>,
}

impl EpisodeTrace {
    pub fn start(world: &NavWorld) -> Self {
        Self {
            spec: world.spec.clone(),
            landmarks: world.landmarks.clone(),
            initial: world.agents.clone(),
            frames: Vec::with_capacity(EPISODE_LEN),
        }
    }

    pub fn record(&mut self, world: &NavWorld, rewards: &[f64]) {
        self.frames.push((world.agents.clone(), rewards.to_vec()));
    }

    /// Sum of all agents' rewards over the episode.
    pub fn team_return(&self) -> f64 {
        self.frames.iter().flat_map(|(_, r)| r.iter()).sum()
    }

    /// `(true, t)` for the first step `t` at which every agent of the success
    /// set is on its target, otherwise `(false, 25)`.
    pub fn success_and_time(&self) -> (bool, usize) {
        for (k, (pos, _)) in self.frames.iter().enumerate() {
            let reached = self.spec.success_set.iter().all(|&i| {
                let (target, _) = self.spec.reward_target[i];
                distance(pos[i], self.landmarks[target]) <= SUCCESS_RADIUS
            });
            if reached {
                return (true, k + 1);
            }
        }
        (false, EPISODE_LEN)
    }

    /// CSV rows `step,agent_id,x,y,reward`; step 0 is the spawn state.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,agent_id,x,y,reward\n");
        for (i, p) in self.initial.iter().enumerate() {
            out.push_str(&format!("0,{i},{},{},0\n", p[0], p[1]));
        }
        for (k, (pos, rew)) in self.frames.iter().enumerate() {
            for (i, p) in pos.iter().enumerate() {
                out.push_str(&format!("{},{i},{},{},{}\n", k + 1, p[0], p[1], rew[i]));
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Adds i.i.d. `N(0, variance)` noise to every component.
pub fn inject_noise<R: Rng + ?Sized>(obs: &[f64], variance: f64, rng: &mut R) -> Vec<f64> {
    assert!(variance >= 0.0, "noise variance must be nonnegative");
    if variance == 0.0 {
        return obs.to_vec();
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite standard deviation");
    obs.iter().map(|&x| x + normal.sample(rng)).collect()
}
