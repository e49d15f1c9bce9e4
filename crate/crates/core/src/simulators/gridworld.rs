//! Navigation world: a coloured grid, a tabular Q-learning agent trained on
//! deterministic moves, and slip-perturbed rollouts summarised as
//! `(turns, steps, reward)` per trajectory.

use serde::{Deserialize, Serialize};

use super::SummaryModel;
use crate::error::{Error, Result};
use crate::math::{Bounds, RngStream};

/// The bundled 13x13 map: `S` start, `G` goal, `X` hazard, `0`-`4` colours.
pub const DEFAULT_MAP: &str = include_str!("../../assets/nw_default.map");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Color(u8),
    Start,
    Goal,
    Hazard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    fn index(self) -> usize {
        self as usize
    }

    fn perpendicular(self) -> [Action; 2] {
        match self {
            Action::Up | Action::Down => [Action::Left, Action::Right],
            Action::Left | Action::Right => [Action::Up, Action::Down],
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridWorld {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
    start: usize,
    goal: usize,
    pub slip: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
}

impl GridWorld {
    /// Parses an ASCII map, one character per cell. Blank lines and lines
    /// starting with `#` are skipped; spaces inside a row are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        let (mut start, mut goal) = (Vec::new(), Vec::new());
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let row: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::InvalidMap(format!("row {rows} has {} cells, expected {c}", row.len())))
                }
                _ => {}
            }
            for ch in row {
                let cell = match ch {
                    'S' => {
                        start.push(cells.len());
                        Cell::Start
                    }
                    'G' => {
                        goal.push(cells.len());
                        Cell::Goal
                    }
                    'X' => Cell::Hazard,
                    '0'..='4' => Cell::Color(ch as u8 - b'0'),
                    other => return Err(Error::InvalidMap(format!("unknown cell character '{other}'"))),
                };
                cells.push(cell);
            }
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::InvalidMap("empty map".into()))?;
        if start.len() != 1 || goal.len() != 1 {
            return Err(Error::InvalidMap(format!(
                "need exactly one start and one goal, found {} and {}",
                start.len(),
                goal.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            cells,
            start: start[0],
            goal: goal[0],
            slip: 0.1,
            goal_reward: 100.0,
            hazard_reward: -500.0,
        })
    }

    pub fn default_map() -> Self {
        Self::parse(DEFAULT_MAP).expect("bundled map is valid")
    }

    pub fn with_slip(mut self, slip: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slip) {
            return Err(Error::InvalidMap(format!("slip probability must lie in [0, 1), got {slip}")));
        }
        self.slip = slip;
        Ok(self)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn cell(&self, state: usize) -> Cell {
        self.cells[state]
    }

    /// Deterministic move; bumping into the border leaves the agent in place.
    pub fn move_from(&self, state: usize, action: Action) -> usize {
        let (r, c) = (state / self.cols, state % self.cols);
        let (r, c) = match action {
            Action::Up if r > 0 => (r - 1, c),
            Action::Down if r + 1 < self.rows => (r + 1, c),
            Action::Left if c > 0 => (r, c - 1),
            Action::Right if c + 1 < self.cols => (r, c + 1),
            _ => (r, c),
        };
        r * self.cols + c
    }

    /// Reward for entering `state`; the start tile counts as colour 0.
    pub fn reward(&self, state: usize, color_rewards: &[f64]) -> f64 {
        match self.cells[state] {
            Cell::Color(k) => color_rewards[k as usize],
            Cell::Start => color_rewards[0],
            Cell::Goal => self.goal_reward,
            Cell::Hazard => self.hazard_reward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QLearningConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Step cap for one training episode.
    pub episode_step_cap: usize,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self { alpha: 0.1, gamma: 0.95, epsilon_start: 1.0, epsilon_end: 0.05, episode_step_cap: 1_000 }
    }
}

#[derive(Clone, Debug)]
pub struct QAgent {
    pub q: Vec<[f64; 4]>,
    pub alpha: f64,
    pub gamma: f64,
}

impl QAgent {
    pub fn new(n_states: usize, alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidHyperparameter(format!("need alpha, gamma in (0, 1], got {alpha}, {gamma}")));
        }
        Ok(Self { q: vec![[0.0; 4]; n_states], alpha, gamma })
    }

    /// First action with the largest value.
    pub fn greedy(&self, state: usize) -> Action {
        let row = &self.q[state];
        let mut best = 0;
        for a in 1..4 {
            if row[a] > row[best] {
                best = a;
            }
        }
        Action::ALL[best]
    }

    /// `Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`; terminal
    /// transitions drop the bootstrap term.
    pub fn update(&mut self, state: usize, action: Action, reward: f64, next: usize, terminal: bool) {
        let bootstrap = if terminal { 0.0 } else { self.q[next].iter().copied().fold(f64::NEG_INFINITY, f64::max) };
        let q = &mut self.q[state][action.index()];
        *q += self.alpha * (reward + self.gamma * bootstrap - *q);
    }
}

/// Trains an agent with epsilon-greedy tabular Q-learning on deterministic moves.
/// Epsilon decays linearly from `epsilon_start` to `epsilon_end` over training.
pub fn train_agent(
    world: &GridWorld,
    color_rewards: &[f64],
    episodes: usize,
    config: &QLearningConfig,
    rng: &mut RngStream,
) -> Result<QAgent> {
    if color_rewards.len() != 5 {
        return Err(Error::Shape(format!("expected 5 colour rewards, got {}", color_rewards.len())));
    }
    if episodes == 0 {
        return Err(Error::Domain("at least one training episode is required".into()));
    }
    let mut agent = QAgent::new(world.n_states(), config.alpha, config.gamma)?;
    for ep in 0..episodes {
        let frac = if episodes > 1 { ep as f64 / (episodes - 1) as f64 } else { 1.0 };
        let epsilon = config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac;
        let mut s = world.start();
        for _ in 0..config.episode_step_cap {
            let a = if rng.uniform() < epsilon { Action::ALL[rng.below(4)] } else { agent.greedy(s) };
            let next = world.move_from(s, a);
            let r = world.reward(next, color_rewards);
            let done = next == world.goal();
            agent.update(s, a, r, next, done);
            s = next;
            if done {
                break;
            }
        }
    }
    Ok(agent)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySummary {
    pub turns: usize,
    pub steps: usize,
    pub reward: f64,
    pub reached_goal: bool,
}

impl TrajectorySummary {
    pub fn to_array(self) -> [f64; 3] {
        [self.turns as f64, self.steps as f64, self.reward]
    }
}

/// Follows the greedy policy; with probability `world.slip` the executed
/// move is one of the two perpendicular directions. A turn is a step whose
/// executed direction differs from the previous one.
pub fn rollout(world: &GridWorld, agent: &QAgent, color_rewards: &[f64], step_cap: usize, rng: &mut RngStream) -> TrajectorySummary {
    let mut s = world.start();
    let mut prev: Option<Action> = None;
    let (mut turns, mut steps, mut reward) = (0, 0, 0.0);
    while steps < step_cap {
        let mut a = agent.greedy(s);
        if world.slip > 0.0 && rng.uniform() < world.slip {
            a = a.perpendicular()[rng.below(2)];
        }
        if prev.is_some_and(|p| p != a) {
            turns += 1;
        }
        prev = Some(a);
        s = world.move_from(s, a);
        reward += world.reward(s, color_rewards);
        steps += 1;
        if s == world.goal() {
            return TrajectorySummary { turns, steps, reward, reached_goal: true };
        }
    }
    TrajectorySummary { turns, steps, reward, reached_goal: false }
}

/// Inverse-reward simulator over the five colour rewards.
#[derive(Clone, Debug)]
pub struct NavigationWorld {
    pub world: GridWorld,
    pub episodes: usize,
    pub trajectories: usize,
    pub step_cap: usize,
    /// Training exploration always uses this seed, so training is a
    /// deterministic function of the rewards.
    pub training_seed: u64,
    pub q_learning: QLearningConfig,
}

impl NavigationWorld {
    pub const TRUE_REWARDS: [f64; 5] = [0.0, -1.0, -1.0, -5.0, -10.0];
    pub const PRIOR_RANGE: (f64, f64) = (-20.0, 0.0);

    pub fn bounds() -> Bounds {
        Bounds::uniform(5, Self::PRIOR_RANGE.0, Self::PRIOR_RANGE.1).expect("static bounds")
    }

    pub fn train(&self, rewards: &[f64]) -> Result<QAgent> {
        let mut train_rng = RngStream::new(self.training_seed, 0x7a1_0000);
        train_agent(&self.world, rewards, self.episodes, &self.q_learning, &mut train_rng)
    }

    /// Summaries of `trajectories` rollouts, sorted by reward (ties by steps, turns).
    pub fn trajectories(&self, rewards: &[f64], rng: &mut RngStream) -> Result<Vec<TrajectorySummary>> {
        let agent = self.train(rewards)?;
        let mut out: Vec<TrajectorySummary> =
            (0..self.trajectories).map(|_| rollout(&self.world, &agent, rewards, self.step_cap, rng)).collect();
        out.sort_by(|a, b| {
            a.reward
                .total_cmp(&b.reward)
                .then(a.steps.cmp(&b.steps))
                .then(a.turns.cmp(&b.turns))
        });
        Ok(out)
    }
}

impl SummaryModel for NavigationWorld {
    fn simulate(&self, theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.trajectories(theta, rng)?.into_iter().flat_map(TrajectorySummary::to_array).collect())
    }
}
