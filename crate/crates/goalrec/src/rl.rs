//! Tabular goal-directed and goal-conditioned Q-learning, plus the stochastic
//! rollouts that turn trained policies into goal-directed observation traces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{initial_state, step, Action, DoneReason, GridEnv, State};
use crate::error::{Error, Result};
use crate::util::{argmax, derive_seed, rng_from_seed, softmax};

/// How a trace was masked, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    Consecutive,
    NonConsecutive,
}

/// An ordered sequence of (state, action) observations, possibly masked down
/// to a fraction of the original episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub observations: Vec<(State, Action)>,
    /// The goal the acting agent pursued, when known to the producer.
    pub goal: Option<State>,
    pub mask_kind: MaskKind,
    pub observed_ratio: f64,
}

impl Trace {
    pub fn full(observations: Vec<(State, Action)>, goal: Option<State>) -> Self {
        Self {
            observations,
            goal,
            mask_kind: MaskKind::Full,
            observed_ratio: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// First `n` observations, keeping goal metadata.
    pub fn prefix(&self, n: usize) -> Trace {
        let keep = n.min(self.len());
        Trace {
            observations: self.observations[..keep].to_vec(),
            goal: self.goal,
            mask_kind: self.mask_kind,
            observed_ratio: self.observed_ratio,
        }
    }
}

/// Anything that assigns action values for a fixed goal.
pub trait Policy {
    fn goal(&self) -> State;
    fn action_values(&self, s: State) -> [f64; 4];

    fn greedy_action(&self, s: State) -> Action {
        Action::ALL[argmax(&self.action_values(s))]
    }
}

/// Action-value table for a single goal-directed task.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub goal: State,
    pub width: usize,
    pub height: usize,
    pub trained_episodes: usize,
    values: Vec<[f64; 4]>,
}

impl QTable {
    pub fn zeros(env: &GridEnv, goal: State) -> Self {
        Self {
            goal,
            width: env.width,
            height: env.height,
            trained_episodes: 0,
            values: vec![[0.0; 4]; env.state_count()],
        }
    }

    fn idx(&self, s: State) -> usize {
        s.y * self.width + s.x
    }

    pub fn values(&self) -> &[[f64; 4]] {
        &self.values
    }
}

impl Policy for QTable {
    fn goal(&self) -> State {
        self.goal
    }

    fn action_values(&self, s: State) -> [f64; 4] {
        self.values[self.idx(s)]
    }
}

/// One action-value table per goal, sharing a single training run.
#[derive(Debug, Clone, PartialEq)]
pub struct GCQTable {
    pub goal_set: Vec<State>,
    pub width: usize,
    pub height: usize,
    pub trained_episodes: usize,
    tables: Vec<Vec<[f64; 4]>>,
}

impl GCQTable {
    pub fn zeros(env: &GridEnv, goal_set: Vec<State>) -> Self {
        let n = goal_set.len();
        Self {
            goal_set,
            width: env.width,
            height: env.height,
            trained_episodes: 0,
            tables: vec![vec![[0.0; 4]; env.state_count()]; n],
        }
    }

    pub fn goal_index(&self, goal: State) -> Option<usize> {
        self.goal_set.iter().position(|&g| g == goal)
    }

    /// View of the table conditioned on one goal from the trained set.
    pub fn conditioned(&self, goal: State) -> Result<Conditioned<'_>> {
        let idx = self.goal_index(goal).ok_or_else(|| {
            Error::Contract(format!("policy was not trained for goal {goal}"))
        })?;
        Ok(Conditioned { table: self, idx, goal })
    }
}

/// A [`GCQTable`] narrowed to one goal, usable as a [`Policy`].
pub struct Conditioned<'a> {
    table: &'a GCQTable,
    idx: usize,
    goal: State,
}

impl Policy for Conditioned<'_> {
    fn goal(&self) -> State {
        self.goal
    }

    fn action_values(&self, s: State) -> [f64; 4] {
        self.table.tables[self.idx][s.y * self.table.width + s.x]
    }
}

/// Q-learning hyperparameters. `episodes` is per goal; the goal-conditioned
/// trainer multiplies by the goal count and samples goals uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QHyperparams {
    pub alpha: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub episodes: usize,
    /// Max random moves prepended to each training episode's start.
    pub start_jitter: usize,
    pub eval_episodes: usize,
    pub eval_jitter: usize,
    pub success_threshold: f64,
    /// Extra training rounds allowed before giving up on the 95% gate.
    pub extra_rounds: usize,
}

impl Default for QHyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            episodes: 50_000,
            start_jitter: 4,
            eval_episodes: 200,
            eval_jitter: 4,
            success_threshold: 0.95,
            extra_rounds: 2,
        }
    }
}

impl QHyperparams {
    /// A lighter budget for goal-conditioned training over many goals.
    pub fn goal_conditioned_default() -> Self {
        Self {
            episodes: 4_000,
            eval_episodes: 100,
            ..Self::default()
        }
    }
}

fn run_training_episodes(
    env: &GridEnv,
    table: &mut [[f64; 4]],
    goal: State,
    hp: &QHyperparams,
    episodes: usize,
    rng: &mut impl Rng,
) {
    for ep in 0..episodes {
        let frac = if episodes > 1 { ep as f64 / (episodes - 1) as f64 } else { 1.0 };
        let epsilon = hp.epsilon_start + (hp.epsilon_end - hp.epsilon_start) * frac;
        let jitter = rng.gen_range(0..=hp.start_jitter);
        let mut s = initial_state(env, rng, jitter);
        if s == goal {
            continue;
        }
        let mut t = 0;
        loop {
            let si = s.y * env.width + s.x;
            let a = if rng.gen_bool(epsilon) {
                Action::ALL[rng.gen_range(0..4)]
            } else {
                Action::ALL[argmax(&table[si])]
            };
            let r = step(env, s, a, goal, t).expect("training states stay valid");
            let ni = r.next_state.y * env.width + r.next_state.x;
            // bootstrap through timeouts: the horizon is artificial
            let target = match r.done_reason {
                DoneReason::GoalReached | DoneReason::Lava => r.reward,
                _ => {
                    r.reward
                        + env.gamma * table[ni].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                }
            };
            table[si][a.index()] += hp.alpha * (target - table[si][a.index()]);
            if r.done {
                break;
            }
            s = r.next_state;
            t += 1;
        }
    }
}

fn greedy_success_rate(
    env: &GridEnv,
    values: &[[f64; 4]],
    goal: State,
    hp: &QHyperparams,
    rng: &mut impl Rng,
) -> f64 {
    let mut successes = 0;
    for _ in 0..hp.eval_episodes {
        let jitter = rng.gen_range(0..=hp.eval_jitter);
        let mut s = initial_state(env, rng, jitter);
        if s == goal {
            successes += 1;
            continue;
        }
        let mut t = 0;
        loop {
            let a = Action::ALL[argmax(&values[s.y * env.width + s.x])];
            let r = step(env, s, a, goal, t).expect("eval states stay valid");
            match r.done_reason {
                DoneReason::GoalReached => {
                    successes += 1;
                    break;
                }
                DoneReason::Lava | DoneReason::Timeout => break,
                DoneReason::Running => {
                    s = r.next_state;
                    t += 1;
                }
            }
        }
    }
    successes as f64 / hp.eval_episodes.max(1) as f64
}

/// Trains a goal-directed Q-agent until its greedy policy reaches the goal
/// from jittered starts at the configured success rate.
///
/// `hp.episodes == 0` returns the untouched all-zero table.
pub fn train_q_agent(env: &GridEnv, goal: State, hp: &QHyperparams, seed: u64) -> Result<QTable> {
    if !env.in_bounds(goal) || env.is_wall(goal) || env.is_lava(goal) {
        return Err(Error::Contract(format!("goal {goal} is not a free cell")));
    }
    let mut table = QTable::zeros(env, goal);
    if hp.episodes == 0 {
        return Ok(table);
    }
    let mut rng = rng_from_seed(seed);
    for round in 0..=hp.extra_rounds {
        run_training_episodes(env, &mut table.values, goal, hp, hp.episodes, &mut rng);
        table.trained_episodes += hp.episodes;
        let rate = greedy_success_rate(env, &table.values, goal, hp, &mut rng);
        if rate >= hp.success_threshold {
            return Ok(table);
        }
        if round == hp.extra_rounds {
            return Err(Error::Training(format!(
                "goal {goal}: greedy success rate {rate:.3} below {:.3} after {} episodes",
                hp.success_threshold, table.trained_episodes
            )));
        }
    }
    unreachable!()
}

/// Trains one agent across a whole goal set, sampling the episode goal
/// uniformly. Each goal must individually pass the greedy success gate;
/// failing goals get targeted extra rounds before the whole call errors.
pub fn train_gc_q_agent(
    env: &GridEnv,
    goal_set: &[State],
    hp: &QHyperparams,
    seed: u64,
) -> Result<GCQTable> {
    if goal_set.is_empty() {
        return Err(Error::Contract("empty goal set".into()));
    }
    for &g in goal_set {
        if !env.in_bounds(g) || env.is_wall(g) || env.is_lava(g) {
            return Err(Error::Contract(format!("goal {g} is not a free cell")));
        }
    }
    let mut gc = GCQTable::zeros(env, goal_set.to_vec());
    if hp.episodes == 0 {
        return Ok(gc);
    }
    let mut rng = rng_from_seed(seed);
    let total = hp.episodes * goal_set.len();
    let per_slice = QHyperparams { episodes: 1, ..hp.clone() };
    for ep in 0..total {
        let gi = rng.gen_range(0..goal_set.len());
        // anneal epsilon over the global schedule, not per slice
        let frac = if total > 1 { ep as f64 / (total - 1) as f64 } else { 1.0 };
        let hp_ep = QHyperparams {
            epsilon_start: hp.epsilon_start + (hp.epsilon_end - hp.epsilon_start) * frac,
            epsilon_end: hp.epsilon_start + (hp.epsilon_end - hp.epsilon_start) * frac,
            ..per_slice.clone()
        };
        run_training_episodes(env, &mut gc.tables[gi], goal_set[gi], &hp_ep, 1, &mut rng);
    }
    gc.trained_episodes = total;

    for round in 0..=hp.extra_rounds {
        let mut failing = Vec::new();
        for (gi, &g) in goal_set.iter().enumerate() {
            let rate = greedy_success_rate(env, &gc.tables[gi], g, hp, &mut rng);
            if rate < hp.success_threshold {
                failing.push((gi, g, rate));
            }
        }
        if failing.is_empty() {
            return Ok(gc);
        }
        if round == hp.extra_rounds {
            let detail: Vec<String> = failing
                .iter()
                .map(|(_, g, rate)| format!("{g}: {rate:.3}"))
                .collect();
            return Err(Error::Training(format!(
                "goals below the {:.3} success gate after {} episodes: {}",
                hp.success_threshold,
                gc.trained_episodes,
                detail.join(", ")
            )));
        }
        for (gi, g, _) in failing {
            run_training_episodes(env, &mut gc.tables[gi], g, hp, hp.episodes, &mut rng);
            gc.trained_episodes += hp.episodes;
        }
    }
    unreachable!()
}

const ROLLOUT_RETRY_BUDGET: usize = 50;

/// Samples a goal-directed trace: actions drawn from softmax(Q/temperature),
/// episode started from a jittered start. Episodes that time out, hit lava or
/// start on the goal are discarded and regenerated within a retry budget.
pub fn stochastic_rollout(
    policy: &dyn Policy,
    env: &GridEnv,
    seed: u64,
    temperature: f64,
    jitter_steps: usize,
) -> Result<Trace> {
    if temperature <= 0.0 {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let goal = policy.goal();
    if !env.is_free(goal) {
        return Err(Error::Contract(format!("goal {goal} is not a free cell")));
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..ROLLOUT_RETRY_BUDGET {
        let mut s = initial_state(env, &mut rng, jitter_steps);
        if s == goal {
            continue;
        }
        let mut obs = Vec::new();
        let mut t = 0;
        let outcome = loop {
            let probs = softmax(&policy.action_values(s), temperature);
            let draw: f64 = rng.gen();
            let mut acc = 0.0;
            let mut a = Action::Right;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    a = Action::ALL[i];
                    break;
                }
            }
            let r = step(env, s, a, goal, t)?;
            obs.push((s, a));
            if r.done {
                break r.done_reason;
            }
            s = r.next_state;
            t += 1;
        };
        if outcome == DoneReason::GoalReached {
            return Ok(Trace::full(obs, Some(goal)));
        }
    }
    Err(Error::Generation(format!(
        "no goal-reaching episode for {goal} within {ROLLOUT_RETRY_BUDGET} attempts"
    )))
}

/// Deterministic greedy episode from `env.start`; errors if the greedy policy
/// does not reach the goal.
pub fn greedy_rollout(policy: &dyn Policy, env: &GridEnv) -> Result<Trace> {
    let goal = policy.goal();
    let mut s = env.start;
    if s == goal {
        return Err(Error::Contract("start coincides with the goal".into()));
    }
    let mut obs = Vec::new();
    let mut t = 0;
    loop {
        let a = policy.greedy_action(s);
        let r = step(env, s, a, goal, t)?;
        obs.push((s, a));
        match r.done_reason {
            DoneReason::GoalReached => return Ok(Trace::full(obs, Some(goal))),
            DoneReason::Running => {
                s = r.next_state;
                t += 1;
            }
            other => {
                return Err(Error::Generation(format!(
                    "greedy episode toward {goal} ended with {other:?}"
                )))
            }
        }
    }
}

/// Generates a pool of stochastic rollouts per goal for dataset building.
pub fn rollout_pool(
    policy: &dyn Policy,
    env: &GridEnv,
    count: usize,
    seed: u64,
    temperature: f64,
    jitter_steps: usize,
) -> Result<Vec<Trace>> {
    (0..count)
        .map(|i| stochastic_rollout(policy, env, derive_seed(seed, i as u64), temperature, jitter_steps))
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints: structured text, exact round-trip.
// ---------------------------------------------------------------------------

fn write_values(out: &mut String, values: &[[f64; 4]]) {
    for row in values {
        for v in row {
            out.push(' ');
            out.push_str(&format!("{v}"));
        }
    }
    out.push('\n');
}

fn parse_values(line: &str, expect: usize) -> Result<Vec<[f64; 4]>> {
    let nums: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Checkpoint(format!("bad float {t:?}: {e}"))))
        .collect::<Result<_>>()?;
    if nums.len() != expect * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} values, found {}",
            expect * 4,
            nums.len()
        )));
    }
    Ok(nums.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

impl QTable {
    /// Serializes to the text checkpoint format: header lines followed by the
    /// row-major value array.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str("qtable v1\n");
        out.push_str(&format!("dims {} {}\n", self.width, self.height));
        out.push_str(&format!("goal {} {}\n", self.goal.x, self.goal.y));
        out.push_str(&format!("episodes {}\n", self.trained_episodes));
        out.push_str("values");
        write_values(&mut out, &self.values);
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != "qtable v1" {
            return Err(Error::Checkpoint(format!("unexpected header {magic:?}")));
        }
        let dims = parse_kv(lines.next(), "dims")?;
        let (width, height) = parse_pair(&dims)?;
        let goal = parse_kv(lines.next(), "goal")?;
        let (gx, gy) = parse_pair(&goal)?;
        let episodes = parse_kv(lines.next(), "episodes")?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let values_line = lines
            .next()
            .and_then(|l| l.strip_prefix("values"))
            .ok_or_else(|| Error::Checkpoint("missing values line".into()))?;
        Ok(Self {
            goal: State::new(gx, gy),
            width,
            height,
            trained_episodes: episodes,
            values: parse_values(values_line, width * height)?,
        })
    }
}

impl GCQTable {
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str("gc-qtable v1\n");
        out.push_str(&format!("dims {} {}\n", self.width, self.height));
        out.push_str(&format!("episodes {}\n", self.trained_episodes));
        out.push_str(&format!("goals {}\n", self.goal_set.len()));
        for (g, table) in self.goal_set.iter().zip(&self.tables) {
            out.push_str(&format!("goal {} {}\n", g.x, g.y));
            out.push_str("values");
            write_values(&mut out, table);
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != "gc-qtable v1" {
            return Err(Error::Checkpoint(format!("unexpected header {magic:?}")));
        }
        let dims = parse_kv(lines.next(), "dims")?;
        let (width, height) = parse_pair(&dims)?;
        let episodes = parse_kv(lines.next(), "episodes")?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = parse_kv(lines.next(), "goals")?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut goal_set = Vec::with_capacity(count);
        let mut tables = Vec::with_capacity(count);
        for _ in 0..count {
            let goal = parse_kv(lines.next(), "goal")?;
            let (gx, gy) = parse_pair(&goal)?;
            goal_set.push(State::new(gx, gy));
            let values_line = lines
                .next()
                .and_then(|l| l.strip_prefix("values"))
                .ok_or_else(|| Error::Checkpoint("missing values line".into()))?;
            tables.push(parse_values(values_line, width * height)?);
        }
        Ok(Self {
            goal_set,
            width,
            height,
            trained_episodes: episodes,
            tables,
        })
    }
}

fn parse_kv(line: Option<&str>, key: &str) -> Result<String> {
    line.and_then(|l| l.strip_prefix(key))
        .map(|v| v.trim().to_string())
        .ok_or_else(|| Error::Checkpoint(format!("missing {key:?} line")))
}

fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let mut it = text.split_whitespace();
    let a = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad pair {text:?}")))?;
    let b = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad pair {text:?}")))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{bfs_distances, make_simple_crossing, GridEnv};

    fn small_env() -> GridEnv {
        GridEnv::new("t5", 5, 5, &[], &[], State::new(1, 1)).unwrap()
    }

    fn fast_hp() -> QHyperparams {
        QHyperparams {
            episodes: 3_000,
            eval_episodes: 100,
            ..QHyperparams::default()
        }
    }

    #[test]
    fn zero_episodes_gives_zero_table() {
        let env = small_env();
        let hp = QHyperparams { episodes: 0, ..QHyperparams::default() };
        let table = train_q_agent(&env, State::new(3, 3), &hp, 0).unwrap();
        assert!(table.values().iter().all(|row| row.iter().all(|&v| v == 0.0)));
        assert_eq!(table.trained_episodes, 0);
    }

    #[test]
    fn greedy_path_matches_bfs_length() {
        let env = small_env();
        let goal = State::new(3, 3);
        let table = train_q_agent(&env, goal, &fast_hp(), 1).unwrap();
        let trace = greedy_rollout(&table, &env).unwrap();
        let dist = bfs_distances(&env, env.start);
        assert_eq!(trace.len(), dist[env.index(goal)]);
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let env = small_env();
        let a = train_q_agent(&env, State::new(3, 2), &fast_hp(), 42).unwrap();
        let b = train_q_agent(&env, State::new(3, 2), &fast_hp(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_goal_fails_after_budget() {
        // goal boxed in by walls
        let env = GridEnv::new(
            "boxed",
            7,
            7,
            &[(2, 1), (1, 2), (3, 2), (2, 3)],
            &[],
            State::new(4, 4),
        )
        .unwrap();
        let hp = QHyperparams {
            episodes: 200,
            eval_episodes: 20,
            extra_rounds: 1,
            ..QHyperparams::default()
        };
        let err = train_q_agent(&env, State::new(2, 2), &hp, 0).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn q_values_stay_finite() {
        let env = make_simple_crossing(0);
        let table = train_q_agent(&env, State::new(11, 11), &fast_hp(), 3).unwrap();
        assert!(table.values().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn gc_single_goal_matches_q_agent_criterion() {
        let env = small_env();
        let goal = State::new(3, 3);
        let gc = train_gc_q_agent(&env, &[goal], &fast_hp(), 5).unwrap();
        let pol = gc.conditioned(goal).unwrap();
        let trace = greedy_rollout(&pol, &env).unwrap();
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn gc_reaches_every_goal_greedily() {
        let env = make_simple_crossing(0);
        let goals: Vec<State> = env
            .candidate_goals()
            .into_iter()
            .step_by(5)
            .take(20)
            .collect();
        assert_eq!(goals.len(), 20);
        let gc = train_gc_q_agent(&env, &goals, &QHyperparams::goal_conditioned_default(), 7)
            .unwrap();
        let dist = bfs_distances(&env, env.start);
        for &g in &goals {
            let pol = gc.conditioned(g).unwrap();
            let trace = greedy_rollout(&pol, &env).unwrap();
            assert!(
                trace.len() <= env.max_steps && trace.len() >= dist[env.index(g)],
                "goal {g}: greedy length {} vs bfs {}",
                trace.len(),
                dist[env.index(g)]
            );
        }
    }

    #[test]
    fn gc_conditioning_changes_greedy_actions() {
        let env = small_env();
        let g1 = State::new(3, 1);
        let g2 = State::new(1, 3);
        let gc = train_gc_q_agent(&env, &[g1, g2], &fast_hp(), 9).unwrap();
        let p1 = gc.conditioned(g1).unwrap();
        let p2 = gc.conditioned(g2).unwrap();
        let differs = env
            .candidate_goals()
            .iter()
            .any(|&s| p1.greedy_action(s) != p2.greedy_action(s));
        assert!(differs, "distinct goals should disagree somewhere");
    }

    #[test]
    fn rollout_ends_at_goal() {
        let env = small_env();
        let goal = State::new(3, 3);
        let table = train_q_agent(&env, goal, &fast_hp(), 1).unwrap();
        let trace = stochastic_rollout(&table, &env, 11, 1.0, 2).unwrap();
        assert!(!trace.is_empty());
        let (last_s, last_a) = *trace.observations.last().unwrap();
        let r = step(&env, last_s, last_a, goal, 0).unwrap();
        assert_eq!(r.next_state, goal);
        assert_eq!(r.done_reason, DoneReason::GoalReached);
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let env = small_env();
        let table = train_q_agent(&env, State::new(3, 3), &fast_hp(), 1).unwrap();
        let a = stochastic_rollout(&table, &env, 5, 0.7, 3).unwrap();
        let b = stochastic_rollout(&table, &env, 5, 0.7, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_zero_temperature_approximates_greedy() {
        // limit case: every sampled action must be greedy up to Q-value ties
        let env = small_env();
        let table = train_q_agent(&env, State::new(3, 3), &fast_hp(), 1).unwrap();
        let cold = stochastic_rollout(&table, &env, 5, 1e-6, 0).unwrap();
        let greedy = greedy_rollout(&table, &env).unwrap();
        assert_eq!(cold.len(), greedy.len(), "cold rollout must stay optimal");
        for (s, a) in cold.observations {
            let q = table.action_values(s);
            let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(q[a.index()] >= max - 1e-9, "non-greedy action at {s}");
        }
    }

    #[test]
    fn rollouts_are_diverse_at_temperature_one() {
        let env = make_simple_crossing(0);
        let goal = State::new(11, 11);
        let table = train_q_agent(&env, goal, &fast_hp(), 3).unwrap();
        let mut differing = 0;
        for i in 0..100 {
            let a = stochastic_rollout(&table, &env, derive_seed(100, i), 1.0, 4).unwrap();
            let b = stochastic_rollout(&table, &env, derive_seed(200, i), 1.0, 4).unwrap();
            if a.observations != b.observations {
                differing += 1;
            }
        }
        assert!(differing >= 90, "only {differing}/100 pairs differed");
    }

    #[test]
    fn rejects_zero_temperature() {
        let env = small_env();
        let table = QTable::zeros(&env, State::new(3, 3));
        assert!(stochastic_rollout(&table, &env, 0, 0.0, 0).is_err());
    }

    #[test]
    fn qtable_checkpoint_round_trips() {
        let env = small_env();
        let table = train_q_agent(&env, State::new(3, 3), &fast_hp(), 1).unwrap();
        let text = table.to_checkpoint();
        let loaded = QTable::from_checkpoint(&text).unwrap();
        assert_eq!(table, loaded);
        assert_eq!(text, loaded.to_checkpoint());
    }

    #[test]
    fn gc_checkpoint_round_trips() {
        let env = small_env();
        let goals = [State::new(3, 3), State::new(1, 3)];
        let gc = train_gc_q_agent(&env, &goals, &fast_hp(), 2).unwrap();
        let text = gc.to_checkpoint();
        let loaded = GCQTable::from_checkpoint(&text).unwrap();
        assert_eq!(gc, loaded);
        assert_eq!(text, loaded.to_checkpoint());
    }
}
