//! Goal adaptation and inference for the metric recognizer: per-goal trace
//! libraries are embedded (truncated to the observation's length) and the
//! goal with the highest mean similarity to the observation wins.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::encode_sparse;
use crate::env::{step, DoneReason, GridEnv, State};
use crate::error::{Error, Result};
use crate::metric::{similarity, Embedding, MetricModel};
use crate::planner::{mcts_plan, MctsConfig};
use crate::rl::{stochastic_rollout, GCQTable, Trace};
use crate::util::derive_seed;

/// How the per-goal libraries were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ExpertTraces,
    Mcts,
    GoalConditioned,
}

/// The trace library for one active goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalLibrary {
    pub goal: State,
    pub traces: Vec<Trace>,
}

impl GoalLibrary {
    pub fn new(goal: State, traces: Vec<Trace>) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::Adaptation(format!("goal {goal}: empty library")));
        }
        for t in &traces {
            if t.goal != Some(goal) {
                return Err(Error::Adaptation(format!(
                    "goal {goal}: library trace labeled {:?}",
                    t.goal
                )));
            }
        }
        Ok(Self { goal, traces })
    }

    pub fn size(&self) -> usize {
        self.traces.len()
    }
}

/// The recognizer's state after adapting to an active goal set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedState {
    pub libraries: Vec<GoalLibrary>,
    pub strategy: Strategy,
    /// Wall-clock seconds spent building the libraries.
    pub adaptation_time: f64,
    /// Untruncated library embeddings, kept only for timing comparisons;
    /// inference always re-embeds with truncation.
    pub precomputed: Option<Vec<Vec<Vec<f64>>>>,
}

impl AdaptedState {
    pub fn goals(&self) -> Vec<State> {
        self.libraries.iter().map(|l| l.goal).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Rollout knobs for the goal-conditioned adaptation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcRolloutParams {
    pub temperature: f64,
    pub jitter_steps: usize,
    pub seed: u64,
}

impl Default for GcRolloutParams {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            jitter_steps: 0,
            seed: 0,
        }
    }
}

/// Where library traces come from during adaptation.
pub enum AdaptSource<'a> {
    /// Pre-supplied traces per goal; adaptation is a copy.
    Expert(&'a [(State, Vec<Trace>)]),
    /// Plan one trace per (goal, library slot) with the UCT planner.
    Mcts(&'a MctsConfig),
    /// Stochastic rollouts of the goal-conditioned policy.
    GoalConditioned(&'a GCQTable, GcRolloutParams),
}

impl AdaptSource<'_> {
    fn strategy(&self) -> Strategy {
        match self {
            AdaptSource::Expert(_) => Strategy::ExpertTraces,
            AdaptSource::Mcts(_) => Strategy::Mcts,
            AdaptSource::GoalConditioned(..) => Strategy::GoalConditioned,
        }
    }
}

/// Builds one trace library per active goal. `library_size` is the number of
/// traces per goal; `precompute` additionally stores untruncated embeddings.
pub fn adapt_goals(
    model: &MetricModel,
    env: &GridEnv,
    goal_set: &[State],
    source: AdaptSource<'_>,
    library_size: usize,
    precompute: bool,
) -> Result<AdaptedState> {
    if goal_set.is_empty() {
        return Err(Error::Contract("empty goal set".into()));
    }
    if library_size == 0 {
        return Err(Error::Contract("library size must be at least 1".into()));
    }
    for (i, &g) in goal_set.iter().enumerate() {
        if !env.is_valid_goal(g) {
            return Err(Error::Contract(format!("goal {g} is not a valid goal cell")));
        }
        if goal_set[..i].contains(&g) {
            return Err(Error::Contract(format!("goal {g} appears twice")));
        }
    }
    let strategy = source.strategy();
    let started = Instant::now();
    let mut libraries = Vec::with_capacity(goal_set.len());
    for (gi, &goal) in goal_set.iter().enumerate() {
        let traces = match &source {
            AdaptSource::Expert(provided) => {
                let found = provided
                    .iter()
                    .find(|(g, _)| *g == goal)
                    .ok_or_else(|| Error::Adaptation(format!("no expert traces for {goal}")))?;
                if found.1.len() < library_size {
                    return Err(Error::Adaptation(format!(
                        "goal {goal}: {} expert traces provided, {library_size} required",
                        found.1.len()
                    )));
                }
                found.1[..library_size].to_vec()
            }
            AdaptSource::Mcts(cfg) => (0..library_size)
                .map(|j| {
                    let cfg = MctsConfig {
                        seed: derive_seed(cfg.seed, (gi * library_size + j) as u64),
                        ..(*cfg).clone()
                    };
                    mcts_plan(env, goal, &cfg)
                })
                .collect::<Result<Vec<_>>>()?,
            AdaptSource::GoalConditioned(table, params) => {
                let policy = table.conditioned(goal)?;
                (0..library_size)
                    .map(|j| {
                        stochastic_rollout(
                            &policy,
                            env,
                            derive_seed(params.seed, (gi * library_size + j) as u64),
                            params.temperature,
                            params.jitter_steps,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        libraries.push(GoalLibrary::new(goal, traces)?);
    }
    let precomputed = if precompute {
        let mut all = Vec::with_capacity(libraries.len());
        for lib in &libraries {
            let mut per_goal = Vec::with_capacity(lib.traces.len());
            for t in &lib.traces {
                per_goal.push(model.embed(t, env)?.values);
            }
            all.push(per_goal);
        }
        Some(all)
    } else {
        None
    };
    Ok(AdaptedState {
        libraries,
        strategy,
        adaptation_time: started.elapsed().as_secs_f64(),
        precomputed,
    })
}

/// The recognizer's answer for one observation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionResult {
    pub goal: State,
    /// Mean similarity per goal, in library order.
    pub per_goal_scores: Vec<(State, f64)>,
    /// Wall-clock seconds spent on this query.
    pub inference_time: f64,
}

/// Embeds a library with each trace prefix-truncated to `truncate_len`.
pub fn embed_library(
    model: &MetricModel,
    library: &GoalLibrary,
    truncate_len: usize,
    env: &GridEnv,
) -> Result<Vec<Embedding>> {
    if truncate_len == 0 {
        return Err(Error::Contract("truncate_len must be at least 1".into()));
    }
    library
        .traces
        .iter()
        .map(|t| model.embed(&t.prefix(truncate_len), env))
        .collect()
}

/// Scores every adapted goal against the observation: library traces are
/// truncated to the observation's length, embedded, and averaged by
/// similarity; the argmax goal wins, ties broken by library order.
pub fn infer(
    model: &MetricModel,
    adapted: &AdaptedState,
    obs: &Trace,
    env: &GridEnv,
) -> Result<RecognitionResult> {
    if obs.is_empty() {
        return Err(Error::Contract("empty observation sequence".into()));
    }
    if adapted.libraries.is_empty() {
        return Err(Error::Contract("adapted state has no libraries".into()));
    }
    let started = Instant::now();
    let obs_seq = encode_sparse(obs, env, model.encoding)?;
    let obs_emb = Embedding {
        values: crate::metric::lstm_raw_forward(&model.params, &obs_seq)?,
    };
    let mut per_goal_scores = Vec::with_capacity(adapted.libraries.len());
    let mut best_idx = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, lib) in adapted.libraries.iter().enumerate() {
        let embeddings = embed_library(model, lib, obs.len(), env)?;
        let mut sum = 0.0;
        for e in &embeddings {
            sum += similarity(e, &obs_emb)?;
        }
        let score = sum / embeddings.len() as f64;
        per_goal_scores.push((lib.goal, score));
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok(RecognitionResult {
        goal: adapted.libraries[best_idx].goal,
        per_goal_scores,
        inference_time: started.elapsed().as_secs_f64(),
    })
}

/// Checks that a library trace actually reaches its goal under the
/// environment dynamics. Used by tests and the harness as a sanity gate.
pub fn replay_ends_at_goal(trace: &Trace, env: &GridEnv) -> Result<bool> {
    let Some(goal) = trace.goal else {
        return Ok(false);
    };
    let Some(&(s, a)) = trace.observations.last() else {
        return Ok(false);
    };
    let r = step(env, s, a, goal, 0)?;
    Ok(r.done_reason == DoneReason::GoalReached && r.next_state == goal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EncodeMode;
    use crate::env::{Action, GridEnv};
    use crate::metric::{lstm_forward, TrainConfig};
    use crate::rl::{train_gc_q_agent, train_q_agent, QHyperparams};
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn toy_env() -> GridEnv {
        GridEnv::new("t5", 5, 5, &[], &[], State::new(1, 1)).unwrap()
    }

    fn toy_model(env: &GridEnv, seed: u64) -> MetricModel {
        MetricModel::new(
            env,
            &TrainConfig {
                hidden_dim: 8,
                seed,
                ..TrainConfig::default()
            },
        )
    }

    fn straight_trace(env: &GridEnv, goal: State) -> Trace {
        // walk right along row 1 then down the goal column
        let mut obs = Vec::new();
        let mut s = env.start;
        while s.x < goal.x {
            obs.push((s, Action::Right));
            s = State::new(s.x + 1, s.y);
        }
        while s.y < goal.y {
            obs.push((s, Action::Down));
            s = State::new(s.x, s.y + 1);
        }
        Trace::full(obs, Some(goal))
    }

    #[test]
    fn expert_adaptation_is_instant() {
        let env = toy_env();
        let model = toy_model(&env, 0);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let provided: Vec<(State, Vec<Trace>)> = goals
            .iter()
            .map(|&g| (g, vec![straight_trace(&env, g)]))
            .collect();
        let adapted =
            adapt_goals(&model, &env, &goals, AdaptSource::Expert(&provided), 1, false).unwrap();
        assert_eq!(adapted.strategy, Strategy::ExpertTraces);
        assert_eq!(adapted.libraries.len(), 2);
        assert!(adapted.adaptation_time < 0.010, "copying traces must be instant");
    }

    #[test]
    fn mcts_adaptation_reaches_goals() {
        let env = toy_env();
        let model = toy_model(&env, 0);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let cfg = MctsConfig::for_env(&env, 5);
        let adapted = adapt_goals(&model, &env, &goals, AdaptSource::Mcts(&cfg), 1, false).unwrap();
        for lib in &adapted.libraries {
            for t in &lib.traces {
                assert!(replay_ends_at_goal(t, &env).unwrap());
            }
        }
    }

    #[test]
    fn gc_adaptation_rolls_out_each_goal() {
        let env = toy_env();
        let model = toy_model(&env, 0);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let hp = QHyperparams {
            episodes: 3000,
            eval_episodes: 50,
            ..QHyperparams::default()
        };
        let gc = train_gc_q_agent(&env, &goals, &hp, 3).unwrap();
        let adapted = adapt_goals(
            &model,
            &env,
            &goals,
            AdaptSource::GoalConditioned(&gc, GcRolloutParams::default()),
            2,
            false,
        )
        .unwrap();
        for lib in &adapted.libraries {
            assert_eq!(lib.size(), 2);
            for t in &lib.traces {
                assert!(replay_ends_at_goal(t, &env).unwrap());
            }
        }
    }

    #[test]
    fn empty_goal_set_rejected() {
        let env = toy_env();
        let model = toy_model(&env, 0);
        let cfg = MctsConfig::for_env(&env, 0);
        assert!(adapt_goals(&model, &env, &[], AdaptSource::Mcts(&cfg), 1, false).is_err());
    }

    #[test]
    fn missing_expert_trace_rejected() {
        let env = toy_env();
        let model = toy_model(&env, 0);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let provided = vec![(goals[0], vec![straight_trace(&env, goals[0])])];
        assert!(
            adapt_goals(&model, &env, &goals, AdaptSource::Expert(&provided), 1, false).is_err()
        );
    }

    fn adapted_from_straight_traces(
        env: &GridEnv,
        model: &MetricModel,
        goals: &[State],
    ) -> AdaptedState {
        let provided: Vec<(State, Vec<Trace>)> = goals
            .iter()
            .map(|&g| (g, vec![straight_trace(env, g)]))
            .collect();
        adapt_goals(model, env, goals, AdaptSource::Expert(&provided), 1, false).unwrap()
    }

    #[test]
    fn single_goal_always_wins() {
        let env = toy_env();
        let model = toy_model(&env, 1);
        let adapted = adapted_from_straight_traces(&env, &model, &[State::new(3, 3)]);
        let obs = straight_trace(&env, State::new(1, 3));
        let r = infer(&model, &adapted, &obs, &env).unwrap();
        assert_eq!(r.goal, State::new(3, 3));
    }

    #[test]
    fn observation_equal_to_library_trace_wins_at_s1() {
        let env = toy_env();
        let model = toy_model(&env, 2);
        let goals = [State::new(3, 3), State::new(1, 3), State::new(3, 1)];
        let adapted = adapted_from_straight_traces(&env, &model, &goals);
        for &g in &goals {
            let obs = straight_trace(&env, g);
            let r = infer(&model, &adapted, &obs, &env).unwrap();
            assert_eq!(r.goal, g, "identical trace must score 1.0 for its goal");
            let own = r.per_goal_scores.iter().find(|(gg, _)| *gg == g).unwrap().1;
            assert!((own - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_matches_brute_force_oracle() {
        let env = toy_env();
        let model = toy_model(&env, 3);
        let goals = [State::new(3, 3), State::new(1, 3), State::new(3, 1)];
        let mut rng = rng_from_seed(17);
        for case in 0..50 {
            // library of 2 random-walk traces per goal, random observation
            let mut libraries = Vec::new();
            for &g in &goals {
                let traces = vec![
                    random_walk_trace(&env, g, &mut rng),
                    random_walk_trace(&env, g, &mut rng),
                ];
                libraries.push(GoalLibrary::new(g, traces).unwrap());
            }
            let adapted = AdaptedState {
                libraries,
                strategy: Strategy::ExpertTraces,
                adaptation_time: 0.0,
                precomputed: None,
            };
            let obs = random_walk_trace(&env, goals[case % 3], &mut rng);
            let got = infer(&model, &adapted, &obs, &env).unwrap();

            // independent recomputation: dense encode, embed, average, argmax
            let obs_emb = lstm_forward(
                &model.params,
                &crate::dataset::encode_trace(&obs, &env, EncodeMode::OneHot).unwrap(),
            )
            .unwrap();
            let mut best = (State::new(0, 0), f64::NEG_INFINITY);
            for lib in &adapted.libraries {
                let mut sum = 0.0;
                for t in &lib.traces {
                    let cut = t.prefix(obs.len());
                    let e = lstm_forward(
                        &model.params,
                        &crate::dataset::encode_trace(&cut, &env, EncodeMode::OneHot).unwrap(),
                    )
                    .unwrap();
                    sum += similarity(&e, &obs_emb).unwrap();
                }
                let score = sum / lib.traces.len() as f64;
                if score > best.1 {
                    best = (lib.goal, score);
                }
            }
            assert_eq!(got.goal, best.0, "case {case}");
        }
    }

    fn random_walk_trace(env: &GridEnv, goal: State, rng: &mut impl Rng) -> Trace {
        // lazy random walk that finishes with a forced march to the goal
        let mut obs = Vec::new();
        let mut s = env.start;
        for _ in 0..rng.gen_range(2..6) {
            let a = Action::ALL[rng.gen_range(0..4)];
            let n = env.move_from(s, a);
            if n != goal {
                obs.push((s, a));
                s = n;
            }
        }
        while s != goal {
            let a = if s.x < goal.x {
                Action::Right
            } else if s.x > goal.x {
                Action::Left
            } else if s.y < goal.y {
                Action::Down
            } else {
                Action::Up
            };
            obs.push((s, a));
            s = env.move_from(s, a);
        }
        Trace::full(obs, Some(goal))
    }

    #[test]
    fn library_permutation_keeps_the_answer() {
        let env = toy_env();
        let model = toy_model(&env, 4);
        let goals = [State::new(3, 3), State::new(1, 3), State::new(3, 1)];
        let adapted = adapted_from_straight_traces(&env, &model, &goals);
        let obs = straight_trace(&env, State::new(1, 3));
        let r1 = infer(&model, &adapted, &obs, &env).unwrap();
        let mut shuffled = adapted.clone();
        shuffled.libraries.reverse();
        let r2 = infer(&model, &shuffled, &obs, &env).unwrap();
        assert_eq!(r1.goal, r2.goal);
    }

    #[test]
    fn inference_is_deterministic() {
        let env = toy_env();
        let model = toy_model(&env, 5);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let adapted = adapted_from_straight_traces(&env, &model, &goals);
        let obs = straight_trace(&env, State::new(3, 3));
        let a = infer(&model, &adapted, &obs, &env).unwrap();
        let b = infer(&model, &adapted, &obs, &env).unwrap();
        assert_eq!(a.goal, b.goal);
        assert_eq!(a.per_goal_scores, b.per_goal_scores);
    }

    #[test]
    fn embed_library_truncation() {
        let env = toy_env();
        let model = toy_model(&env, 6);
        let goal = State::new(3, 3);
        let lib = GoalLibrary::new(goal, vec![straight_trace(&env, goal)]).unwrap();
        let full_len = lib.traces[0].len();
        let full = embed_library(&model, &lib, full_len + 10, &env).unwrap();
        let untruncated = embed_library(&model, &lib, full_len, &env).unwrap();
        assert_eq!(full, untruncated);
        let cut = embed_library(&model, &lib, 1, &env).unwrap();
        assert_eq!(cut.len(), 1);
        assert_ne!(cut[0], full[0]);
        assert!(embed_library(&model, &lib, 0, &env).is_err());
    }

    #[test]
    fn adapted_state_round_trips_exactly() {
        let env = toy_env();
        let model = toy_model(&env, 7);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let provided: Vec<(State, Vec<Trace>)> = goals
            .iter()
            .map(|&g| (g, vec![straight_trace(&env, g)]))
            .collect();
        let adapted =
            adapt_goals(&model, &env, &goals, AdaptSource::Expert(&provided), 1, true).unwrap();
        let json = adapted.to_json().unwrap();
        let loaded = AdaptedState::from_json(&json).unwrap();
        assert_eq!(adapted, loaded);
        assert_eq!(json, loaded.to_json().unwrap());
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let env = toy_env();
        let hp = QHyperparams {
            episodes: 2000,
            eval_episodes: 50,
            ..QHyperparams::default()
        };
        let model = toy_model(&env, 8);
        let goals = [State::new(3, 3), State::new(1, 3)];
        let adapted = adapted_from_straight_traces(&env, &model, &goals);
        let actor = train_q_agent(&env, goals[0], &hp, 91).unwrap();
        let obs = stochastic_rollout(&actor, &env, 5, 1.0, 2).unwrap();
        let r = infer(&model, &adapted, &obs, &env).unwrap();
        for (_, s) in &r.per_goal_scores {
            assert!(*s > 0.0 && *s <= 1.0);
        }
    }
}
