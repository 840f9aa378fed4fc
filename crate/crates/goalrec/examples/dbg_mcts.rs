use std::time::Instant;

use goalrec::env::{make_simple_crossing, State};
use goalrec::planner::{mcts_plan, MctsConfig};
use goalrec::rl::{train_q_agent, QHyperparams};

fn main() {
    let env = make_simple_crossing(0);
    let goals = [
        State::new(11, 11),
        State::new(11, 1),
        State::new(1, 11),
        State::new(6, 6),
        State::new(9, 3),
    ];
    let t0 = Instant::now();
    for (i, &g) in goals.iter().enumerate() {
        let cfg = MctsConfig::for_env(&env, i as u64);
        let tr = mcts_plan(&env, g, &cfg).unwrap();
        println!("mcts {g}: {} steps", tr.len());
    }
    let mcts_time = t0.elapsed();
    let t1 = Instant::now();
    for (i, &g) in goals.iter().enumerate() {
        let hp = QHyperparams::default();
        let q = train_q_agent(&env, g, &hp, 1000 + i as u64).unwrap();
        println!("qtable {g}: {} episodes", q.trained_episodes);
    }
    let q_time = t1.elapsed();
    println!("mcts total {:?} | q-training total {:?} | ratio {:.3}",
        mcts_time, q_time, mcts_time.as_secs_f64() / q_time.as_secs_f64());
}
