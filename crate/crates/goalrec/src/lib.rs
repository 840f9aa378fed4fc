//! Online dynamic goal recognition on discrete grid worlds.
//!
//! The crate learns a metric over observation traces: a Siamese recurrent
//! network embeds state-action sequences so that traces leading to the same
//! goal are close and traces leading to different goals are far apart. On top
//! of that sit trace generators (tabular Q-learning, goal-conditioned
//! Q-learning, a UCT planner), a policy-likelihood baseline recognizer and an
//! experiment harness that sweeps observability grids and emits CSV reports.

pub mod baseline;
pub mod dataset;
pub mod env;
pub mod error;
pub mod harness;
pub mod metric;
pub mod planner;
pub mod recognizer;
pub mod rl;
pub(crate) mod util;

pub use error::{Error, Result};
