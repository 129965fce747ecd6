//! Scenario files, composition artifacts, metrics/trace writers and the
//! `hopon` command-line front end over [`hopon_core`].

pub mod artifacts;
pub mod canonical;
pub mod cli;
pub mod dot;
pub mod scenario;
pub mod trace;

pub use cli::{execute, CommandOutcome};
pub use scenario::{load_scenario, parse_scenario, ScenarioError};
