//! Corpus generation, evaluation reports, benchmarks, plots and run configs.

pub mod bench;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod plot;
pub mod report;

pub use bench::{bench, BenchReport, BenchRow};
pub use config::{OutputConfig, RunConfig};
pub use data::{gen_data, load_corpus, make_pair, pair_stem, DataConfig, PairMode};
pub use eval::{evaluate, match_pair, oracle_matches, EvalConfig, MatchSource, PairMatches};
pub use plot::{error_curves, match_overlay};
pub use report::{EvalReport, EvalRow, Task};
pub use gradsuite::{grad_check, GRAD_OPS};
