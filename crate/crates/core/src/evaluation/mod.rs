//! Metrics, cost accounting and type-2 sub-model search.

mod accuracy;
mod bleu;
mod cost;
mod search;

pub use accuracy::{teacher_forced_stats, token_accuracy, EvalStats};
pub use bleu::bleu;
pub use cost::{count_params, estimate_flops, flop_breakdown, CostReport, FlopBreakdown};
pub use search::{
    enumerate_type2, evaluate_spec, format_mean_std, mean_std, random_search_type2, type2_space, SearchEntry,
    SearchMetric, SearchReport,
};
