//! Linear probing of frozen slide embeddings.

mod auc;
mod eval;
mod logistic;

pub use auc::{auc, macro_auc};
pub use eval::{
    bootstrap_eval, parse_labels, read_labels, report_csv, report_table, split_indices, Budget, EvalOptions, LabeledSet,
    ProbeReport, SplitResult,
};
pub(crate) use logistic::check_labels;
pub use logistic::{fit_logistic, fit_logistic_from, objective, FitOptions, LogisticModel, Normalization, Normalizer};
