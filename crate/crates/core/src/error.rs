use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty bag: at least one tile or site is required")]
    EmptyBag,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("rulebook does not match the sparse map it is applied to")]
    StaleRulebook,
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("batch normalization in train mode needs at least 2 active sites, got {0}")]
    DegenerateBatch(usize),
    #[error("projection {0} has zero norm")]
    DegenerateProjection(usize),
    #[error("ensembled slide embedding has zero norm")]
    DegenerateEmbedding,
    #[error("labels are degenerate: {0}")]
    DegenerateLabels(String),
    #[error("budget too small: {0}")]
    BudgetTooSmall(String),
    #[error("need {needed} tiles per view but only {available} are available")]
    InsufficientTiles { needed: usize, available: usize },
    #[error("bank has no augmented slices to train from (n_augs = {0})")]
    NoTrainingAugmentations(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt bank: {0}")]
    CorruptBank(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::BudgetTooSmall(_)
                | Error::DegenerateLabels(_)
                | Error::InsufficientTiles { .. }
                | Error::NoTrainingAugmentations(_)
                | Error::DimensionMismatch { .. }
        )
    }
}
