use alloc::string::String;

/// Errors raised across the simulator, learners and search.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("out of episode: step {step} >= period length {period_length}")]
    OutOfEpisode { step: usize, period_length: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("dataset error: {0}")]
    Dataset(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
