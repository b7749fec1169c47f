use fedsenone::federation::{AbortCode, SessionStatus};
use fedsenone::Error;

pub const USAGE: u8 = 2;
pub const TRANSPORT: u8 = 3;
pub const PROTOCOL: u8 = 4;
pub const BUDGET: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(USAGE, message)
    }

    /// Maps a finished session's status to a failure, if it did not complete.
    pub fn from_status(status: &SessionStatus) -> Option<Self> {
        match status {
            SessionStatus::Aborted { code: AbortCode::BudgetExceeded, text } => {
                Some(Self::new(BUDGET, format!("privacy budget exhausted: {text}")))
            }
            SessionStatus::Aborted { code, text } => Some(Self::new(PROTOCOL, format!("session aborted ({code}): {text}"))),
            _ => None,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BudgetExceeded { .. } => BUDGET,
            Error::Protocol(_) | Error::Decode(_) | Error::TimedOut(_) | Error::Aborted { .. } => PROTOCOL,
            _ => USAGE,
        };
        Self::new(code, e.to_string())
    }
}
