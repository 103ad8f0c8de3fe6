use std::fmt;

/// A value failed one of its construction invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantError {
    pub kind: &'static str,
    pub message: String,
}

impl InvariantError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub(crate) fn within(mut self, scope: &str) -> Self {
        self.message = format!("{scope}: {}", self.message);
        self
    }
}

impl fmt::Display for InvariantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid {}: {}", self.kind, self.message)
    }
}

impl std::error::Error for InvariantError {}
