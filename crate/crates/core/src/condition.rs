use serde::{Deserialize, Serialize};
use std::fmt;

/// A conditioning signal: a discrete label or the null label used for
/// unconditional prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Label(usize),
    Null,
}

impl Cond {
    pub fn is_null(self) -> bool {
        matches!(self, Cond::Null)
    }

    /// Row of a condition embedding table with `n_labels` real labels; the null
    /// label owns the last row.
    pub fn row(self, n_labels: usize) -> usize {
        match self {
            Cond::Label(l) => l,
            Cond::Null => n_labels,
        }
    }

    pub fn parse(s: &str) -> Option<Cond> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("null") || s == "∅" || s.eq_ignore_ascii_case("none") {
            return Some(Cond::Null);
        }
        s.parse().ok().map(Cond::Label)
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cond::Label(l) => write!(f, "{l}"),
            Cond::Null => f.write_str("null"),
        }
    }
}
