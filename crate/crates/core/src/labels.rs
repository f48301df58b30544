//! Gold labels and normalized predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Ground-truth answer of a yes/no question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldLabel {
    Yes,
    No,
}

impl GoldLabel {
    pub const ALL: [GoldLabel; 2] = [GoldLabel::Yes, GoldLabel::No];

    pub fn as_str(self) -> &'static str {
        match self {
            GoldLabel::Yes => "yes",
            GoldLabel::No => "no",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            GoldLabel::Yes => GoldLabel::No,
            GoldLabel::No => GoldLabel::Yes,
        }
    }
}

impl fmt::Display for GoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GoldLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "yes" => Ok(GoldLabel::Yes),
            "no" => Ok(GoldLabel::No),
            other => Err(format!(
                "gold label must be \"yes\" or \"no\", got {other:?}"
            )),
        }
    }
}

/// A model answer after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Yes,
    No,
    Unresolved,
}

impl Prediction {
    pub fn as_str(self) -> &'static str {
        match self {
            Prediction::Yes => "yes",
            Prediction::No => "no",
            Prediction::Unresolved => "unresolved",
        }
    }

    /// Yes/no swapped; unresolved stays unresolved.
    pub fn flipped(self) -> Self {
        match self {
            Prediction::Yes => Prediction::No,
            Prediction::No => Prediction::Yes,
            Prediction::Unresolved => Prediction::Unresolved,
        }
    }

    pub fn matches(self, gold: GoldLabel) -> bool {
        matches!(
            (self, gold),
            (Prediction::Yes, GoldLabel::Yes) | (Prediction::No, GoldLabel::No)
        )
    }
}

impl From<GoldLabel> for Prediction {
    fn from(gold: GoldLabel) -> Self {
        match gold {
            GoldLabel::Yes => Prediction::Yes,
            GoldLabel::No => Prediction::No,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
