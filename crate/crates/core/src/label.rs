use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary diagnostic class. `Positive` is COVID-19, `Negative` is Normal;
/// every metric in this crate treats `Positive` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "covid")]
    Positive,
    #[serde(rename = "normal")]
    Negative,
}

impl Label {
    /// Class order used by heads: index 0 is positive.
    pub const ORDER: [Label; 2] = [Label::Positive, Label::Negative];

    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ORDER.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "covid",
            Label::Negative => "normal",
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label {0:?} (expected \"covid\" or \"normal\")")]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "covid" => Ok(Label::Positive),
            "normal" => Ok(Label::Negative),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}
