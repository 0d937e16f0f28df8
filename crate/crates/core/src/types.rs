use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Grammatical number. Probes score `Singular` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Number {
    Singular,
    Plural,
}

impl Number {
    pub fn sign(self) -> f64 {
        match self {
            Number::Singular => 1.0,
            Number::Plural => -1.0,
        }
    }

    pub fn opposite(self) -> Number {
        match self {
            Number::Singular => Number::Plural,
            Number::Plural => Number::Singular,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Number::Singular => "singular",
            Number::Plural => "plural",
        }
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Number {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "singular" | "sg" => Ok(Number::Singular),
            "plural" | "pl" => Ok(Number::Plural),
            other => Err(Error::InvalidArgument(format!("unknown number {other:?}"))),
        }
    }
}

/// Where in a sentence a hidden vector is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRole {
    Subject,
    MainVerb,
    EmbeddedVerb,
}

impl PositionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionRole::Subject => "subject",
            PositionRole::MainVerb => "main_verb",
            PositionRole::EmbeddedVerb => "embedded_verb",
        }
    }
}

impl fmt::Display for PositionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subject" => Ok(PositionRole::Subject),
            "main_verb" | "main-verb" | "verb" => Ok(PositionRole::MainVerb),
            "embedded_verb" | "embedded-verb" => Ok(PositionRole::EmbeddedVerb),
            other => Err(Error::InvalidArgument(format!("unknown position role {other:?}"))),
        }
    }
}
