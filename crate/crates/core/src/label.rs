use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The eight expression classes and their stable wire codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ExpressionLabel {
    Neutral = 0,
    Happiness = 1,
    Sadness = 2,
    Anger = 3,
    Fear = 4,
    Surprise = 5,
    Disgust = 6,
    Contempt = 7,
}

impl ExpressionLabel {
    pub const COUNT: usize = 8;

    /// All labels in wire-code order.
    pub const ALL: [ExpressionLabel; 8] = [
        ExpressionLabel::Neutral,
        ExpressionLabel::Happiness,
        ExpressionLabel::Sadness,
        ExpressionLabel::Anger,
        ExpressionLabel::Fear,
        ExpressionLabel::Surprise,
        ExpressionLabel::Disgust,
        ExpressionLabel::Contempt,
    ];

    /// Every label that can trigger a cue.
    pub const EXPRESSIVE: [ExpressionLabel; 7] = [
        ExpressionLabel::Happiness,
        ExpressionLabel::Sadness,
        ExpressionLabel::Anger,
        ExpressionLabel::Fear,
        ExpressionLabel::Surprise,
        ExpressionLabel::Disgust,
        ExpressionLabel::Contempt,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_neutral(self) -> bool {
        self == ExpressionLabel::Neutral
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Neutral => "neutral",
            ExpressionLabel::Happiness => "happiness",
            ExpressionLabel::Sadness => "sadness",
            ExpressionLabel::Anger => "anger",
            ExpressionLabel::Fear => "fear",
            ExpressionLabel::Surprise => "surprise",
            ExpressionLabel::Disgust => "disgust",
            ExpressionLabel::Contempt => "contempt",
        }
    }
}

impl fmt::Display for ExpressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown expression label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for ExpressionLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}
