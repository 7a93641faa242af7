//! Big Five dimensions and the ten high/low trait conditions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "O")]
    Openness,
    #[serde(rename = "C")]
    Conscientiousness,
    #[serde(rename = "E")]
    Extraversion,
    #[serde(rename = "A")]
    Agreeableness,
    #[serde(rename = "N")]
    Neuroticism,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Openness,
        Dimension::Conscientiousness,
        Dimension::Extraversion,
        Dimension::Agreeableness,
        Dimension::Neuroticism,
    ];

    pub fn letter(self) -> char {
        match self {
            Dimension::Openness => 'O',
            Dimension::Conscientiousness => 'C',
            Dimension::Extraversion => 'E',
            Dimension::Agreeableness => 'A',
            Dimension::Neuroticism => 'N',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Openness => "Openness",
            Dimension::Conscientiousness => "Conscientiousness",
            Dimension::Extraversion => "Extraversion",
            Dimension::Agreeableness => "Agreeableness",
            Dimension::Neuroticism => "Neuroticism",
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.letter() == c)
    }

    /// Case-insensitive match on the full dimension name.
    pub fn from_name(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|d| d.name().eq_ignore_ascii_case(s))
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Low,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::High => "high",
            Level::Low => "low",
        }
    }
}

/// One of the ten personality conditions. The canonical code is the
/// dimension letter followed by `+` or `-` (e.g. `N+`); the Unicode minus
/// sign is accepted when parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraitId {
    pub dimension: Dimension,
    pub level: Level,
}

impl TraitId {
    pub const COUNT: usize = 10;

    pub const fn new(dimension: Dimension, level: Level) -> Self {
        Self { dimension, level }
    }

    /// All traits in table order: O+, O-, C+, C-, E+, E-, A+, A-, N+, N-.
    pub fn all() -> [TraitId; 10] {
        let mut out = [TraitId::new(Dimension::Openness, Level::High); 10];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = TraitId::from_index(i).unwrap();
        }
        out
    }

    /// High-level traits, in dimension order.
    pub fn high() -> [TraitId; 5] {
        Dimension::ALL.map(|d| TraitId::new(d, Level::High))
    }

    /// Low-level traits, in dimension order.
    pub fn low() -> [TraitId; 5] {
        Dimension::ALL.map(|d| TraitId::new(d, Level::Low))
    }

    /// Row index in the personality table.
    pub fn index(self) -> usize {
        2 * self.dimension.index() + usize::from(self.level == Level::Low)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= Self::COUNT {
            return None;
        }
        let level = if i.is_multiple_of(2) { Level::High } else { Level::Low };
        Some(Self::new(Dimension::ALL[i / 2], level))
    }

    pub fn code(self) -> String {
        let sign = match self.level {
            Level::High => '+',
            Level::Low => '-',
        };
        format!("{}{sign}", self.dimension.letter())
    }

    /// "High Openness" style descriptor used in prompts.
    pub fn descriptor(self) -> String {
        let level = match self.level {
            Level::High => "High",
            Level::Low => "Low",
        };
        format!("{level} {}", self.dimension.name())
    }
}

impl fmt::Display for TraitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for TraitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        let parsed = match (chars.next(), chars.next(), chars.next()) {
            (Some(d), Some(sign), None) => {
                let level = match sign {
                    '+' => Some(Level::High),
                    '-' | '\u{2212}' => Some(Level::Low),
                    _ => None,
                };
                Dimension::from_letter(d.to_ascii_uppercase()).zip(level)
            }
            _ => None,
        };
        parsed
            .map(|(d, l)| TraitId::new(d, l))
            .ok_or_else(|| Error::UnknownTrait(s.to_string()))
    }
}

impl Serialize for TraitId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for TraitId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
