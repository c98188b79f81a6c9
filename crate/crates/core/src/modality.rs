use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Complementary sensing modality paired with RGB.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Event,
    Thermal,
    Depth,
    Polarization,
    Lightfield,
}

impl Modality {
    pub const ALL: [Modality; 5] =
        [Modality::Event, Modality::Thermal, Modality::Depth, Modality::Polarization, Modality::Lightfield];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Event => "event",
            Modality::Thermal => "thermal",
            Modality::Depth => "depth",
            Modality::Polarization => "polarization",
            Modality::Lightfield => "lightfield",
        }
    }

    /// Native channel count of the raw modality image.
    pub fn channels(self) -> usize {
        match self {
            Modality::Event => 2,
            Modality::Thermal | Modality::Depth => 1,
            Modality::Polarization => 4,
            Modality::Lightfield => 3,
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|m| *m == self).unwrap()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnsupportedModality(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_and_unknown_is_rejected() {
        for m in Modality::ALL {
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
        assert!(matches!("radar".parse::<Modality>(), Err(Error::UnsupportedModality(s)) if s == "radar"));
    }
}
