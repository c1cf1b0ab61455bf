//! Labeled training and evaluation samples.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::SemanticMap;

/// Target hairstyle of a synthesized view; `Original` marks unaugmented images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HairstyleLabel {
    Short,
    Medium,
    Long,
    Original,
}

impl HairstyleLabel {
    pub const SYNTHESIZED: [HairstyleLabel; 3] = [HairstyleLabel::Short, HairstyleLabel::Medium, HairstyleLabel::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            HairstyleLabel::Short => "short",
            HairstyleLabel::Medium => "medium",
            HairstyleLabel::Long => "long",
            HairstyleLabel::Original => "original",
        }
    }
}

impl fmt::Display for HairstyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HairstyleLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "short" | "s" => Ok(HairstyleLabel::Short),
            "medium" | "m" => Ok(HairstyleLabel::Medium),
            "long" | "l" => Ok(HairstyleLabel::Long),
            "original" => Ok(HairstyleLabel::Original),
            other => Err(Error::Config(format!("unknown hairstyle {other:?}"))),
        }
    }
}

/// Which transform produced the pixels of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Raw,
    Erased,
    HsoaAug,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier, also the file stem on disk.
    pub id: String,
    pub image: RgbImage,
    pub identity: u32,
    /// Global clothes-class id (unique per identity/outfit pair).
    pub clothes: u32,
    /// Dataset hairstyle class of the depicted person.
    pub hairstyle: u32,
    pub camera: u32,
    pub semantic_map: Option<SemanticMap>,
    pub view: View,
    /// Synthesized hairstyle, `Original` for unaugmented samples.
    pub style: HairstyleLabel,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        (self.image.height() as usize, self.image.width() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(map) = &self.semantic_map {
            if map.dims() != self.dims() {
                return Err(Error::Argument(format!(
                    "sample {}: semantic map {:?} does not match image {:?}",
                    self.id,
                    map.dims(),
                    self.dims()
                )));
            }
        }
        let augmented = self.view == View::HsoaAug;
        if augmented == (self.style == HairstyleLabel::Original) {
            return Err(Error::Argument(format!(
                "sample {}: view {:?} inconsistent with style {}",
                self.id, self.view, self.style
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hairstyle_parse_roundtrip() {
        for s in HairstyleLabel::SYNTHESIZED {
            assert_eq!(s.as_str().parse::<HairstyleLabel>().unwrap(), s);
        }
        assert!("mohawk".parse::<HairstyleLabel>().is_err());
    }
}
