//! BIO tags over the four entity types and their label indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "MISC")]
    Misc,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Per, EntityType::Loc, EntityType::Org, EntityType::Misc];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
            EntityType::Misc => "MISC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Labels(format!("unknown entity type `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(EntityType),
    I(EntityType),
}

/// Size of the BIO label set: `O` plus `B-`/`I-` for each type.
pub const NUM_TAGS: usize = 1 + 2 * EntityType::ALL.len();

impl Tag {
    /// `O` is 0, then `B-X`, `I-X` pairs in type order.
    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t.index(),
            Tag::I(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Tag::O),
            i if i < NUM_TAGS => {
                let t = EntityType::ALL[(i - 1) / 2];
                Ok(if i % 2 == 1 { Tag::B(t) } else { Tag::I(t) })
            }
            _ => Err(Error::Labels(format!("tag index {i} out of range"))),
        }
    }

    pub fn entity_type(self) -> Option<EntityType> {
        match self {
            Tag::O => None,
            Tag::B(t) | Tag::I(t) => Some(t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::O);
        }
        match s.split_once('-') {
            Some(("B", t)) => Ok(Tag::B(t.parse()?)),
            Some(("I", t)) => Ok(Tag::I(t.parse()?)),
            _ => Err(Error::Labels(format!("malformed tag `{s}`"))),
        }
    }
}

pub fn parse_tags<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Tag>> {
    labels.iter().map(|s| s.as_ref().parse()).collect()
}

pub fn tag_strings(tags: &[Tag]) -> Vec<String> {
    tags.iter().map(Tag::to_string).collect()
}

/// Rejects an `I-X` that does not continue a `B-X` or `I-X`.
pub fn validate_bio(tags: &[Tag]) -> Result<()> {
    let mut prev = Tag::O;
    for (i, &t) in tags.iter().enumerate() {
        if let Tag::I(ty) = t {
            let continues = matches!(prev, Tag::B(p) | Tag::I(p) if p == ty);
            if !continues {
                return Err(Error::Labels(format!("{t} at position {} follows {prev}", i + 1)));
            }
        }
        prev = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        for i in 0..NUM_TAGS {
            assert_eq!(Tag::from_index(i).unwrap().index(), i);
        }
        assert!(Tag::from_index(NUM_TAGS).is_err());
        assert_eq!(Tag::B(EntityType::Loc).index(), 3);
    }

    #[test]
    fn parse_and_print() {
        for s in ["O", "B-PER", "I-MISC", "B-ORG"] {
            assert_eq!(s.parse::<Tag>().unwrap().to_string(), s);
        }
        assert!("B-FOO".parse::<Tag>().is_err());
        assert!("X-PER".parse::<Tag>().is_err());
    }

    #[test]
    fn bio_validation() {
        let ok = parse_tags(&["O", "B-PER", "I-PER", "B-LOC", "O"]).unwrap();
        assert!(validate_bio(&ok).is_ok());
        for bad in [&["I-PER"][..], &["O", "I-LOC"], &["B-PER", "I-LOC"]] {
            assert!(validate_bio(&parse_tags(bad).unwrap()).is_err(), "{bad:?}");
        }
    }
}
