//! Entity boundary detection labels and the joint objective.
//!
//! Boundary labels strip entity types: the first token of every entity is
//! `B`, the last token of a multi-token entity is `E`, and everything else
//! (including interior tokens) is `O`. A single-token entity is `B`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::labels::{validate_bio, Tag};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Boundary {
    O,
    B,
    E,
}

pub const NUM_BOUNDARIES: usize = 3;

impl Boundary {
    pub fn index(self) -> usize {
        match self {
            Boundary::O => 0,
            Boundary::B => 1,
            Boundary::E => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Boundary::O),
            1 => Ok(Boundary::B),
            2 => Ok(Boundary::E),
            _ => Err(Error::Labels(format!("boundary index {i} out of range"))),
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::O => "O",
            Boundary::B => "B",
            Boundary::E => "E",
        })
    }
}

/// Derives boundary labels from well-formed BIO tags.
pub fn decompose_boundaries(tags: &[Tag]) -> Result<Vec<Boundary>> {
    validate_bio(tags)?;
    let mut out = vec![Boundary::O; tags.len()];
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::B(_) => out[i] = Boundary::B,
            Tag::I(_) => {
                let ends = !matches!(tags.get(i + 1), Some(Tag::I(_)));
                if ends {
                    out[i] = Boundary::E;
                }
            }
            Tag::O => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLossConfig {
    pub lambda: f64,
}

impl JointLossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be a finite non-negative number, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self { lambda: 0.25 }
    }
}

/// `nll_main + λ · nll_ebd`.
pub fn joint_loss<T: Real>(nll_main: T, nll_ebd: T, config: &JointLossConfig) -> T {
    nll_main + T::of(config.lambda) * nll_ebd
}

pub fn joint_loss_node<T: Real>(
    g: &mut Graph<T>,
    nll_main: NodeId,
    nll_ebd: NodeId,
    config: &JointLossConfig,
) -> Result<NodeId> {
    let weighted = g.scale(nll_ebd, T::of(config.lambda));
    g.add(nll_main, weighted)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::labels::{parse_tags, EntityType};

    fn z(labels: &[&str]) -> String {
        decompose_boundaries(&parse_tags(labels).unwrap())
            .unwrap()
            .iter()
            .map(|b| b.to_string())
            .collect()
    }

    #[test]
    fn examples() {
        assert_eq!(z(&["O", "B-PER", "I-PER", "I-PER", "O"]), "OBOEO");
        assert_eq!(z(&["B-LOC"]), "B");
        assert_eq!(z(&["O", "O", "O"]), "OOO");
        assert_eq!(z(&["B-ORG", "I-ORG", "B-ORG", "B-PER", "I-PER"]), "BEBBE");
    }

    #[test]
    fn malformed_rejected() {
        assert!(decompose_boundaries(&parse_tags(&["O", "I-PER"]).unwrap()).is_err());
    }

    #[test]
    fn joint_arithmetic() {
        assert_eq!(joint_loss(2.0, 4.0, &JointLossConfig::new(0.25).unwrap()), 3.0);
        assert_eq!(joint_loss(2.5, 4.0, &JointLossConfig::new(0.0).unwrap()), 2.5);
        assert!(JointLossConfig::new(-0.1).is_err());
        assert!(JointLossConfig::new(f64::NAN).is_err());
    }

    fn bio_strategy() -> impl Strategy<Value = Vec<Tag>> {
        // entities as (type, length) separated by O runs
        prop::collection::vec((0usize..4, 1usize..4, 0usize..3), 0..6).prop_map(|ents| {
            let mut tags = Vec::new();
            for (t, len, gap) in ents {
                tags.extend(std::iter::repeat_n(Tag::O, gap));
                let ty = EntityType::ALL[t];
                tags.push(Tag::B(ty));
                tags.extend(std::iter::repeat_n(Tag::I(ty), len - 1));
            }
            if tags.is_empty() {
                tags.push(Tag::O);
            }
            tags
        })
    }

    proptest! {
        #[test]
        fn counts_and_type_stripping(tags in bio_strategy(), perm in Just([2usize, 0, 3, 1])) {
            let zs = decompose_boundaries(&tags).unwrap();
            let entities = tags.iter().filter(|t| matches!(t, Tag::B(_))).count();
            let multi = tags
                .iter()
                .enumerate()
                .filter(|(i, t)| matches!(t, Tag::B(_)) && matches!(tags.get(i + 1), Some(Tag::I(_))))
                .count();
            prop_assert_eq!(zs.iter().filter(|&&b| b == Boundary::B).count(), entities);
            prop_assert_eq!(zs.iter().filter(|&&b| b == Boundary::E).count(), multi);
            let renamed: Vec<Tag> = tags
                .iter()
                .map(|&t| match t {
                    Tag::O => Tag::O,
                    Tag::B(x) => Tag::B(EntityType::ALL[perm[x.index()]]),
                    Tag::I(x) => Tag::I(EntityType::ALL[perm[x.index()]]),
                })
                .collect();
            prop_assert_eq!(decompose_boundaries(&renamed).unwrap(), zs);
        }
    }
}
