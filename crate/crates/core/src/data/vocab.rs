use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::lattice::SpecialTokens;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const CLS: usize = 2;
const SEP: usize = 3;

const WORD_RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const OBJECT_RESERVED: [&str; 2] = ["[PAD]", "[UNK]"];

/// String to id mapping. Ids are assigned in first-seen order after the
/// reserved entries, so a fixed corpus always yields the same vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    fn with_reserved(reserved: &[&str]) -> Self {
        Self::from(reserved.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    /// Word vocabulary over the tokens of `samples`.
    pub fn words<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut v = Self::with_reserved(&WORD_RESERVED);
        for s in samples {
            for t in &s.tokens {
                v.add(t);
            }
        }
        v
    }

    /// Object vocabulary over the concepts of `samples`.
    pub fn objects<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut v = Self::with_reserved(&OBJECT_RESERVED);
        for s in samples {
            for o in &s.objects {
                v.add(&o.concept);
            }
        }
        v
    }

    pub fn add(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.items.len();
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), i);
        i
    }

    /// Id of `s`, or [`UNK`] when unseen.
    pub fn id(&self, s: &str) -> usize {
        self.index.get(s).copied().unwrap_or(UNK)
    }

    pub fn ids<S: AsRef<str>>(&self, items: &[S]) -> Vec<usize> {
        items.iter().map(|s| self.id(s.as_ref())).collect()
    }

    pub fn name(&self, id: usize) -> &str {
        self.items.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `[CLS]` and `[SEP]` ids of a word vocabulary.
    pub fn specials() -> SpecialTokens {
        SpecialTokens { cls: CLS, sep: SEP }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Tag;

    #[test]
    fn reserved_then_first_seen() {
        let s = Sample::new(vec!["b".into(), "a".into(), "b".into()], vec![Tag::O; 3], vec![]).unwrap();
        let v = Vocab::words([&s]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.name(Vocab::specials().cls), "[CLS]");
        assert_eq!(v.name(PAD), "[PAD]");
    }

    #[test]
    fn serde_round_trip() {
        let mut v = Vocab::with_reserved(&OBJECT_RESERVED);
        v.add("scene_PER");
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["[PAD]","[UNK]","scene_PER"]"#);
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("scene_PER"), 2);
    }
}
