//! Flat lattice of words and visual objects.
//!
//! Cells are ordered `[CLS], w_1..w_n, [SEP], o_1..o_m`. Every cell carries
//! a head and tail word position: `[CLS]` is 0, word `w_i` is `i`, `[SEP]`
//! is `n + 1`. A noun-phrase object takes its grounded span; the whole
//! image and general-category objects span all real words, `(1, n)`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Word,
    Special,
    Visual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectKind {
    #[serde(rename = "whole")]
    WholeImage,
    #[serde(rename = "phrase")]
    NounPhrase,
    #[serde(rename = "general")]
    GeneralWord,
}

impl ObjectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::WholeImage => "whole",
            ObjectKind::NounPhrase => "phrase",
            ObjectKind::GeneralWord => "general",
        }
    }
}

/// A visual object attached to a sentence. `span` is 1-based and inclusive,
/// present exactly for noun-phrase objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectAnnotation {
    pub object: usize,
    pub kind: ObjectKind,
    pub span: Option<(usize, usize)>,
}

impl ObjectAnnotation {
    pub fn whole(object: usize) -> Self {
        Self {
            object,
            kind: ObjectKind::WholeImage,
            span: None,
        }
    }

    pub fn phrase(object: usize, first: usize, last: usize) -> Self {
        Self {
            object,
            kind: ObjectKind::NounPhrase,
            span: Some((first, last)),
        }
    }

    pub fn general(object: usize) -> Self {
        Self {
            object,
            kind: ObjectKind::GeneralWord,
            span: None,
        }
    }

    /// Checks the span against a sentence of `n` words.
    pub fn validate(&self, n: usize) -> Result<()> {
        match (self.kind, self.span) {
            (ObjectKind::NounPhrase, None) => Err(Error::Lattice("noun-phrase object without a span".into())),
            (ObjectKind::NounPhrase, Some((a, b))) if a < 1 || a > b || b > n => Err(Error::Lattice(format!(
                "span ({a}, {b}) invalid for sentence of {n} words"
            ))),
            (kind, Some(span)) if kind != ObjectKind::NounPhrase => Err(Error::Lattice(format!(
                "{} object must not carry a span, got {span:?}",
                kind.as_str()
            ))),
            _ => Ok(()),
        }
    }
}

/// One lattice element. `content` is a word id for word and special cells
/// and an object id for visual cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub content: usize,
    pub modality: Modality,
    pub head: i64,
    pub tail: i64,
}

/// Word ids used for the two boundary markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub cls: usize,
    pub sep: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatLattice {
    cells: Vec<Cell>,
    n: usize,
    m: usize,
}

/// Disjoint, exhaustive boolean selectors over lattice cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityMask {
    pub word: Vec<bool>,
    pub special: Vec<bool>,
    pub visual: Vec<bool>,
}

impl ModalityMask {
    pub fn word_indices(&self) -> Vec<usize> {
        indices(&self.word)
    }

    pub fn special_indices(&self) -> Vec<usize> {
        indices(&self.special)
    }

    pub fn visual_indices(&self) -> Vec<usize> {
        indices(&self.visual)
    }
}

fn indices(sel: &[bool]) -> Vec<usize> {
    sel.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

impl FlatLattice {
    /// Builds the lattice for `tokens` (word ids) and their visual objects.
    pub fn build(tokens: &[usize], objects: &[ObjectAnnotation], specials: SpecialTokens) -> Result<Self> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Lattice("empty sentence".into()));
        }
        for o in objects {
            o.validate(n)?;
        }
        let mut cells = Vec::with_capacity(n + 2 + objects.len());
        let special = |content, pos| Cell {
            content,
            modality: Modality::Special,
            head: pos,
            tail: pos,
        };
        cells.push(special(specials.cls, 0));
        for (i, &t) in tokens.iter().enumerate() {
            let pos = (i + 1) as i64;
            cells.push(Cell {
                content: t,
                modality: Modality::Word,
                head: pos,
                tail: pos,
            });
        }
        cells.push(special(specials.sep, n as i64 + 1));
        for o in objects {
            let (head, tail) = match (o.kind, o.span) {
                (ObjectKind::NounPhrase, Some((a, b))) => (a as i64, b as i64),
                _ => (1, n as i64),
            };
            cells.push(Cell {
                content: o.object,
                modality: Modality::Visual,
                head,
                tail,
            });
        }
        Ok(Self {
            cells,
            n,
            m: objects.len(),
        })
    }

    /// Rebuilds a lattice from serialized cell rows, checking the layout.
    pub fn from_cells(cells: Vec<Cell>) -> Result<Self> {
        let n = cells.iter().filter(|c| c.modality == Modality::Word).count();
        let m = cells.iter().filter(|c| c.modality == Modality::Visual).count();
        if n == 0 || cells.len() != n + m + 2 {
            return Err(Error::Lattice(format!(
                "{} cells do not form [CLS] words [SEP] objects",
                cells.len()
            )));
        }
        let layout_ok = cells[0].modality == Modality::Special
            && cells[1..=n].iter().all(|c| c.modality == Modality::Word)
            && cells[n + 1].modality == Modality::Special
            && cells[n + 2..].iter().all(|c| c.modality == Modality::Visual);
        if !layout_ok {
            return Err(Error::Lattice("cells out of order".into()));
        }
        if let Some(c) = cells.iter().find(|c| c.head > c.tail) {
            return Err(Error::Lattice(format!("cell with head {} > tail {}", c.head, c.tail)));
        }
        Ok(Self { cells, n, m })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Word count `n`.
    pub fn num_words(&self) -> usize {
        self.n
    }

    /// Object count `m`.
    pub fn num_objects(&self) -> usize {
        self.m
    }

    /// Index range of the word cells.
    pub fn word_slice(&self) -> Range<usize> {
        1..self.n + 1
    }

    /// The `n + 2` text cells without visual objects.
    pub fn text_only(&self) -> Self {
        Self {
            cells: self.cells[..self.n + 2].to_vec(),
            n: self.n,
            m: 0,
        }
    }

    /// Same lattice with every head and tail moved by `offset`.
    pub fn shifted(&self, offset: i64) -> Self {
        let mut out = self.clone();
        for c in &mut out.cells {
            c.head += offset;
            c.tail += offset;
        }
        out
    }

    /// Same lattice with visual cells reordered: object `k` of the result is
    /// object `order[k]` of `self`.
    pub fn permute_objects(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.m {
            return Err(Error::Lattice("permutation length differs from object count".into()));
        }
        let base = self.n + 2;
        let mut out = self.clone();
        for (k, &src) in order.iter().enumerate() {
            out.cells[base + k] = self.cells[base + src];
        }
        Ok(out)
    }

    pub fn modality_mask(&self) -> ModalityMask {
        let sel = |m: Modality| self.cells.iter().map(|c| c.modality == m).collect();
        ModalityMask {
            word: sel(Modality::Word),
            special: sel(Modality::Special),
            visual: sel(Modality::Visual),
        }
    }

    /// Aligned text table of `index content modality head tail`.
    pub fn render(&self, name: impl Fn(&Cell) -> String) -> String {
        let names: Vec<String> = self.cells.iter().map(&name).collect();
        let w = names.iter().map(String::len).max().unwrap_or(7).max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5}  {:<w$}  {:<8}  {:>4}  {:>4}",
            "index", "content", "modality", "head", "tail"
        );
        for (i, (c, nm)) in self.cells.iter().zip(&names).enumerate() {
            let modality = match c.modality {
                Modality::Word => "word",
                Modality::Special => "special",
                Modality::Visual => "visual",
            };
            let _ = writeln!(out, "{i:>5}  {nm:<w$}  {modality:<8}  {:>4}  {:>4}", c.head, c.tail);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const SP: SpecialTokens = SpecialTokens { cls: 100, sep: 101 };

    fn heads_tails(l: &FlatLattice) -> Vec<(i64, i64)> {
        l.cells().iter().map(|c| (c.head, c.tail)).collect()
    }

    #[test]
    fn whole_image_and_phrase() {
        let objs = [ObjectAnnotation::whole(0), ObjectAnnotation::phrase(1, 4, 5)];
        let l = FlatLattice::build(&[1, 2, 3, 4, 5], &objs, SP).unwrap();
        assert_eq!(
            heads_tails(&l),
            [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (1, 5), (4, 5)]
        );
        assert_eq!(l.cells()[0].content, 100);
        assert_eq!(l.cells()[6].content, 101);
    }

    #[test]
    fn single_word_no_objects() {
        let l = FlatLattice::build(&[7], &[], SP).unwrap();
        assert_eq!(heads_tails(&l), [(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn general_words_span_the_sentence() {
        let objs: Vec<_> = (0..4).map(ObjectAnnotation::general).collect();
        let l = FlatLattice::build(&[1, 2, 3], &objs, SP).unwrap();
        assert_eq!(l.len(), 9);
        assert!(l.cells()[5..].iter().all(|c| (c.head, c.tail) == (1, 3)));
    }

    #[test]
    fn rejects_empty_and_bad_spans() {
        assert!(FlatLattice::build(&[], &[], SP).is_err());
        let err = FlatLattice::build(&[1, 2], &[ObjectAnnotation::phrase(0, 2, 3)], SP)
            .unwrap_err()
            .to_string();
        assert!(err.contains("(2, 3)") && err.contains('2'), "{err}");
        assert!(FlatLattice::build(&[1, 2], &[ObjectAnnotation::phrase(0, 0, 1)], SP).is_err());
        assert!(FlatLattice::build(&[1, 2], &[ObjectAnnotation::phrase(0, 2, 1)], SP).is_err());
        let missing = ObjectAnnotation {
            object: 0,
            kind: ObjectKind::NounPhrase,
            span: None,
        };
        assert!(FlatLattice::build(&[1], &[missing], SP).is_err());
    }

    #[test]
    fn modality_selectors() {
        let l = FlatLattice::build(&[1, 2], &[ObjectAnnotation::whole(0)], SP).unwrap();
        let m = l.modality_mask();
        assert_eq!(m.word_indices(), [1, 2]);
        assert_eq!(m.word.len(), 5);
        let l = FlatLattice::build(&[1, 2], &[], SP).unwrap();
        assert!(l.modality_mask().visual_indices().is_empty());
        let objs = [ObjectAnnotation::whole(0), ObjectAnnotation::phrase(1, 2, 3)];
        let l = FlatLattice::build(&[1, 2, 3, 4, 5], &objs, SP).unwrap();
        let m = l.modality_mask();
        let sizes = (
            m.word_indices().len(),
            m.visual_indices().len(),
            m.special_indices().len(),
        );
        assert_eq!(sizes, (5, 2, 2));
        assert_eq!(sizes.0 + sizes.1 + sizes.2, l.len());
    }

    fn objects_strategy(n: usize) -> impl Strategy<Value = Vec<ObjectAnnotation>> {
        prop::collection::vec((0usize..3, 1..=n, 1..=n, 0usize..50), 0..6).prop_map(|v| {
            v.into_iter()
                .map(|(k, a, b, id)| match k {
                    0 => ObjectAnnotation::whole(id),
                    1 => ObjectAnnotation::general(id),
                    _ => ObjectAnnotation::phrase(id, a.min(b), a.max(b)),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn layout_invariants((tokens, objs) in (1usize..12).prop_flat_map(|n| (
            prop::collection::vec(0usize..40, n),
            objects_strategy(n),
        ))) {
            let l = FlatLattice::build(&tokens, &objs, SP).unwrap();
            let n = tokens.len();
            prop_assert_eq!(l.len(), n + objs.len() + 2);
            for i in l.word_slice() {
                let c = l.cells()[i];
                prop_assert_eq!(c.modality, Modality::Word);
                prop_assert_eq!((c.head, c.tail), (i as i64, i as i64));
            }
            for (c, o) in l.cells()[n + 2..].iter().zip(&objs) {
                prop_assert!(1 <= c.head && c.head <= c.tail && c.tail <= n as i64);
                if let Some((a, b)) = o.span {
                    prop_assert_eq!((c.head, c.tail), (a as i64, b as i64));
                }
            }
            let m = l.modality_mask();
            for i in 0..l.len() {
                prop_assert_eq!(m.word[i] as u8 + m.special[i] as u8 + m.visual[i] as u8, 1);
            }
            let rebuilt = FlatLattice::from_cells(l.cells().to_vec()).unwrap();
            prop_assert_eq!(rebuilt, l);
        }
    }
}
