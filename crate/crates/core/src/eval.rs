//! Span extraction and exact-match precision / recall / F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::labels::{EntityType, Tag};

/// A typed entity over 1-based inclusive token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntitySpan {
    pub first: usize,
    pub last: usize,
    pub ty: EntityType,
}

/// Decodes BIO tags into spans. An `I-X` with no open `X` entity starts a
/// new `X` span.
pub fn extract_spans(tags: &[Tag]) -> BTreeSet<EntitySpan> {
    let mut spans = BTreeSet::new();
    let mut open: Option<EntitySpan> = None;
    for (i, &t) in tags.iter().enumerate() {
        let pos = i + 1;
        match t {
            Tag::O => {
                spans.extend(open.take());
            }
            Tag::B(ty) => {
                spans.extend(open.take());
                open = Some(EntitySpan {
                    first: pos,
                    last: pos,
                    ty,
                });
            }
            Tag::I(ty) => match &mut open {
                Some(s) if s.ty == ty => s.last = pos,
                _ => {
                    spans.extend(open.take());
                    open = Some(EntitySpan {
                        first: pos,
                        last: pos,
                        ty,
                    });
                }
            },
        }
    }
    spans.extend(open);
    spans
}

/// Encodes non-overlapping spans as BIO over `n` tokens.
pub fn spans_to_tags(spans: &BTreeSet<EntitySpan>, n: usize) -> Vec<Tag> {
    let mut tags = vec![Tag::O; n];
    for s in spans {
        tags[s.first - 1] = Tag::B(s.ty);
        for t in &mut tags[s.first..s.last] {
            *t = Tag::I(s.ty);
        }
    }
    tags
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    /// Precision, 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.predicted)
    }

    /// Recall, 0 when there is no gold entity.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.gold)
    }

    /// Harmonic mean, 0 when `P + R == 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub overall: Counts,
    pub per_type: BTreeMap<EntityType, Counts>,
}

impl MetricsReport {
    /// Adds one sentence's gold and predicted spans.
    pub fn add(&mut self, gold: &BTreeSet<EntitySpan>, pred: &BTreeSet<EntitySpan>) {
        for s in gold {
            self.per_type.entry(s.ty).or_default().gold += 1;
            self.overall.gold += 1;
        }
        for s in pred {
            let c = self.per_type.entry(s.ty).or_default();
            c.predicted += 1;
            self.overall.predicted += 1;
            if gold.contains(s) {
                c.tp += 1;
                self.overall.tp += 1;
            }
        }
    }

    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    /// Aligned table with one row per type and an overall row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}",
            "type", "precision", "recall", "f1", "tp", "pred", "gold"
        );
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                out,
                "{name:<8} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                c.precision(),
                c.recall(),
                c.f1(),
                c.tp,
                c.predicted,
                c.gold
            );
        };
        for ty in EntityType::ALL {
            if let Some(c) = self.per_type.get(&ty) {
                row(ty.as_str(), c);
            }
        }
        row("overall", &self.overall);
        out
    }

    /// `key=value` lines for machines.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let mut put = |prefix: &str, c: &Counts| {
            let _ = writeln!(out, "{prefix}_precision={}", c.precision());
            let _ = writeln!(out, "{prefix}_recall={}", c.recall());
            let _ = writeln!(out, "{prefix}_f1={}", c.f1());
            let _ = writeln!(out, "{prefix}_tp={}", c.tp);
            let _ = writeln!(out, "{prefix}_predicted={}", c.predicted);
            let _ = writeln!(out, "{prefix}_gold={}", c.gold);
        };
        put("overall", &self.overall);
        for ty in EntityType::ALL {
            if let Some(c) = self.per_type.get(&ty) {
                put(ty.as_str(), c);
            }
        }
        out
    }
}

/// Scores parallel per-sentence gold and predicted span sets.
pub fn score(gold: &[BTreeSet<EntitySpan>], pred: &[BTreeSet<EntitySpan>]) -> MetricsReport {
    assert_eq!(gold.len(), pred.len(), "gold and predicted sentence counts differ");
    let mut r = MetricsReport::default();
    for (g, p) in gold.iter().zip(pred) {
        r.add(g, p);
    }
    r
}
