//! Synthetic multimodal NER corpora.
//!
//! Entity surfaces are drawn from a lexicon of opaque tokens (`e12a e12b`),
//! fillers are `w{i}`. Some surfaces are ambiguous: they occur with two
//! gold types, alternating across occurrences, and every ambiguous mention
//! carries a phrase object whose concept names its true type. Text alone
//! therefore cannot type an ambiguous mention better than chance, while the
//! attached object resolves it.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, SampleObject};
use crate::error::{Error, Result};
use crate::labels::{EntityType, Tag};
use crate::lattice::ObjectKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub types: Vec<EntityType>,
    pub filler_vocab: usize,
    pub surfaces_per_type: usize,
    pub max_surface_len: usize,
    /// Fraction of lexicon surfaces that carry two types.
    pub ambiguity: f64,
    pub concepts_per_type: usize,
    /// Chance that an unambiguous mention gets a phrase object.
    pub p_phrase: f64,
    /// Chance that a sample gets the four general-word objects.
    pub p_general: f64,
    /// Chance that the whole-image concept names the majority type.
    pub p_scene: f64,
    /// Chance that a sample gets a decoy phrase object on filler tokens.
    pub visual_bias: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            types: EntityType::ALL.to_vec(),
            filler_vocab: 200,
            surfaces_per_type: 12,
            max_surface_len: 2,
            ambiguity: 0.0,
            concepts_per_type: 3,
            p_phrase: 0.5,
            p_general: 0.5,
            p_scene: 0.8,
            visual_bias: 0.0,
            min_len: 4,
            max_len: 12,
            min_entities: 1,
            max_entities: 3,
            train: 200,
            dev: 50,
            test: 100,
        }
    }
}

impl GeneratorSpec {
    fn surface_count(&self) -> usize {
        self.surfaces_per_type * self.types.len()
    }

    fn ambiguous_count(&self) -> usize {
        (self.ambiguity * self.surface_count() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, p) in [
            ("ambiguity", self.ambiguity),
            ("p_phrase", self.p_phrase),
            ("p_general", self.p_general),
            ("p_scene", self.p_scene),
            ("visual_bias", self.visual_bias),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.types.is_empty() {
            return bad("at least one entity type is required".into());
        }
        let mut sorted = self.types.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.types.len() {
            return bad("entity types must be distinct".into());
        }
        if self.surfaces_per_type == 0 || self.max_surface_len == 0 || self.concepts_per_type == 0 {
            return bad("surfaces_per_type, max_surface_len and concepts_per_type must be positive".into());
        }
        if self.filler_vocab == 0 {
            return bad("filler_vocab must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad sentence length range {}..={}", self.min_len, self.max_len));
        }
        if self.min_entities > self.max_entities {
            return bad(format!(
                "bad entity count range {}..={}",
                self.min_entities, self.max_entities
            ));
        }
        if self.ambiguity > 0.0 {
            if self.types.len() < 2 {
                return bad("lexicon too small: ambiguity needs at least two entity types".into());
            }
            if self.ambiguous_count() == 0 {
                return bad(format!(
                    "lexicon too small: {} surfaces give no ambiguous surface at fraction {}",
                    self.surface_count(),
                    self.ambiguity
                ));
            }
            let mentions = (self.train + self.dev + self.test) * self.min_entities;
            if mentions < 2 * self.surface_count() {
                return bad(format!(
                    "corpus too small: {mentions} guaranteed mentions cannot show each of {} surfaces twice",
                    self.surface_count()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Surface {
    tokens: Vec<String>,
    /// One type, or two for an ambiguous surface.
    types: Vec<EntityType>,
    /// Per-surface phase of the type alternation.
    phase: usize,
}

/// Counts for one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub tokens: usize,
    pub entities: BTreeMap<String, usize>,
    pub ambiguous_mentions: usize,
    pub objects: BTreeMap<String, usize>,
    pub decoys: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub surfaces: usize,
    pub ambiguous_surfaces: usize,
    /// Ambiguous surfaces observed with at least two gold types.
    pub ambiguous_surfaces_multi_type: usize,
    /// Best type accuracy on ambiguous mentions for a predictor that sees
    /// only the surface: per surface, the majority type's share.
    pub text_only_ambiguous_ceiling: f64,
    pub splits: BTreeMap<String, SplitStats>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = ["train", "dev", "test"];
        write!(f, "{:<22}", "")?;
        for n in names {
            write!(f, "{n:>8}")?;
        }
        writeln!(f)?;
        let mut row = |label: &str, get: &dyn Fn(&SplitStats) -> usize| -> fmt::Result {
            write!(f, "{label:<22}")?;
            for n in names {
                write!(f, "{:>8}", self.splits.get(n).map_or(0, get))?;
            }
            writeln!(f)
        };
        row("sentences", &|s| s.sentences)?;
        row("tokens", &|s| s.tokens)?;
        for ty in EntityType::ALL {
            row(&format!("entities {ty}"), &|s| {
                s.entities.get(ty.as_str()).copied().unwrap_or(0)
            })?;
        }
        row("entities total", &|s| s.entities.values().sum())?;
        row("ambiguous mentions", &|s| s.ambiguous_mentions)?;
        for kind in [ObjectKind::WholeImage, ObjectKind::NounPhrase, ObjectKind::GeneralWord] {
            row(&format!("objects {}", kind.as_str()), &|s| {
                s.objects.get(kind.as_str()).copied().unwrap_or(0)
            })?;
        }
        row("decoy objects", &|s| s.decoys)?;
        writeln!(
            f,
            "lexicon: {} surfaces, {} ambiguous ({} seen with 2+ types)",
            self.surfaces, self.ambiguous_surfaces, self.ambiguous_surfaces_multi_type
        )?;
        write!(
            f,
            "text-only ceiling on ambiguous mentions: {:.4}",
            self.text_only_ambiguous_ceiling
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: CorpusStats,
}

struct Generator<'a> {
    spec: &'a GeneratorSpec,
    rng: ChaCha8Rng,
    lexicon: Vec<Surface>,
    /// Surfaces still to be used in the current pass over the lexicon.
    queue: Vec<usize>,
    seen: Vec<BTreeMap<EntityType, usize>>,
}

struct Mention {
    surface: usize,
    ty: EntityType,
    start: usize,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a GeneratorSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let total = spec.surface_count();
        let n_amb = spec.ambiguous_count();
        let t = spec.types.len();
        let mut ambiguous: Vec<bool> = (0..total).map(|i| i < n_amb).collect();
        ambiguous.shuffle(&mut rng);
        let lexicon = (0..total)
            .map(|k| {
                let len = rng.gen_range(1..=spec.max_surface_len);
                let tokens = (0..len).map(|j| format!("e{k}{}", (b'a' + j as u8) as char)).collect();
                let first = spec.types[k % t];
                let types = if ambiguous[k] {
                    vec![first, spec.types[(k + 1) % t]]
                } else {
                    vec![first]
                };
                Surface {
                    tokens,
                    types,
                    phase: rng.gen_range(0..2),
                }
            })
            .collect();
        Self {
            spec,
            rng,
            lexicon,
            queue: Vec::new(),
            seen: vec![BTreeMap::new(); total],
        }
    }

    /// Next surface from a reshuffled cycle over the lexicon, so every
    /// surface is used once before any is used again.
    fn next_surface(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = (0..self.lexicon.len()).collect();
            self.queue.shuffle(&mut self.rng);
        }
        self.queue.pop().expect("refilled")
    }

    fn mention_type(&mut self, surface: usize) -> EntityType {
        let s = &self.lexicon[surface];
        let count: usize = self.seen[surface].values().sum();
        let ty = s.types[(s.phase + count) % s.types.len()];
        *self.seen[surface].entry(ty).or_default() += 1;
        ty
    }

    fn concept(&mut self, ty: EntityType) -> String {
        format!("{ty}_obj{}", self.rng.gen_range(0..self.spec.concepts_per_type))
    }

    fn sample(&mut self, stats: &mut SplitStats) -> Sample {
        let spec = self.spec;
        let target_len = self.rng.gen_range(spec.min_len..=spec.max_len);
        let k = self.rng.gen_range(spec.min_entities..=spec.max_entities);
        let surfaces: Vec<usize> = (0..k).map(|_| self.next_surface()).collect();
        let entity_tokens: usize = surfaces.iter().map(|&s| self.lexicon[s].tokens.len()).sum();
        let fillers = target_len
            .saturating_sub(entity_tokens)
            .max(k.saturating_sub(1))
            .max(usize::from(k == 0));
        // gaps[0] before the first entity, gaps[k] after the last
        let mut gaps = vec![0usize; k + 1];
        for g in gaps.iter_mut().take(k).skip(1) {
            *g = 1;
        }
        for _ in 0..fillers - k.saturating_sub(1) {
            let i = self.rng.gen_range(0..=k);
            gaps[i] += 1;
        }

        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let mut filler_pos = Vec::new();
        let mut mentions = Vec::new();
        for (i, &gap) in gaps.iter().enumerate() {
            for _ in 0..gap {
                filler_pos.push(tokens.len() + 1);
                tokens.push(format!("w{}", self.rng.gen_range(0..spec.filler_vocab)));
                tags.push(Tag::O);
            }
            if let Some(&s) = surfaces.get(i) {
                let ty = self.mention_type(s);
                mentions.push(Mention {
                    surface: s,
                    ty,
                    start: tokens.len() + 1,
                });
                for (j, tok) in self.lexicon[s].tokens.iter().enumerate() {
                    tokens.push(tok.clone());
                    tags.push(if j == 0 { Tag::B(ty) } else { Tag::I(ty) });
                }
            }
        }

        let mut objects = Vec::new();
        let majority = majority_type(&mentions);
        let scene = match majority {
            Some(ty) if self.rng.gen_bool(spec.p_scene) => format!("scene_{ty}"),
            _ => "scene_none".to_string(),
        };
        objects.push(SampleObject {
            concept: scene,
            kind: ObjectKind::WholeImage,
            span: None,
        });
        let mut phrases = Vec::new();
        for m in &mentions {
            let ambiguous = self.lexicon[m.surface].types.len() > 1;
            if ambiguous {
                stats.ambiguous_mentions += 1;
            }
            if ambiguous || self.rng.gen_bool(spec.p_phrase) {
                let last = m.start + self.lexicon[m.surface].tokens.len() - 1;
                let concept = self.concept(m.ty);
                phrases.push((m.start, last, concept));
            }
        }
        if !filler_pos.is_empty() && self.rng.gen_bool(spec.visual_bias) {
            let at = *filler_pos.choose(&mut self.rng).expect("non-empty");
            let ty = *spec.types.choose(&mut self.rng).expect("validated");
            let concept = self.concept(ty);
            phrases.push((at, at, concept));
            stats.decoys += 1;
        }
        phrases.sort();
        objects.extend(phrases.into_iter().map(|(a, b, concept)| SampleObject {
            concept,
            kind: ObjectKind::NounPhrase,
            span: Some([a, b]),
        }));
        if self.rng.gen_bool(spec.p_general) {
            for ty in EntityType::ALL {
                let hit = if mentions.iter().any(|m| m.ty == ty) {
                    "hit"
                } else {
                    "miss"
                };
                objects.push(SampleObject {
                    concept: format!("general_{ty}_{hit}"),
                    kind: ObjectKind::GeneralWord,
                    span: None,
                });
            }
        }

        stats.sentences += 1;
        stats.tokens += tokens.len();
        for m in &mentions {
            *stats.entities.entry(m.ty.to_string()).or_default() += 1;
        }
        for o in &objects {
            *stats.objects.entry(o.kind.as_str().to_string()).or_default() += 1;
        }
        Sample::new(tokens, tags, objects).expect("generator emits well-formed samples")
    }

    fn split(&mut self, name: &str, count: usize, stats: &mut CorpusStats) -> Vec<Sample> {
        let mut s = SplitStats::default();
        let out = (0..count).map(|_| self.sample(&mut s)).collect();
        stats.splits.insert(name.to_string(), s);
        out
    }
}

/// Most frequent mention type, ties going to the earliest mention.
fn majority_type(mentions: &[Mention]) -> Option<EntityType> {
    let mut best: Option<(usize, EntityType)> = None;
    for m in mentions {
        let c = mentions.iter().filter(|x| x.ty == m.ty).count();
        if best.is_none_or(|(bc, _)| c > bc) {
            best = Some((c, m.ty));
        }
    }
    best.map(|(_, ty)| ty)
}

/// Generates train, dev and test splits from one seeded stream.
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut g = Generator::new(spec);
    let mut stats = CorpusStats {
        surfaces: g.lexicon.len(),
        ambiguous_surfaces: g.lexicon.iter().filter(|s| s.types.len() > 1).count(),
        ..Default::default()
    };
    let train = g.split("train", spec.train, &mut stats);
    let dev = g.split("dev", spec.dev, &mut stats);
    let test = g.split("test", spec.test, &mut stats);

    let (mut best, mut total) = (0usize, 0usize);
    for (s, seen) in g.lexicon.iter().zip(&g.seen) {
        if s.types.len() < 2 {
            continue;
        }
        if seen.len() >= 2 {
            stats.ambiguous_surfaces_multi_type += 1;
        }
        best += seen.values().max().copied().unwrap_or(0);
        total += seen.values().sum::<usize>();
    }
    stats.text_only_ambiguous_ceiling = if total == 0 { 0.0 } else { best as f64 / total as f64 };
    Ok(Corpus {
        train,
        dev,
        test,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::ebd::decompose_boundaries;
    use crate::eval::extract_spans;

    fn spec() -> GeneratorSpec {
        GeneratorSpec {
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&spec()).unwrap();
        let b = generate_corpus(&spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&GeneratorSpec { seed: 4, ..spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn well_formed_and_aligned() {
        let c = generate_corpus(&GeneratorSpec {
            ambiguity: 0.5,
            visual_bias: 0.5,
            ..spec()
        })
        .unwrap();
        for s in c.train.iter().chain(&c.dev).chain(&c.test) {
            s.validate().unwrap();
            decompose_boundaries(&s.tags).unwrap();
            assert_eq!(s.objects.iter().filter(|o| o.kind == ObjectKind::WholeImage).count(), 1);
            let general = s.objects.iter().filter(|o| o.kind == ObjectKind::GeneralWord).count();
            assert!(general == 0 || general == 4);
            let spans = extract_spans(&s.tags);
            for o in s.objects.iter().filter(|o| o.kind == ObjectKind::NounPhrase) {
                let [a, b] = o.span.unwrap();
                let on_entity = spans.iter().any(|e| e.first == a && e.last == b);
                let on_filler = a == b && s.tags[a - 1] == Tag::O;
                assert!(on_entity || on_filler, "{s:?}");
            }
        }
    }

    #[test]
    fn phrase_objects_match_entities_without_bias() {
        let c = generate_corpus(&GeneratorSpec {
            ambiguity: 0.5,
            ..spec()
        })
        .unwrap();
        for s in &c.train {
            let spans = extract_spans(&s.tags);
            for o in s.objects.iter().filter(|o| o.kind == ObjectKind::NounPhrase) {
                let [a, b] = o.span.unwrap();
                let e = spans.iter().find(|e| e.first == a && e.last == b).expect("aligned");
                assert!(o.concept.starts_with(e.ty.as_str()));
            }
        }
        assert_eq!(c.stats.splits["train"].decoys, 0);
    }

    #[test]
    fn zero_ambiguity_labels_are_token_function() {
        let c = generate_corpus(&spec()).unwrap();
        let mut by_token: HashMap<&str, Tag> = HashMap::new();
        for s in c.train.iter().chain(&c.dev).chain(&c.test) {
            for (tok, &tag) in s.tokens.iter().zip(&s.tags) {
                assert_eq!(*by_token.entry(tok).or_insert(tag), tag, "{tok}");
            }
        }
        assert_eq!(c.stats.ambiguous_surfaces, 0);
    }

    #[test]
    fn ambiguous_surfaces_have_two_types() {
        let c = generate_corpus(&GeneratorSpec {
            ambiguity: 1.0,
            types: vec![EntityType::Per, EntityType::Loc],
            ..spec()
        })
        .unwrap();
        assert_eq!(c.stats.ambiguous_surfaces, c.stats.surfaces);
        assert_eq!(c.stats.ambiguous_surfaces_multi_type, c.stats.ambiguous_surfaces);
        assert!((c.stats.text_only_ambiguous_ceiling - 0.5).abs() < 0.05);
    }

    #[test]
    fn rejections() {
        for bad in [
            GeneratorSpec {
                ambiguity: 1.5,
                ..spec()
            },
            GeneratorSpec {
                ambiguity: 0.5,
                types: vec![EntityType::Per],
                ..spec()
            },
            GeneratorSpec {
                ambiguity: 0.01,
                surfaces_per_type: 2,
                ..spec()
            },
            GeneratorSpec {
                min_len: 5,
                max_len: 4,
                ..spec()
            },
            GeneratorSpec {
                ambiguity: 0.5,
                train: 3,
                dev: 0,
                test: 0,
                ..spec()
            },
        ] {
            let err = generate_corpus(&bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
    }

    #[test]
    fn stats_report_shape() {
        let c = generate_corpus(&spec()).unwrap();
        let text = c.stats.to_string();
        assert!(text.contains("entities PER"));
        assert!(text.contains("objects whole"));
        let train = &c.stats.splits["train"];
        assert_eq!(train.sentences, 200);
        assert_eq!(train.tokens, c.train.iter().map(Sample::len).sum::<usize>());
    }
}
