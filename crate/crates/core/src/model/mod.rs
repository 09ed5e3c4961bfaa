//! The FMIT network: lookup tables standing in for the pretrained encoders,
//! the multimodal main tower, the text-only boundary tower, and their CRF
//! heads.

mod tower;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tower::{
    attention_head, key_mask_matrix, multi_head_attention, pad_cell, project_modalities, relative_context, tower_cells,
    transformer_layer, RelativeContext,
};

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::crf::{CrfNodes, Potentials};
use crate::data::{Sample, Vocab};
use crate::ebd::{decompose_boundaries, NUM_BOUNDARIES};
use crate::error::{Error, Result};
use crate::labels::{Tag, NUM_TAGS};
use crate::lattice::FlatLattice;
use crate::params::{Bindings, ParamStore};
use crate::posenc::{check_even, SinusoidTable};
use crate::tensor::{Real, Tensor};

pub(crate) mod names {
    pub const WORD_TABLE: &str = "emb.word";
    pub const EBD_WORD_TABLE: &str = "ebd.emb.word";
    pub const OBJECT_TABLE: &str = "emb.object";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerKind {
    Multimodal,
    TextOnly,
}

impl TowerKind {
    pub fn prefix(self) -> &'static str {
        match self {
            TowerKind::Multimodal => "main",
            TowerKind::TextOnly => "ebd",
        }
    }

    fn num_labels(self) -> usize {
        match self {
            TowerKind::Multimodal => NUM_TAGS,
            TowerKind::TextOnly => NUM_BOUNDARIES,
        }
    }
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_word: usize,
    pub d_object: usize,
    /// Feed-forward inner width; `4d` when absent.
    pub ffn: Option<usize>,
    pub dropout: f64,
    pub ln_eps: f64,
    pub no_rel: bool,
    pub no_ebd: bool,
    pub no_objects: bool,
    pub no_transitions: bool,
    /// Both towers read one word table.
    pub share_word_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            layers: 2,
            d_word: 16,
            d_object: 16,
            ffn: None,
            dropout: 0.2,
            ln_eps: 1e-5,
            no_rel: false,
            no_ebd: false,
            no_objects: false,
            no_transitions: false,
            share_word_embeddings: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform { fan_in: usize },
    Embedding,
    Zeros,
    Ones,
}

impl ModelConfig {
    /// `d = 512`, `h = 8` with the desk-scale remainder.
    pub fn full_scale() -> Self {
        Self {
            d: 512,
            heads: 8,
            d_word: 768,
            d_object: 2048,
            ..Self::default()
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn.unwrap_or(4 * self.d)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        check_even(self.d)?;
        if self.d_word == 0 || self.d_object == 0 || self.ffn_dim() == 0 {
            return bad("embedding and feed-forward widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn word_table(&self, kind: TowerKind) -> &'static str {
        match kind {
            TowerKind::TextOnly if !self.share_word_embeddings => names::EBD_WORD_TABLE,
            _ => names::WORD_TABLE,
        }
    }

    fn towers(&self) -> Vec<TowerKind> {
        if self.no_ebd {
            vec![TowerKind::Multimodal]
        } else {
            vec![TowerKind::Multimodal, TowerKind::TextOnly]
        }
    }

    /// Every parameter with its shape and initializer, in storage order.
    fn param_specs(&self, words: usize, objects: usize) -> Vec<(String, Vec<usize>, Init)> {
        let (d, dh, f) = (self.d, self.head_dim(), self.ffn_dim());
        let mut out = Vec::new();
        let mut put = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
        put(names::WORD_TABLE.into(), vec![words, self.d_word], Init::Embedding);
        put(
            names::OBJECT_TABLE.into(),
            vec![objects, self.d_object],
            Init::Embedding,
        );
        for kind in self.towers() {
            let p = kind.prefix();
            if kind == TowerKind::TextOnly && !self.share_word_embeddings {
                put(names::EBD_WORD_TABLE.into(), vec![words, self.d_word], Init::Embedding);
            }
            put(
                format!("{p}.proj.w1"),
                vec![d, self.d_word],
                Init::Uniform { fan_in: self.d_word },
            );
            put(format!("{p}.proj.b1"), vec![d], Init::Zeros);
            if kind == TowerKind::Multimodal {
                put(
                    format!("{p}.proj.w2"),
                    vec![d, self.d_object],
                    Init::Uniform { fan_in: self.d_object },
                );
                put(format!("{p}.proj.b2"), vec![d], Init::Zeros);
            }
            put(format!("{p}.proj.w0"), vec![d, d], Init::Uniform { fan_in: d });
            put(format!("{p}.proj.b0"), vec![d], Init::Zeros);
            if !self.no_rel {
                put(format!("{p}.wr"), vec![d, 4 * d], Init::Uniform { fan_in: 4 * d });
            }
            for l in 0..self.layers {
                let lp = format!("{p}.layer{l}");
                for h in 0..self.heads {
                    let hp = format!("{lp}.head{h}");
                    put(format!("{hp}.wq"), vec![d, dh], Init::Uniform { fan_in: d });
                    put(format!("{hp}.wke"), vec![d, dh], Init::Uniform { fan_in: d });
                    if !self.no_rel {
                        put(format!("{hp}.wkr"), vec![d, dh], Init::Uniform { fan_in: d });
                    }
                    put(format!("{hp}.wv"), vec![d, dh], Init::Uniform { fan_in: d });
                    put(format!("{hp}.u"), vec![dh], Init::Zeros);
                    if !self.no_rel {
                        put(format!("{hp}.v"), vec![dh], Init::Zeros);
                    }
                }
                put(format!("{lp}.wt"), vec![d, d], Init::Uniform { fan_in: d });
                put(format!("{lp}.ln1.gamma"), vec![d], Init::Ones);
                put(format!("{lp}.ln1.beta"), vec![d], Init::Zeros);
                put(format!("{lp}.ffn.wa"), vec![f, d], Init::Uniform { fan_in: d });
                put(format!("{lp}.ffn.ba"), vec![f], Init::Zeros);
                put(format!("{lp}.ffn.wb"), vec![d, f], Init::Uniform { fan_in: f });
                put(format!("{lp}.ffn.bb"), vec![d], Init::Zeros);
                put(format!("{lp}.ln2.gamma"), vec![d], Init::Ones);
                put(format!("{lp}.ln2.beta"), vec![d], Init::Zeros);
            }
            let k = kind.num_labels();
            put(format!("{p}.crf.weight"), vec![k, d], Init::Uniform { fan_in: d });
            put(format!("{p}.crf.bias"), vec![k], Init::Zeros);
            if !self.no_transitions {
                put(format!("{p}.crf.transitions"), vec![k, k], Init::Zeros);
                put(format!("{p}.crf.start"), vec![k], Init::Zeros);
                put(format!("{p}.crf.stop"), vec![k], Init::Zeros);
            }
        }
        out
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_tensor<T: Real>(name: &str, shape: &[usize], init: Init, seed: u64) -> Tensor<T> {
    // one stream per parameter name, so adding or removing a tower leaves
    // the other parameters untouched
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    let n: usize = shape.iter().product();
    let uniform = |k: f64, rng: &mut ChaCha8Rng| {
        let dist = Uniform::new_inclusive(-k, k);
        (0..n).map(|_| T::of(dist.sample(rng))).collect()
    };
    let data = match init {
        Init::Uniform { fan_in } => uniform(1.0 / (fan_in as f64).sqrt(), &mut rng),
        Init::Embedding => uniform(1.0, &mut rng),
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
    };
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// A sample in model ids: its lattice, BIO label ids and boundary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub lattice: FlatLattice,
    pub tags: Vec<usize>,
    pub boundaries: Vec<usize>,
}

/// Loss nodes for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub main: NodeId,
    pub ebd: Option<NodeId>,
    pub total: NodeId,
}

/// Dropout streams for the two towers; kept apart so that disabling the
/// boundary tower does not shift the main tower's masks.
pub struct DropoutRngs<'a> {
    pub main: &'a mut ChaCha8Rng,
    pub ebd: &'a mut ChaCha8Rng,
}

/// Borrowed CRF transitions, start and stop scores.
type Pairwise<'a, T> = (&'a Tensor<T>, &'a Tensor<T>, &'a Tensor<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct FmitModel<T> {
    pub config: ModelConfig,
    pub words: Vocab,
    pub objects: Vocab,
    pub params: ParamStore<T>,
}

impl<T: Real> FmitModel<T> {
    pub fn new(config: ModelConfig, words: Vocab, objects: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in config.param_specs(words.len(), objects.len()) {
            let t = init_tensor(&name, &shape, init, seed);
            params.insert(name, t);
        }
        Ok(Self {
            config,
            words,
            objects,
            params,
        })
    }

    /// Assembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, words: Vocab, objects: Vocab, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs(words.len(), objects.len());
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got, t)) in specs.iter().zip(params.iter()) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected `{name}` {shape:?}, found `{got}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            words,
            objects,
            params,
        })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let metadata = serde_json::json!({
            "model": self.config,
            "words": self.words,
            "objects": self.objects,
            "extra": extra,
        });
        Ok(Checkpoint {
            params: self.params.clone(),
            metadata,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let field = |k: &str| {
            ckpt.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let words: Vocab = serde_json::from_value(field("words")?)?;
        let objects: Vocab = serde_json::from_value(field("objects")?)?;
        Self::from_parts(config, words, objects, ckpt.params)
    }

    pub fn encode(&self, sample: &Sample) -> Result<Encoded> {
        let tokens = self.words.ids(&sample.tokens);
        let annotations: Vec<_> = if self.config.no_objects {
            Vec::new()
        } else {
            sample
                .objects
                .iter()
                .map(|o| o.annotation(self.objects.id(&o.concept)))
                .collect()
        };
        let lattice = FlatLattice::build(&tokens, &annotations, Vocab::specials())?;
        let boundaries = decompose_boundaries(&sample.tags)?.iter().map(|b| b.index()).collect();
        Ok(Encoded {
            lattice,
            tags: sample.tags.iter().map(|t| t.index()).collect(),
            boundaries,
        })
    }

    /// Word rows `n×d` of a tower over `enc`, optionally padded to `pad_to`
    /// cells with a key mask.
    #[allow(clippy::too_many_arguments)]
    pub fn word_states(
        &self,
        g: &mut Graph<T>,
        b: &mut Bindings<T>,
        table: &mut SinusoidTable<T>,
        kind: TowerKind,
        enc: &Encoded,
        pad_to: Option<usize>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let lattice = match kind {
            TowerKind::Multimodal => enc.lattice.clone(),
            TowerKind::TextOnly => enc.lattice.text_only(),
        };
        let mut cells = lattice.cells().to_vec();
        let real = cells.len();
        let mask = match pad_to {
            Some(total) if total < real => {
                return Err(Error::Shape(format!("cannot pad {real} cells to {total}")));
            }
            Some(total) => {
                cells.resize(total, pad_cell());
                Some((0..total).map(|i| i < real).collect::<Vec<_>>())
            }
            None => None,
        };
        let all = tower_cells(g, b, &self.config, kind, table, &cells, mask.as_deref(), rng)?;
        let rows: Vec<usize> = lattice.word_slice().collect();
        g.gather_rows(all, &rows)
    }

    pub fn crf_nodes(&self, g: &mut Graph<T>, b: &mut Bindings<T>, kind: TowerKind) -> Result<CrfNodes> {
        let p = kind.prefix();
        let weight = b.node(g, &format!("{p}.crf.weight"))?;
        let bias = b.node(g, &format!("{p}.crf.bias"))?;
        let pairwise = if self.config.no_transitions {
            None
        } else {
            Some((
                b.node(g, &format!("{p}.crf.transitions"))?,
                b.node(g, &format!("{p}.crf.start"))?,
                b.node(g, &format!("{p}.crf.stop"))?,
            ))
        };
        Ok(CrfNodes { weight, bias, pairwise })
    }

    /// `nll_main + λ·nll_ebd` for one sample; the boundary term is absent
    /// when the tower is disabled.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        b: &mut Bindings<T>,
        table: &mut SinusoidTable<T>,
        enc: &Encoded,
        lambda: f64,
        rngs: Option<DropoutRngs<'_>>,
    ) -> Result<LossNodes> {
        let (main_rng, ebd_rng) = match rngs {
            Some(r) => (Some(r.main), Some(r.ebd)),
            None => (None, None),
        };
        let h = self.word_states(g, b, table, TowerKind::Multimodal, enc, None, main_rng)?;
        let crf = self.crf_nodes(g, b, TowerKind::Multimodal)?;
        let main = crf.nll(g, h, &enc.tags)?;
        if self.config.no_ebd {
            return Ok(LossNodes {
                main,
                ebd: None,
                total: main,
            });
        }
        let t = self.word_states(g, b, table, TowerKind::TextOnly, enc, None, ebd_rng)?;
        let crf = self.crf_nodes(g, b, TowerKind::TextOnly)?;
        let ebd = crf.nll(g, t, &enc.boundaries)?;
        let weighted = g.scale(ebd, T::of(lambda));
        let total = g.add(main, weighted)?;
        Ok(LossNodes {
            main,
            ebd: Some(ebd),
            total,
        })
    }

    /// Main-tower emissions `n×K` in evaluation mode.
    pub fn emissions(&self, enc: &Encoded) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bindings::new(&self.params, false);
        let mut table = SinusoidTable::new(self.config.d)?;
        let h = self.word_states(&mut g, &mut b, &mut table, TowerKind::Multimodal, enc, None, None)?;
        let crf = self.crf_nodes(&mut g, &mut b, TowerKind::Multimodal)?;
        let em = crf.emissions(&mut g, h)?;
        Ok(g.value(em).clone())
    }

    fn pairwise(&self, kind: TowerKind) -> Result<Option<Pairwise<'_, T>>> {
        if self.config.no_transitions {
            return Ok(None);
        }
        let p = kind.prefix();
        Ok(Some((
            self.params.get(&format!("{p}.crf.transitions"))?,
            self.params.get(&format!("{p}.crf.start"))?,
            self.params.get(&format!("{p}.crf.stop"))?,
        )))
    }

    /// Viterbi BIO tags for one encoded sample.
    pub fn predict(&self, enc: &Encoded) -> Result<Vec<Tag>> {
        let em = self.emissions(enc)?;
        if !em.all_finite() {
            return Err(Error::NonFinite("emissions during decoding".into()));
        }
        let pot = Potentials::new(&em, self.pairwise(TowerKind::Multimodal)?)?;
        let (path, _) = pot.viterbi();
        path.into_iter().map(Tag::from_index).collect()
    }

    pub fn predict_samples(&self, samples: &[Sample]) -> Result<Vec<Vec<Tag>>> {
        samples.iter().map(|s| self.predict(&self.encode(s)?)).collect()
    }
}

/// The sentence used by [`check_gradients`]: four words, two entities, a
/// phrase object on the first entity and a whole-image object.
pub fn gradcheck_sample() -> Sample {
    use crate::data::SampleObject;
    use crate::labels::EntityType;
    use crate::lattice::ObjectKind;
    Sample::new(
        ["a", "b", "c", "d"].map(String::from).to_vec(),
        vec![
            Tag::B(EntityType::Per),
            Tag::I(EntityType::Per),
            Tag::O,
            Tag::B(EntityType::Loc),
        ],
        vec![
            SampleObject {
                concept: "PER_obj0".into(),
                kind: ObjectKind::NounPhrase,
                span: Some([1, 2]),
            },
            SampleObject {
                concept: "scene_PER".into(),
                kind: ObjectKind::WholeImage,
                span: None,
            },
        ],
    )
    .expect("fixture is well formed")
}

/// Finite-difference check of every parameter of a freshly initialized
/// 64-bit model under the joint loss on [`gradcheck_sample`]. Dropout masks
/// are replayed from `seed` on every evaluation.
pub fn check_gradients(
    config: &ModelConfig,
    seed: u64,
    lambda: f64,
    opts: &crate::gradcheck::GradCheckOptions,
) -> Result<crate::gradcheck::GradCheckReport> {
    let sample = gradcheck_sample();
    let s = [sample.clone()];
    let model = FmitModel::<f64>::new(config.clone(), Vocab::words(&s), Vocab::objects(&s), seed)?;
    let enc = model.encode(&sample)?;
    let f = |g: &mut Graph<f64>, b: &mut Bindings<'_, f64>| {
        let mut table = SinusoidTable::new(model.config.d)?;
        let mut main = ChaCha8Rng::seed_from_u64(seed);
        let mut ebd = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let rngs = DropoutRngs {
            main: &mut main,
            ebd: &mut ebd,
        };
        Ok(model.loss(g, b, &mut table, &enc, lambda, Some(rngs))?.total)
    };
    crate::gradcheck::grad_check(f, &model.params, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleObject;
    use crate::labels::EntityType;
    use crate::lattice::ObjectKind;

    fn sample() -> Sample {
        let ty = EntityType::Per;
        Sample::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![Tag::O, Tag::B(ty), Tag::I(ty)],
            vec![
                SampleObject {
                    concept: "x".into(),
                    kind: ObjectKind::WholeImage,
                    span: None,
                },
                SampleObject {
                    concept: "y".into(),
                    kind: ObjectKind::NounPhrase,
                    span: Some([2, 3]),
                },
            ],
        )
        .unwrap()
    }

    fn model(config: ModelConfig) -> FmitModel<f64> {
        let s = [sample()];
        FmitModel::new(config, Vocab::words(&s), Vocab::objects(&s), 1).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            heads: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            layers: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            dropout: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            d: 6,
            heads: 3,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(ModelConfig {
            d: 3,
            heads: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        ModelConfig::full_scale().validate().unwrap();
        assert_eq!(ModelConfig::full_scale().head_dim(), 64);
    }

    #[test]
    fn init_conventions() {
        let m = model(ModelConfig::default());
        let p = &m.params;
        assert!(p.get("main.crf.transitions").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("main.layer0.head1.u").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("main.layer1.ln2.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        let k = 1.0 / 32f64.sqrt();
        let wq = p.get("main.layer0.head0.wq").unwrap();
        assert!(wq.data().iter().all(|v| v.abs() <= k));
        assert!(wq.data().iter().any(|&v| v != 0.0));
        assert_ne!(wq, p.get("main.layer0.head1.wq").unwrap());
        assert!(!p.contains("ebd.emb.word"));
        assert!(p.contains("ebd.crf.weight"));
        assert_eq!(p.get("ebd.crf.weight").unwrap().shape(), &[3, 32]);
    }

    #[test]
    fn main_tower_init_independent_of_ebd() {
        let a = model(ModelConfig::default());
        let b = model(ModelConfig {
            no_ebd: true,
            ..Default::default()
        });
        for (name, t) in b.params.iter() {
            assert_eq!(a.params.get(name).unwrap(), t, "{name}");
        }
        assert!(b.params.len() < a.params.len());
    }

    #[test]
    fn ablations_drop_parameters() {
        let m = model(ModelConfig {
            no_rel: true,
            no_transitions: true,
            ..Default::default()
        });
        assert!(m
            .params
            .names()
            .all(|n| !n.ends_with(".wr") && !n.ends_with(".wkr") && !n.ends_with(".v")));
        assert!(m.params.names().all(|n| !n.contains("transitions")));
        let m = model(ModelConfig {
            share_word_embeddings: false,
            ..Default::default()
        });
        assert!(m.params.contains("ebd.emb.word"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(ModelConfig::default());
        let ck = m.to_checkpoint(serde_json::json!({"epoch": 3})).unwrap();
        let back = FmitModel::from_checkpoint(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut params = m.params.clone();
        params.insert("extra", Tensor::zeros(&[1]));
        assert!(FmitModel::from_parts(m.config.clone(), m.words.clone(), m.objects.clone(), params).is_err());
    }

    #[test]
    fn loss_is_finite_and_decodes() {
        let m = model(ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ..Default::default()
        });
        let enc = m.encode(&sample()).unwrap();
        assert_eq!(enc.boundaries, vec![0, 1, 2]);
        let mut g = Graph::new();
        let mut b = Bindings::new(&m.params, true);
        let mut table = SinusoidTable::new(8).unwrap();
        let l = m.loss(&mut g, &mut b, &mut table, &enc, 0.25, None).unwrap();
        let (main, ebd, total) = (
            g.value(l.main).item(),
            g.value(l.ebd.unwrap()).item(),
            g.value(l.total).item(),
        );
        assert!(main > 0.0 && ebd > 0.0);
        assert!((total - (main + 0.25 * ebd)).abs() < 1e-12);
        assert_eq!(m.predict(&enc).unwrap().len(), 3);
    }

    #[test]
    fn no_objects_strips_visual_cells() {
        let m = model(ModelConfig {
            no_objects: true,
            ..Default::default()
        });
        assert_eq!(m.encode(&sample()).unwrap().lattice.num_objects(), 0);
        let m = model(ModelConfig::default());
        assert_eq!(m.encode(&sample()).unwrap().lattice.num_objects(), 2);
    }

    #[test]
    fn small_model_gradients_check() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            d_word: 4,
            d_object: 4,
            ..Default::default()
        };
        let report = check_gradients(&cfg, 3, 0.25, &Default::default()).unwrap();
        assert!(report.passed(), "{report}");
    }
}
