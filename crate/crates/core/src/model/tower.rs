//! Graph builders for one tower: modality projection, relative multi-head
//! attention and post-norm Transformer layers.

use rand_chacha::ChaCha8Rng;

use super::{names, ModelConfig, TowerKind};
use crate::autograd::{Graph, NodeId};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::lattice::{Cell, Modality};
use crate::params::Bindings;
use crate::posenc::{positions, relative_encoding_compact, PairIndex, SinusoidTable};
use crate::tensor::Real;

/// Relative encodings for one lattice: `R` per distinct quad plus the quad
/// index of every ordered cell pair.
pub struct RelativeContext {
    pub r: NodeId,
    pub pair: Vec<usize>,
}

/// A padding cell: the `[PAD]` word at position 0.
pub fn pad_cell() -> Cell {
    Cell {
        content: PAD,
        modality: Modality::Special,
        head: 0,
        tail: 0,
    }
}

/// Row-broadcast of a key mask into a full `L×L` softmax mask.
pub fn key_mask_matrix(keys: &[bool]) -> Vec<bool> {
    let l = keys.len();
    let mut out = Vec::with_capacity(l * l);
    for _ in 0..l {
        out.extend_from_slice(keys);
    }
    out
}

/// Projects text and visual cells into the shared `d`-dimensional space:
/// `W_0 ReLU(W_1 x + b_1) + b_0` for word rows and `W_0 ReLU(W_2 v + b_2) + b_0`
/// for object rows. Cells keep their order.
pub fn project_modalities<T: Real>(
    g: &mut Graph<T>,
    b: &mut Bindings<T>,
    prefix: &str,
    word_table: &str,
    cells: &[Cell],
) -> Result<NodeId> {
    let text: Vec<usize> = (0..cells.len())
        .filter(|&i| cells[i].modality != Modality::Visual)
        .collect();
    let visual: Vec<usize> = (0..cells.len())
        .filter(|&i| cells[i].modality == Modality::Visual)
        .collect();
    let w0 = b.node(g, &format!("{prefix}.proj.w0"))?;
    let b0 = b.node(g, &format!("{prefix}.proj.b0"))?;

    let branch = |g: &mut Graph<T>, b: &mut Bindings<T>, table: &str, w: &str, bias: &str, idx: &[usize]| {
        let ids: Vec<usize> = idx.iter().map(|&i| cells[i].content).collect();
        let tab = b.node(g, table)?;
        let x = g.gather_rows(tab, &ids)?;
        let w = b.node(g, &format!("{prefix}.proj.{w}"))?;
        let bias = b.node(g, &format!("{prefix}.proj.{bias}"))?;
        let h = g.matmul_t(x, false, w, true)?;
        let h = g.add_row(h, bias)?;
        let h = g.relu(h);
        let o = g.matmul_t(h, false, w0, true)?;
        g.add_row(o, b0)
    };

    let xc = branch(g, b, word_table, "w1", "b1", &text)?;
    if visual.is_empty() {
        return Ok(xc);
    }
    let vc = branch(g, b, names::OBJECT_TABLE, "w2", "b2", &visual)?;
    // reassemble in lattice order from [text rows; visual rows]
    let stacked = g.concat(&[xc, vc], 0)?;
    let mut order = vec![0usize; cells.len()];
    for (r, &i) in text.iter().enumerate() {
        order[i] = r;
    }
    for (r, &i) in visual.iter().enumerate() {
        order[i] = text.len() + r;
    }
    if order.iter().enumerate().all(|(i, &r)| i == r) {
        return Ok(stacked);
    }
    g.gather_rows(stacked, &order)
}

/// Builds `R` for `cells` from the tower's `W_r`.
pub fn relative_context<T: Real>(
    g: &mut Graph<T>,
    b: &mut Bindings<T>,
    prefix: &str,
    table: &mut SinusoidTable<T>,
    cells: &[Cell],
) -> Result<RelativeContext> {
    let index = PairIndex::new(&positions(cells));
    let wr = b.node(g, &format!("{prefix}.wr"))?;
    let r = relative_encoding_compact(g, table, &index, wr)?;
    Ok(RelativeContext { r, pair: index.pair })
}

/// One head's attention. Returns `(output L×d_head, probabilities L×L)`.
///
/// Scores are `(Q + u) K^T + (Q + v) · K_R` row-pairwise, scaled by
/// `1/√d_head`; without a relative context only the first term remains.
pub fn attention_head<T: Real>(
    g: &mut Graph<T>,
    b: &mut Bindings<T>,
    head: &str,
    e: NodeId,
    rel: Option<&RelativeContext>,
    mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId)> {
    let p = |n: &str| format!("{head}.{n}");
    let wq = b.node(g, &p("wq"))?;
    let wke = b.node(g, &p("wke"))?;
    let wv = b.node(g, &p("wv"))?;
    let u = b.node(g, &p("u"))?;
    let q = g.matmul(e, wq)?;
    let k = g.matmul(e, wke)?;
    let v = g.matmul(e, wv)?;
    let qu = g.add_row(q, u)?;
    let mut scores = g.matmul_t(qu, false, k, true)?;
    if let Some(rel) = rel {
        let l = g.shape(e)[0];
        if rel.pair.len() != l * l {
            return Err(Error::Shape(format!(
                "relative encoding covers {} pairs but the input has {l} cells",
                rel.pair.len()
            )));
        }
        let wkr = b.node(g, &p("wkr"))?;
        let vb = b.node(g, &p("v"))?;
        let kr_unique = g.matmul(rel.r, wkr)?;
        let kr = g.gather_rows(kr_unique, &rel.pair)?;
        let qv = g.add_row(q, vb)?;
        let pos = g.pair_dot(qv, kr)?;
        scores = g.add(scores, pos)?;
    }
    let dh = g.shape(wq)[1];
    let scaled = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let probs = g.masked_softmax(scaled, mask)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// All heads of one layer, concatenated and mapped by `W_t`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    b: &mut Bindings<T>,
    layer: &str,
    heads: usize,
    e: NodeId,
    rel: Option<&RelativeContext>,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let outs = (0..heads)
        .map(|h| attention_head(g, b, &format!("{layer}.head{h}"), e, rel, mask).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let wt = b.node(g, &format!("{layer}.wt"))?;
    g.matmul_t(cat, false, wt, true)
}

fn maybe_dropout<T: Real>(g: &mut Graph<T>, x: NodeId, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    match rng {
        Some(rng) if p > 0.0 => g.dropout(x, p, rng),
        _ => Ok(x),
    }
}

/// `y = LN(x + Drop(MHA(x)))`, `out = LN(y + Drop(FFN(y)))`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer<T: Real>(
    g: &mut Graph<T>,
    b: &mut Bindings<T>,
    layer: &str,
    config: &ModelConfig,
    x: NodeId,
    rel: Option<&RelativeContext>,
    mask: Option<&[bool]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let p = |n: &str| format!("{layer}.{n}");
    let att = multi_head_attention(g, b, layer, config.heads, x, rel, mask)?;
    let att = maybe_dropout(g, att, config.dropout, rng.as_deref_mut())?;
    let res = g.add(x, att)?;
    let (g1, b1) = (b.node(g, &p("ln1.gamma"))?, b.node(g, &p("ln1.beta"))?);
    let y = g.layer_norm(res, g1, b1, config.ln_eps)?;

    let wa = b.node(g, &p("ffn.wa"))?;
    let ba = b.node(g, &p("ffn.ba"))?;
    let wb = b.node(g, &p("ffn.wb"))?;
    let bb = b.node(g, &p("ffn.bb"))?;
    let h = g.matmul_t(y, false, wa, true)?;
    let h = g.add_row(h, ba)?;
    let h = g.relu(h);
    let f = g.matmul_t(h, false, wb, true)?;
    let f = g.add_row(f, bb)?;
    let f = maybe_dropout(g, f, config.dropout, rng)?;
    let res = g.add(y, f)?;
    let (g2, b2) = (b.node(g, &p("ln2.gamma"))?, b.node(g, &p("ln2.beta"))?);
    g.layer_norm(res, g2, b2, config.ln_eps)
}

/// Runs a tower over `cells` and returns the final `L×d` cell matrix.
///
/// `key_mask` marks real cells when `cells` carries padding. `rng` enables
/// dropout; `None` is evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn tower_cells<T: Real>(
    g: &mut Graph<T>,
    b: &mut Bindings<T>,
    config: &ModelConfig,
    kind: TowerKind,
    table: &mut SinusoidTable<T>,
    cells: &[Cell],
    key_mask: Option<&[bool]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let prefix = kind.prefix();
    if let Some(m) = key_mask {
        if m.len() != cells.len() {
            return Err(Error::Shape(format!(
                "key mask of {} for {} cells",
                m.len(),
                cells.len()
            )));
        }
    }
    if kind == TowerKind::TextOnly && cells.iter().any(|c| c.modality == Modality::Visual) {
        return Err(Error::Lattice("text-only tower given visual cells".into()));
    }
    let mut e = project_modalities(g, b, prefix, config.word_table(kind), cells)?;
    let rel = if config.no_rel {
        None
    } else {
        Some(relative_context(g, b, prefix, table, cells)?)
    };
    let mask = key_mask.map(key_mask_matrix);
    for i in 0..config.layers {
        e = transformer_layer(
            g,
            b,
            &format!("{prefix}.layer{i}"),
            config,
            e,
            rel.as_ref(),
            mask.as_deref(),
            rng.as_deref_mut(),
        )?;
    }
    Ok(e)
}
