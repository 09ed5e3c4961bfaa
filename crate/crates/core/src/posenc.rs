//! Relative position encoding over head/tail spans.
//!
//! For cells `i, j` the four signed distances head-head, head-tail,
//! tail-head and tail-tail are each expanded into a `d`-dimensional
//! sinusoid, concatenated in that order and projected:
//! `R_ij = ReLU(W_r [P(hh) ; P(ht) ; P(th) ; P(tt)])` with `W_r` of shape `d×4d`.

use std::collections::HashMap;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::lattice::Cell;
use crate::tensor::{matmul, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DistanceQuad {
    pub hh: i64,
    pub ht: i64,
    pub th: i64,
    pub tt: i64,
}

impl DistanceQuad {
    pub fn between(ci: &Cell, cj: &Cell) -> Self {
        Self::from_positions((ci.head, ci.tail), (cj.head, cj.tail))
    }

    pub fn from_positions((hi, ti): (i64, i64), (hj, tj): (i64, i64)) -> Self {
        Self {
            hh: hi - hj,
            ht: hi - tj,
            th: ti - hj,
            tt: ti - tj,
        }
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.hh, self.ht, self.th, self.tt]
    }
}

pub fn distance_quad(ci: &Cell, cj: &Cell) -> DistanceQuad {
    DistanceQuad::between(ci, cj)
}

pub fn check_even(d: usize) -> Result<()> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "position encoding dimension must be even and positive, got {d}"
        )));
    }
    Ok(())
}

/// Component `2k` is `sin(pos / 10000^(2k/d))`, component `2k+1` the cosine.
pub fn sinusoid<T: Real>(pos: i64, d: usize) -> Result<Vec<T>> {
    check_even(d)?;
    let mut out = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
        out.push(T::of(angle.sin()));
        out.push(T::of(angle.cos()));
    }
    Ok(out)
}

/// Sinusoid vectors memoized by distance.
#[derive(Debug)]
pub struct SinusoidTable<T> {
    d: usize,
    cache: HashMap<i64, Vec<T>>,
}

impl<T: Real> SinusoidTable<T> {
    pub fn new(d: usize) -> Result<Self> {
        check_even(d)?;
        Ok(Self {
            d,
            cache: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&mut self, pos: i64) -> &[T] {
        let d = self.d;
        self.cache
            .entry(pos)
            .or_insert_with(|| sinusoid(pos, d).expect("dimension checked"))
    }

    /// The `(L·L)×4d` matrix of concatenated sinusoids for every ordered
    /// pair of positions; row `i·L + j` belongs to the pair `(i, j)`.
    pub fn pair_features(&mut self, positions: &[(i64, i64)]) -> Tensor<T> {
        let l = positions.len();
        let d = self.d;
        let mut data = Vec::with_capacity(l * l * 4 * d);
        for &pi in positions {
            for &pj in positions {
                for dist in DistanceQuad::from_positions(pi, pj).as_array() {
                    data.extend_from_slice(self.get(dist));
                }
            }
        }
        Tensor::new(vec![l * l, 4 * d], data).expect("sized above")
    }
}

pub fn positions(cells: &[Cell]) -> Vec<(i64, i64)> {
    cells.iter().map(|c| (c.head, c.tail)).collect()
}

/// `R` as an `L×L×d` array.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeEncoding<T> {
    pub values: Tensor<T>,
}

impl<T: Real> RelativeEncoding<T> {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn pair(&self, i: usize, j: usize) -> &[T] {
        let (l, d) = (self.len(), self.dim());
        &self.values.data()[(i * l + j) * d..(i * l + j + 1) * d]
    }
}

fn check_projection(wr: &[usize], d: usize) -> Result<()> {
    if wr != [d, 4 * d] {
        return Err(Error::Shape(format!(
            "relative projection must be [{d}, {}], got {wr:?}",
            4 * d
        )));
    }
    Ok(())
}

/// Computes `R` for a set of cells outside any graph.
pub fn relative_encoding<T: Real>(cells: &[Cell], wr: &Tensor<T>) -> Result<RelativeEncoding<T>> {
    let d = wr.shape().first().copied().unwrap_or(0);
    check_even(d)?;
    check_projection(wr.shape(), d)?;
    let l = cells.len();
    let feats = SinusoidTable::new(d)?.pair_features(&positions(cells));
    let r = matmul(&feats, false, wr, true)?.map(|v| v.max(T::zero()));
    Ok(RelativeEncoding {
        values: r.reshape(vec![l, l, d])?,
    })
}

/// Differentiable `R` with respect to `W_r`, as an `(L·L)×d` node.
pub fn relative_encoding_node<T: Real>(
    g: &mut Graph<T>,
    table: &mut SinusoidTable<T>,
    positions: &[(i64, i64)],
    wr: NodeId,
) -> Result<NodeId> {
    check_projection(g.shape(wr), table.dim())?;
    let feats = g.constant(table.pair_features(positions));
    let lin = g.matmul_t(feats, false, wr, true)?;
    Ok(g.relu(lin))
}

/// Distinct distance quads among all ordered cell pairs, with the quad
/// index of each pair `(i, j)` at `pair[i·L + j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub quads: Vec<DistanceQuad>,
    pub pair: Vec<usize>,
}

impl PairIndex {
    pub fn new(positions: &[(i64, i64)]) -> Self {
        let mut seen: HashMap<DistanceQuad, usize> = HashMap::new();
        let mut quads = Vec::new();
        let mut pair = Vec::with_capacity(positions.len() * positions.len());
        for &pi in positions {
            for &pj in positions {
                let q = DistanceQuad::from_positions(pi, pj);
                let id = *seen.entry(q).or_insert_with(|| {
                    quads.push(q);
                    quads.len() - 1
                });
                pair.push(id);
            }
        }
        Self { quads, pair }
    }
}

/// `R` for each distinct quad of `index`, as a `U×d` node.
///
/// Equal to the rows of [`relative_encoding_node`] up to summation order.
/// `W_r` is split into its four `d×d` blocks, each applied once per
/// distinct distance, and the four results are summed per quad.
pub fn relative_encoding_compact<T: Real>(
    g: &mut Graph<T>,
    table: &mut SinusoidTable<T>,
    index: &PairIndex,
    wr: NodeId,
) -> Result<NodeId> {
    let d = table.dim();
    check_projection(g.shape(wr), d)?;
    let mut dist_id: HashMap<i64, usize> = HashMap::new();
    let mut feats = Vec::new();
    for q in &index.quads {
        for v in q.as_array() {
            dist_id.entry(v).or_insert_with(|| {
                feats.extend_from_slice(table.get(v));
                feats.len() / d - 1
            });
        }
    }
    let n_dist = dist_id.len();
    let f = g.constant(Tensor::new(vec![n_dist, d], feats)?);
    // row (o·4 + k) of the reshaped projection is block k of output o
    let blocks = g.reshape(wr, vec![4 * d, d])?;
    let mut acc: Option<NodeId> = None;
    for k in 0..4 {
        let rows: Vec<usize> = (0..d).map(|o| o * 4 + k).collect();
        let wk = g.gather_rows(blocks, &rows)?;
        let per_dist = g.matmul_t(f, false, wk, true)?;
        let idx: Vec<usize> = index.quads.iter().map(|q| dist_id[&q.as_array()[k]]).collect();
        let part = g.gather_rows(per_dist, &idx)?;
        acc = Some(match acc {
            None => part,
            Some(a) => g.add(a, part)?,
        });
    }
    Ok(g.relu(acc.expect("four blocks")))
}
