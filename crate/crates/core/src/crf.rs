//! Linear-chain CRF: sequence scores, log-partition by the forward
//! algorithm, marginals, Viterbi decoding and an exhaustive oracle.
//!
//! A sequence `y` over `n` positions and `K` labels scores
//! `Σ_t E[t, y_t] + Σ_{t>0} T[y_{t-1}, y_t] + start[y_0] + stop[y_{n-1}]`,
//! where `E = H W^T + b` are emissions. Everything runs in log space.

#![allow(clippy::needless_range_loop)]

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, matmul, Real, Tensor};

/// Borrowed emission and pairwise scores for one sentence.
pub struct Potentials<'a, T> {
    em: &'a [T],
    n: usize,
    k: usize,
    pair: Option<(&'a [T], &'a [T], &'a [T])>,
}

/// Posterior marginals; `pairwise` is summed over positions.
pub struct Marginals<T> {
    pub unary: Tensor<T>,
    pub pairwise: Tensor<T>,
    pub start: Tensor<T>,
    pub stop: Tensor<T>,
}

/// Exact reference values from enumerating all `K^n` sequences.
#[derive(Clone, Debug)]
pub struct Enumeration<T> {
    pub log_partition: T,
    pub best: Vec<usize>,
    pub best_score: T,
}

/// Largest `K^n` the exhaustive oracle accepts.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

impl<'a, T: Real> Potentials<'a, T> {
    pub fn new(
        emissions: &'a Tensor<T>,
        pairwise: Option<(&'a Tensor<T>, &'a Tensor<T>, &'a Tensor<T>)>,
    ) -> Result<Self> {
        let (n, k) = emissions.dims2()?;
        if n == 0 || k == 0 {
            return Err(Error::Shape(format!(
                "crf: emissions must be non-empty, got {:?}",
                emissions.shape()
            )));
        }
        let pair = match pairwise {
            None => None,
            Some((t, s, e)) => {
                if t.shape() != [k, k] || s.shape() != [k] || e.shape() != [k] {
                    return Err(Error::Shape(format!(
                        "crf: K={k} but transitions {:?}, start {:?}, stop {:?}",
                        t.shape(),
                        s.shape(),
                        e.shape()
                    )));
                }
                Some((t.data(), s.data(), e.data()))
            }
        };
        Ok(Self {
            em: emissions.data(),
            n,
            k,
            pair,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_labels(&self) -> usize {
        self.k
    }

    #[inline]
    fn emit(&self, t: usize, y: usize) -> T {
        self.em[t * self.k + y]
    }

    #[inline]
    fn trans(&self, a: usize, b: usize) -> T {
        self.pair.map_or(T::zero(), |(t, _, _)| t[a * self.k + b])
    }

    #[inline]
    fn start(&self, y: usize) -> T {
        self.pair.map_or(T::zero(), |(_, s, _)| s[y])
    }

    #[inline]
    fn stop(&self, y: usize) -> T {
        self.pair.map_or(T::zero(), |(_, _, e)| e[y])
    }

    pub fn sequence_score(&self, labels: &[usize]) -> Result<T> {
        if labels.len() != self.n {
            return Err(Error::Labels(format!(
                "{} labels for {} positions",
                labels.len(),
                self.n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.k) {
            return Err(Error::Labels(format!("label {bad} out of range 0..{}", self.k)));
        }
        let mut s = self.start(labels[0]) + self.stop(labels[self.n - 1]);
        for (t, &y) in labels.iter().enumerate() {
            s += self.emit(t, y);
            if t > 0 {
                s += self.trans(labels[t - 1], y);
            }
        }
        Ok(s)
    }

    /// Forward log-messages `alpha[t][k]`, flattened `n×K`.
    fn alphas(&self) -> Vec<T> {
        let (n, k) = (self.n, self.k);
        let mut alpha = vec![T::zero(); n * k];
        for y in 0..k {
            alpha[y] = self.start(y) + self.emit(0, y);
        }
        let mut buf = vec![T::zero(); k];
        for t in 1..n {
            for y in 0..k {
                for (p, b) in buf.iter_mut().enumerate() {
                    *b = alpha[(t - 1) * k + p] + self.trans(p, y);
                }
                alpha[t * k + y] = log_sum_exp(&buf) + self.emit(t, y);
            }
        }
        alpha
    }

    /// Backward log-messages `beta[t][k]` (stop scores folded in at `n-1`).
    fn betas(&self) -> Vec<T> {
        let (n, k) = (self.n, self.k);
        let mut beta = vec![T::zero(); n * k];
        for y in 0..k {
            beta[(n - 1) * k + y] = self.stop(y);
        }
        let mut buf = vec![T::zero(); k];
        for t in (0..n - 1).rev() {
            for y in 0..k {
                for (nx, b) in buf.iter_mut().enumerate() {
                    *b = self.trans(y, nx) + self.emit(t + 1, nx) + beta[(t + 1) * k + nx];
                }
                beta[t * k + y] = log_sum_exp(&buf);
            }
        }
        beta
    }

    pub fn log_partition(&self) -> T {
        let alpha = self.alphas();
        let k = self.k;
        let last: Vec<T> = (0..k).map(|y| alpha[(self.n - 1) * k + y] + self.stop(y)).collect();
        log_sum_exp(&last)
    }

    pub fn marginals(&self) -> Marginals<T> {
        let (n, k) = (self.n, self.k);
        let alpha = self.alphas();
        let beta = self.betas();
        let last: Vec<T> = (0..k).map(|y| alpha[(n - 1) * k + y] + self.stop(y)).collect();
        let log_z = log_sum_exp(&last);
        let unary: Vec<T> = alpha.iter().zip(&beta).map(|(&a, &b)| (a + b - log_z).exp()).collect();
        let mut pairwise = vec![T::zero(); k * k];
        for t in 1..n {
            for p in 0..k {
                let a = alpha[(t - 1) * k + p];
                for y in 0..k {
                    let v = a + self.trans(p, y) + self.emit(t, y) + beta[t * k + y] - log_z;
                    pairwise[p * k + y] += v.exp();
                }
            }
        }
        let start = unary[..k].to_vec();
        let stop = unary[(n - 1) * k..].to_vec();
        Marginals {
            unary: Tensor::new(vec![n, k], unary).expect("n×K"),
            pairwise: Tensor::new(vec![k, k], pairwise).expect("K×K"),
            start: Tensor::vector(start),
            stop: Tensor::vector(stop),
        }
    }

    /// Highest-scoring sequence and its score. Ties resolve to the lowest
    /// label index, both for the final label and at each backpointer.
    pub fn viterbi(&self) -> (Vec<usize>, T) {
        let (n, k) = (self.n, self.k);
        let mut delta: Vec<T> = (0..k).map(|y| self.start(y) + self.emit(0, y)).collect();
        let mut back = vec![0usize; n * k];
        let mut next = vec![T::zero(); k];
        for t in 1..n {
            for y in 0..k {
                let mut best = 0;
                let mut best_v = delta[0] + self.trans(0, y);
                for p in 1..k {
                    let v = delta[p] + self.trans(p, y);
                    if v > best_v {
                        best = p;
                        best_v = v;
                    }
                }
                back[t * k + y] = best;
                next[y] = best_v + self.emit(t, y);
            }
            std::mem::swap(&mut delta, &mut next);
        }
        let mut best = 0;
        let mut best_v = delta[0] + self.stop(0);
        for y in 1..k {
            let v = delta[y] + self.stop(y);
            if v > best_v {
                best = y;
                best_v = v;
            }
        }
        let mut path = vec![0; n];
        path[n - 1] = best;
        for t in (1..n).rev() {
            path[t - 1] = back[t * k + path[t]];
        }
        (path, best_v)
    }

    /// Exhaustive enumeration; rejects instances with more than
    /// [`ENUMERATION_LIMIT`] sequences. The best sequence is the
    /// lexicographically first maximizer.
    pub fn enumerate(&self) -> Result<Enumeration<T>> {
        let total = (self.k as u128).checked_pow(self.n as u32).unwrap_or(u128::MAX);
        if total > ENUMERATION_LIMIT {
            return Err(Error::TooLarge(total));
        }
        let mut labels = vec![0usize; self.n];
        let mut scores = Vec::with_capacity(total as usize);
        let mut best = labels.clone();
        let mut best_score = T::neg_infinity();
        loop {
            let s = self.sequence_score(&labels)?;
            if s > best_score {
                best_score = s;
                best.clone_from(&labels);
            }
            scores.push(s);
            // odometer increment, last position fastest
            let mut pos = self.n;
            loop {
                if pos == 0 {
                    return Ok(Enumeration {
                        log_partition: log_sum_exp(&scores),
                        best,
                        best_score,
                    });
                }
                pos -= 1;
                labels[pos] += 1;
                if labels[pos] < self.k {
                    break;
                }
                labels[pos] = 0;
            }
        }
    }
}

/// Learnable CRF parameters: emission projection plus optional pairwise scores.
#[derive(Clone, Debug)]
pub struct CrfParams<T> {
    /// `K×d`
    pub weight: Tensor<T>,
    /// `K`
    pub bias: Tensor<T>,
    /// `(transitions K×K, start K, stop K)`; `None` reproduces the
    /// emission-only scoring function.
    pub pairwise: Option<(Tensor<T>, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> CrfParams<T> {
    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    /// `H W^T + b` for hidden states `H` (`n×d`).
    pub fn emissions(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut em = matmul(hidden, false, &self.weight, true)?;
        let k = self.num_labels();
        if self.weight.shape()[0] != k {
            return Err(Error::Shape(format!(
                "crf weight {:?} vs bias {:?}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        let b = self.bias.data();
        for row in em.data_mut().chunks_mut(k) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(em)
    }

    fn with_potentials<R>(&self, hidden: &Tensor<T>, f: impl FnOnce(&Potentials<'_, T>) -> R) -> Result<R> {
        let em = self.emissions(hidden)?;
        let pair = self.pairwise.as_ref().map(|(t, s, e)| (t, s, e));
        let pot = Potentials::new(&em, pair)?;
        Ok(f(&pot))
    }

    pub fn sequence_score(&self, hidden: &Tensor<T>, labels: &[usize]) -> Result<T> {
        self.with_potentials(hidden, |p| p.sequence_score(labels))?
    }

    pub fn log_partition(&self, hidden: &Tensor<T>) -> Result<T> {
        self.with_potentials(hidden, |p| p.log_partition())
    }

    pub fn nll(&self, hidden: &Tensor<T>, labels: &[usize]) -> Result<T> {
        self.with_potentials(hidden, |p| Ok(p.log_partition() - p.sequence_score(labels)?))?
    }

    pub fn viterbi(&self, hidden: &Tensor<T>) -> Result<(Vec<usize>, T)> {
        self.with_potentials(hidden, |p| p.viterbi())
    }

    pub fn brute_force_oracle(&self, hidden: &Tensor<T>) -> Result<Enumeration<T>> {
        self.with_potentials(hidden, |p| p.enumerate())?
    }
}

/// Graph nodes for a CRF head bound into a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct CrfNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub pairwise: Option<(NodeId, NodeId, NodeId)>,
}

impl CrfNodes {
    pub fn emissions<T: Real>(&self, g: &mut Graph<T>, hidden: NodeId) -> Result<NodeId> {
        let lin = g.matmul_t(hidden, false, self.weight, true)?;
        g.add_row(lin, self.bias)
    }

    /// Differentiable negative log-likelihood of `labels`.
    pub fn nll<T: Real>(&self, g: &mut Graph<T>, hidden: NodeId, labels: &[usize]) -> Result<NodeId> {
        let em = self.emissions(g, hidden)?;
        let log_z = g.crf_log_partition(em, self.pairwise)?;
        let score = g.crf_score(em, self.pairwise, labels)?;
        g.sub(log_z, score)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_params(rng: &mut ChaCha8Rng, k: usize, d: usize, pairwise: bool) -> CrfParams<f64> {
        let mut r = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
        };
        let weight = r(&[k, d]);
        let bias = r(&[k]);
        let pairwise = pairwise.then(|| (r(&[k, k]), r(&[k]), r(&[k])));
        CrfParams { weight, bias, pairwise }
    }

    fn zero_params(k: usize, d: usize) -> CrfParams<f64> {
        CrfParams {
            weight: Tensor::zeros(&[k, d]),
            bias: Tensor::zeros(&[k]),
            pairwise: Some((Tensor::zeros(&[k, k]), Tensor::zeros(&[k]), Tensor::zeros(&[k]))),
        }
    }

    #[test]
    fn zero_params_score_zero_and_logz_counts_sequences() {
        let p = zero_params(2, 3);
        let h = Tensor::ones(&[2, 3]);
        assert_eq!(p.sequence_score(&h, &[0, 1]).unwrap(), 0.0);
        assert!((p.log_partition(&h).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = zero_params(5, 3);
        let h = Tensor::ones(&[3, 3]);
        assert!((p.nll(&h, &[4, 0, 2]).unwrap() - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_folds_start_and_stop() {
        let em = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let tr = Tensor::zeros(&[2, 2]);
        let st = Tensor::vector(vec![0.1, 0.5]);
        let sp = Tensor::vector(vec![-0.2, 0.3]);
        let pot = Potentials::new(&em, Some((&tr, &st, &sp))).unwrap();
        let a: f64 = 0.3 + 0.1 - 0.2;
        let b: f64 = -0.7 + 0.5 + 0.3;
        assert!((pot.sequence_score(&[1]).unwrap() - b).abs() < 1e-15);
        let lse = (a.exp() + b.exp()).ln();
        assert!((pot.log_partition() - lse).abs() < 1e-12);
        let (path, score) = pot.viterbi();
        assert_eq!(path, vec![0]);
        assert!((score - a).abs() < 1e-15);
    }

    #[test]
    fn straight_line_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 3, 2, true);
        let h = Tensor::new(vec![4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = [2, 0, 0, 1];
        let (w, b) = (&p.weight, &p.bias);
        let (tr, st, sp) = p.pairwise.as_ref().unwrap();
        let em = |t: usize, k: usize| w.at(k, 0) * h.at(t, 0) + w.at(k, 1) * h.at(t, 1) + b.data()[k];
        let hand = em(0, 2)
            + em(1, 0)
            + em(2, 0)
            + em(3, 1)
            + tr.at(2, 0)
            + tr.at(0, 0)
            + tr.at(0, 1)
            + st.data()[2]
            + sp.data()[1];
        assert!((p.sequence_score(&h, &y).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let p = zero_params(3, 2);
        let h = Tensor::zeros(&[2, 2]);
        assert!(matches!(p.sequence_score(&h, &[0, 3]), Err(Error::Labels(_))));
        assert!(matches!(p.sequence_score(&h, &[0]), Err(Error::Labels(_))));
    }

    #[test]
    fn strong_emissions_decode_to_label_zero() {
        let em = Tensor::new(vec![4, 2], vec![5.0, -5.0, 5.0, -5.0, 5.0, -5.0, 5.0, -5.0]).unwrap();
        let pot = Potentials::new(&em, None).unwrap();
        assert_eq!(pot.viterbi().0, vec![0; 4]);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let em = Tensor::<f64>::zeros(&[9, 5]);
        let pot = Potentials::new(&em, None).unwrap();
        assert!(matches!(pot.enumerate(), Err(Error::TooLarge(_))));
    }

    #[test]
    fn forward_and_viterbi_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..200 {
            let n = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=5);
            let p = random_params(&mut rng, k, 3, case % 4 != 0);
            let h = Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let oracle = p.brute_force_oracle(&h).unwrap();
            assert!(oracle.log_partition >= oracle.best_score);
            let lz = p.log_partition(&h).unwrap();
            assert!((lz - oracle.log_partition).abs() <= 1e-8, "case {case}");
            let (path, score) = p.viterbi(&h).unwrap();
            assert!((score - oracle.best_score).abs() <= 1e-9);
            assert!((p.sequence_score(&h, &path).unwrap() - oracle.best_score).abs() <= 1e-9);
        }
    }

    #[test]
    fn marginals_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 4, 2, true);
        let h = Tensor::new(vec![5, 2], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let em = p.emissions(&h).unwrap();
        let (t, s, e) = p.pairwise.as_ref().unwrap();
        let m = Potentials::new(&em, Some((t, s, e))).unwrap().marginals();
        for r in 0..5 {
            assert!((m.unary.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((m.pairwise.sum() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn graph_nll_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 3, 4, true);
        let h = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let (t, s, e) = p.pairwise.clone().unwrap();
        let nodes = CrfNodes {
            weight: g.param(p.weight.clone()),
            bias: g.param(p.bias.clone()),
            pairwise: Some((g.param(t), g.param(s), g.param(e))),
        };
        let hn = g.constant(h.clone());
        let loss = nodes.nll(&mut g, hn, &[1, 2, 0]).unwrap();
        let direct = p.nll(&h, &[1, 2, 0]).unwrap();
        assert!((g.value(loss).item() - direct).abs() < 1e-12);
        assert!(direct >= 0.0);
    }
}
