//! Local score, long-range context attention and global voting.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{cosine_slices, Scalar, Tensor};

/// One (span, candidate) pair after scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub start: usize,
    pub end: usize,
    pub entity: String,
    pub prior: f64,
    pub psi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
}

impl ScoredPair {
    pub fn new(start: usize, end: usize, entity: impl Into<String>, prior: f64, psi: f64) -> Self {
        ScoredPair {
            start,
            end,
            entity: entity.into(),
            prior,
            psi,
            g: None,
            phi: None,
        }
    }

    /// The score decoding uses: the global score when present, else the
    /// local one.
    pub fn score(&self) -> f64 {
        self.phi.unwrap_or(self.psi)
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    /// Minimum local score for a pair to vote.
    pub gamma_prime: f64,
    /// Count an entity once per mention's voter set even when several other
    /// mentions vote for it.
    pub voter_dedup: bool,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            gamma_prime: 0.0,
            voter_dedup: false,
        }
    }
}

/// `FFNN2` over `[ln prior; <x_m, y>]`, plus the context feature when given.
/// `w` is a `[1 x 2]` or `[1 x 3]` weight matrix and `b` a `[1]` bias.
pub fn local_score<F: Scalar>(
    g: &mut Graph<F>,
    x_m: NodeId,
    prior: f64,
    y: NodeId,
    ctx_feature: Option<NodeId>,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    if !(prior > 0.0 && prior.is_finite()) {
        return Err(Error::InvalidArgument(format!("prior must be positive, got {prior}")));
    }
    let arity = g.value(w).len();
    let expected = if ctx_feature.is_some() { 3 } else { 2 };
    if arity != expected {
        return Err(Error::shape(
            "local_score",
            format!("FFNN2 has {arity} inputs, features have {expected}"),
        ));
    }
    let log_prior = g.scalar(F::of(prior.ln()))?;
    let sim = g.dot(x_m, y)?;
    let feats = match ctx_feature {
        Some(c) => g.concat(&[log_prior, sim, c])?,
        None => g.concat(&[log_prior, sim])?,
    };
    g.affine(w, feats, b)
}

/// Context words around `[start, end]`: up to `window / 2` positions on each
/// side, clipped to the document, excluding the span itself.
pub fn context_window(n_tokens: usize, start: usize, end: usize, window: usize) -> Vec<usize> {
    let half = window / 2;
    let lo = start.saturating_sub(half);
    let hi = (end + half).min(n_tokens.saturating_sub(1));
    (lo..start).chain(end + 1..=hi).collect()
}

/// Long-range context feature for every candidate of one mention.
///
/// Each context word `w` is scored by `max_e <y_e, A x_w>`; the `top_r`
/// best words are kept (ties to the earlier position), weighted by the
/// softmax of their scores into a context vector `c`, and each candidate
/// gets `<y_e, B c>`. `a_diag` and `b_diag` are the diagonals of `A` and `B`.
pub fn long_range_features<F: Scalar>(
    g: &mut Graph<F>,
    context: &[NodeId],
    candidates: &[NodeId],
    top_r: usize,
    a_diag: NodeId,
    b_diag: NodeId,
) -> Result<Vec<NodeId>> {
    if top_r == 0 {
        return Err(Error::InvalidArgument("top_r must be at least 1".into()));
    }
    if context.is_empty() {
        let zero = g.scalar(F::zero())?;
        return Ok(vec![zero; candidates.len()]);
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = Vec::with_capacity(context.len());
    for (pos, &xw) in context.iter().enumerate() {
        let ax = g.mul(a_diag, xw)?;
        let per_cand: Vec<NodeId> = candidates
            .iter()
            .map(|&y| g.dot(y, ax))
            .collect::<Result<_>>()?;
        let u = if per_cand.len() == 1 {
            per_cand[0]
        } else {
            let all = g.concat(&per_cand)?;
            g.max(all)?
        };
        scored.push((pos, u));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| {
        g.scalar_value(scored[j].1)
            .partial_cmp(&g.scalar_value(scored[i].1))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(scored[i].0.cmp(&scored[j].0))
    });
    order.truncate(top_r);
    order.sort_unstable();
    let kept_scores: Vec<NodeId> = order.iter().map(|&i| scored[i].1).collect();
    let kept_words: Vec<NodeId> = order.iter().map(|&i| context[scored[i].0]).collect();
    let logits = g.concat(&kept_scores)?;
    let beta = g.softmax(logits)?;
    let c = g.weighted_sum(beta, &kept_words)?;
    let bc = g.mul(b_diag, c)?;
    candidates.iter().map(|&y| g.dot(y, bc)).collect()
}

/// Indices of pairs allowed to vote: local score at least `gamma_prime`.
pub fn filter_voters(pairs: &[ScoredPair], gamma_prime: f64) -> Vec<usize> {
    (0..pairs.len()).filter(|&i| pairs[i].psi >= gamma_prime).collect()
}

/// For every distinct mention (span) of `pairs`, the voting entities of all
/// other mentions with their multiplicities. With `dedup` each entity is
/// counted once.
pub fn voter_sets(
    pairs: &[ScoredPair],
    voters: &[usize],
    dedup: bool,
) -> HashMap<(usize, usize), BTreeMap<String, usize>> {
    let mut total: BTreeMap<&str, usize> = BTreeMap::new();
    let mut by_span: HashMap<(usize, usize), BTreeMap<&str, usize>> = HashMap::new();
    for &i in voters {
        let p = &pairs[i];
        *total.entry(&p.entity).or_default() += 1;
        *by_span.entry(p.span()).or_default().entry(&p.entity).or_default() += 1;
    }
    let mut out = HashMap::new();
    for p in pairs {
        let key = p.span();
        if out.contains_key(&key) {
            continue;
        }
        let own = by_span.get(&key);
        let mut set = BTreeMap::new();
        for (&e, &n) in &total {
            let mine = own.and_then(|o| o.get(e)).copied().unwrap_or(0);
            let rest = n - mine;
            if rest > 0 {
                set.insert(e.to_string(), if dedup { 1 } else { rest });
            }
        }
        out.insert(key, set);
    }
    out
}

/// Sum of voter vectors for one mention, `None` when it has no voters.
pub fn voter_sum(set: &BTreeMap<String, usize>, lookup: impl Fn(&str) -> Vec<f64>, dim: usize) -> Option<Vec<f64>> {
    if set.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; dim];
    for (e, &n) in set {
        for (a, v) in acc.iter_mut().zip(lookup(e)) {
            *a += n as f64 * v;
        }
    }
    Some(acc)
}

/// Value-level global score `G` for every pair: cosine between the
/// candidate's vector and the summed voter vectors of the other mentions
/// (0 when there are none).
pub fn global_scores(
    pairs: &[ScoredPair],
    cfg: &GlobalConfig,
    lookup: impl Fn(&str) -> Vec<f64>,
    dim: usize,
) -> Vec<f64> {
    let voters = filter_voters(pairs, cfg.gamma_prime);
    let sets = voter_sets(pairs, &voters, cfg.voter_dedup);
    let sums: HashMap<(usize, usize), Option<Vec<f64>>> =
        sets.iter().map(|(k, s)| (*k, voter_sum(s, &lookup, dim))).collect();
    pairs
        .iter()
        .map(|p| match &sums[&p.span()] {
            None => 0.0,
            Some(y_g) => cosine_slices(&lookup(&p.entity), y_g),
        })
        .collect()
}

/// `FFNN3([psi; g])` with a `[1 x 2]` weight and `[1]` bias.
pub fn combine_global<F: Scalar>(g: &mut Graph<F>, psi: NodeId, global: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let feats = g.concat(&[psi, global])?;
    g.affine(w, feats, b)
}

/// Builds a constant `[1 x k]` weight row and `[1]` bias (test and tooling
/// helper for hand-set affine layers).
pub fn affine_constants<F: Scalar>(g: &mut Graph<F>, weights: &[f64], bias: f64) -> Result<(NodeId, NodeId)> {
    let w = g.constant(Tensor::from_f64(&[1, weights.len()], weights)?)?;
    let b = g.constant(Tensor::from_f64(&[1], &[bias])?)?;
    Ok((w, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_node(g: &mut Graph<f64>, v: &[f64]) -> NodeId {
        g.constant(Tensor::from_f64(&[v.len()], v).unwrap()).unwrap()
    }

    #[test]
    fn local_score_examples() {
        let mut g = Graph::<f64>::new();
        let xm = vec_node(&mut g, &[1.0, 2.0]);
        let y = vec_node(&mut g, &[3.0, 4.0]);

        let (w, b) = affine_constants(&mut g, &[0.0, 1.0], 0.0).unwrap();
        let s = local_score(&mut g, xm, 0.3, y, None, w, b).unwrap();
        assert_eq!(g.scalar_value(s), 11.0);

        let (w, b) = affine_constants(&mut g, &[1.0, 0.0], 0.0).unwrap();
        let s = local_score(&mut g, xm, 1.0, y, None, w, b).unwrap();
        assert_eq!(g.scalar_value(s), 0.0);

        let (w, b) = affine_constants(&mut g, &[0.5, 0.25], 0.1).unwrap();
        let s = local_score(&mut g, xm, 0.5, y, None, w, b).unwrap();
        assert!((g.scalar_value(s) - 2.50343).abs() < 1e-4);

        assert!(local_score(&mut g, xm, 0.0, y, None, w, b).is_err());
        let c = g.scalar(1.0).unwrap();
        assert!(local_score(&mut g, xm, 0.5, y, Some(c), w, b).is_err());
    }

    #[test]
    fn long_range_degenerate_window() {
        let mut g = Graph::<f64>::new();
        let ones = vec_node(&mut g, &[1.0, 1.0, 1.0]);
        let y = vec_node(&mut g, &[0.5, -1.0, 2.0]);
        let xw = vec_node(&mut g, &[1.0, 3.0, -0.5]);
        let f = long_range_features(&mut g, &[xw], &[y], 10, ones, ones).unwrap();
        assert!((g.scalar_value(f[0]) - (0.5 - 3.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn window_clips_and_excludes_span() {
        assert_eq!(context_window(10, 4, 5, 4), vec![2, 3, 6, 7]);
        assert_eq!(context_window(3, 0, 2, 200), Vec::<usize>::new());
        assert_eq!(context_window(5, 0, 0, 200), vec![1, 2, 3, 4]);
    }

    #[test]
    fn voter_filter_boundary() {
        let pairs: Vec<ScoredPair> = [-0.1, 0.0, 0.2]
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredPair::new(i, i, "E", 0.5, s))
            .collect();
        assert_eq!(filter_voters(&pairs, 0.0), vec![1, 2]);
        assert_eq!(filter_voters(&pairs, -1e300), vec![0, 1, 2]);
        assert!(filter_voters(&[], 0.0).is_empty());
    }

    fn lookup(e: &str) -> Vec<f64> {
        match e {
            "A" => vec![1.0, 0.0],
            "B" => vec![0.0, 1.0],
            "C" => vec![1.0, 0.0],
            _ => vec![0.0, 0.0],
        }
    }

    #[test]
    fn global_score_examples() {
        let pairs = vec![
            ScoredPair::new(0, 0, "A", 1.0, 1.0),
            ScoredPair::new(1, 1, "B", 1.0, 1.0),
            ScoredPair::new(2, 2, "C", 1.0, -1.0),
        ];
        let g = global_scores(&pairs, &GlobalConfig::default(), lookup, 2);
        assert!((g[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);

        let alone = vec![ScoredPair::new(0, 0, "A", 1.0, 1.0), ScoredPair::new(0, 0, "B", 1.0, 1.0)];
        assert_eq!(global_scores(&alone, &GlobalConfig::default(), lookup, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn dedup_changes_multiplicity() {
        let pairs = vec![
            ScoredPair::new(0, 0, "A", 1.0, 1.0),
            ScoredPair::new(1, 1, "A", 1.0, 1.0),
            ScoredPair::new(2, 2, "B", 1.0, 1.0),
            ScoredPair::new(3, 3, "C", 1.0, -1.0),
        ];
        let voters = filter_voters(&pairs, 0.0);
        let plain = voter_sets(&pairs, &voters, false);
        assert_eq!(plain[&(3, 3)]["A"], 2);
        let dedup = voter_sets(&pairs, &voters, true);
        assert_eq!(dedup[&(3, 3)]["A"], 1);
        assert!(!plain[&(0, 0)].contains_key("C"));
        assert_eq!(plain[&(0, 0)]["A"], 1);
    }

    #[test]
    fn combine_examples() {
        let mut g = Graph::<f64>::new();
        let psi = g.scalar(0.4).unwrap();
        let gl = g.scalar(0.5).unwrap();
        for (w, bias, expect) in [([1.0, 0.0], 0.0, 0.4), ([0.0, 1.0], 0.0, 0.5), ([0.7, 0.3], -0.05, 0.38)] {
            let (wn, bn) = affine_constants(&mut g, &w, bias).unwrap();
            let phi = combine_global(&mut g, psi, gl, wn, bn).unwrap();
            assert!((g.scalar_value(phi) - expect).abs() < 1e-6);
        }
    }
}
