//! Ranking covered examples and keeping the most trustworthy fraction.
//!
//! Scores follow a lower-is-better convention for both methods: the cut
//! statistic `Z_i` is negative when a node has fewer disagreeing neighbors
//! than an i.i.d. labeling would produce, and entropy is zero for a
//! one-hot soft label.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, PseudoLabeling, ABSTAIN};
use crate::error::{Error, Result};
use crate::graph::{edge_weight, knn_brute_force, knn_query, NeighborGraph};
use crate::label_models::class_marginals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Cut,
    Entropy,
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreMethod::Cut => f.write_str("cut"),
            ScoreMethod::Entropy => f.write_str("entropy"),
        }
    }
}

/// One score per covered example; `node_ids[i]` is the example index of
/// `values[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScores {
    pub node_ids: Vec<usize>,
    pub values: Vec<f64>,
    pub method: ScoreMethod,
}

impl NodeScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Node positions sorted by ascending score, ties to the lower position.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]).then(a.cmp(&b)));
        order
    }

    fn check(&self) -> Result<()> {
        if self.node_ids.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "{} node ids for {} scores",
                self.node_ids.len(),
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "score for example {} is not finite",
                self.node_ids[i]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSelection {
    pub method: ScoreMethod,
    pub beta: f64,
    pub node_ids: Vec<usize>,
    pub scores: Vec<f64>,
    /// Permutation of node positions, ascending by score.
    pub order: Vec<usize>,
    /// Selected example indices (original indexing), best first.
    pub selected: Vec<usize>,
}

impl ScoredSelection {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Number of examples kept at coverage `beta`: `floor(beta * n)`.
pub fn selection_size(beta: f64, n: usize) -> usize {
    (beta * n as f64).floor() as usize
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Parameter(format!(
            "beta must be in (0, 1], got {beta}"
        )));
    }
    Ok(())
}

/// Shannon entropy (nats) of each covered example's soft label.
pub fn entropy_scores(p: &PseudoLabeling) -> Result<NodeScores> {
    if p.soft.is_none() {
        return Err(Error::MethodUnavailable(
            "selector requires soft labels; the cut statistic works with hard labels only".into(),
        ));
    }
    let node_ids = p.covered();
    let values = node_ids
        .iter()
        .map(|&i| {
            -p.soft_row(i)
                .unwrap()
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| q * q.ln())
                .sum::<f64>()
        })
        .collect();
    Ok(NodeScores {
        node_ids,
        values,
        method: ScoreMethod::Entropy,
    })
}

/// Standardized cut-edge weight of one node.
///
/// `cut` is `sum w_ij I_ij`; `p_same` is the marginal probability of the
/// node's own label.
fn z_score(cut: f64, sum_w: f64, sum_w2: f64, p_same: f64) -> f64 {
    let mean = (1.0 - p_same) * sum_w;
    let var = p_same * (1.0 - p_same) * sum_w2;
    (cut - mean) / var.sqrt()
}

fn degenerate_marginal(p_same: f64) -> bool {
    !(p_same > 0.0 && p_same < 1.0)
}

/// Cut statistic `Z_i` for every node of `g`.
///
/// The graph must be built over exactly the covered examples of `p`.
pub fn cut_statistic_scores(g: &NeighborGraph, p: &PseudoLabeling) -> Result<NodeScores> {
    let covered = p.covered();
    if g.node_ids() != covered.as_slice() {
        return Err(Error::Dimension(format!(
            "graph has {} nodes but pseudolabels cover {} examples (or the index sets differ)",
            g.len(),
            covered.len()
        )));
    }
    let marginals = class_marginals(p)?;
    if marginals.iter().filter(|&&m| m > 0.0).count() < 2 {
        return Err(Error::Degenerate(
            "all covered pseudolabels share one class, so the cut statistic has zero variance; \
             use beta = 1.0 (no selection)"
                .into(),
        ));
    }
    let labels: Vec<i32> = covered.iter().map(|&i| p.hard[i]).collect();
    let values = (0..g.len())
        .map(|i| {
            let own = labels[i];
            let (mut cut, mut sum_w, mut sum_w2) = (0.0, 0.0, 0.0);
            for (&j, &w) in g.neighbors(i).iter().zip(g.weights(i)) {
                if labels[j] != own {
                    cut += w;
                }
                sum_w += w;
                sum_w2 += w * w;
            }
            z_score(cut, sum_w, sum_w2, marginals[own as usize])
        })
        .collect();
    Ok(NodeScores {
        node_ids: covered,
        values,
        method: ScoreMethod::Cut,
    })
}

/// A fixed labeled sample used to score points one at a time, so that each
/// point's score does not depend on the other points being scored.
#[derive(Debug, Clone)]
pub struct ReferenceSample {
    pub embeddings: EmbeddingMatrix,
    pub pseudo: PseudoLabeling,
}

impl ReferenceSample {
    pub fn new(embeddings: EmbeddingMatrix, pseudo: PseudoLabeling) -> Result<Self> {
        if embeddings.n() != pseudo.len() {
            return Err(Error::Dimension(format!(
                "reference has {} embeddings but {} pseudolabels",
                embeddings.n(),
                pseudo.len()
            )));
        }
        pseudo.validate()?;
        Ok(Self { embeddings, pseudo })
    }
}

/// Cut statistic of a single query inserted into the reference sample.
///
/// The query's neighbors are its `k` nearest covered reference points and
/// the label marginals are those of the reference sample.
pub fn cut_statistic_score_with_reference(
    reference: &ReferenceSample,
    query: &[f32],
    label: i32,
    k: usize,
) -> Result<f64> {
    let covered = reference.pseudo.covered();
    if k == 0 || k >= covered.len() {
        return Err(Error::Parameter(format!(
            "k = {k} must be in [1, {}) for this reference sample",
            covered.len()
        )));
    }
    if label == ABSTAIN || label < 0 || label as usize >= reference.pseudo.num_classes {
        return Err(Error::Parameter(format!(
            "query label {label} is not a class"
        )));
    }
    let marginals = class_marginals(&reference.pseudo)?;
    let p_same = marginals[label as usize];
    if degenerate_marginal(p_same) {
        return Err(Error::Degenerate(format!(
            "reference marginal of class {label} is {p_same}; the cut statistic has zero variance"
        )));
    }
    let nn = knn_query(&reference.embeddings, &covered, query, k)?;
    let (mut cut, mut sum_w, mut sum_w2) = (0.0, 0.0, 0.0);
    for (j, d2) in nn {
        let w = edge_weight(d2);
        if reference.pseudo.hard[covered[j]] != label {
            cut += w;
        }
        sum_w += w;
        sum_w2 += w * w;
    }
    Ok(z_score(cut, sum_w, sum_w2, p_same))
}

/// Score threshold at coverage `beta` on the reference sample itself: the
/// largest score among the `floor(beta * N)` best reference points, or
/// negative infinity when that count is zero.
pub fn reference_threshold(reference: &ReferenceSample, k: usize, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let covered = reference.pseudo.covered();
    let g = knn_brute_force(&reference.embeddings, &covered, k)?;
    let scores = cut_statistic_scores(&g, &reference.pseudo)?;
    let count = selection_size(beta, scores.len());
    if count == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let order = scores.order();
    Ok(scores.values[order[count - 1]])
}

/// Indices of covered queries whose reference-based score is at most the
/// reference threshold for `beta`. Each decision depends only on the query
/// itself and the reference sample.
pub fn select_with_reference(
    reference: &ReferenceSample,
    queries: &EmbeddingMatrix,
    pseudo: &PseudoLabeling,
    k: usize,
    beta: f64,
) -> Result<Vec<usize>> {
    if queries.n() != pseudo.len() {
        return Err(Error::Dimension(format!(
            "{} query embeddings but {} pseudolabels",
            queries.n(),
            pseudo.len()
        )));
    }
    let tau = reference_threshold(reference, k, beta)?;
    let mut keep = Vec::new();
    for i in pseudo.covered() {
        let z = cut_statistic_score_with_reference(reference, queries.row(i), pseudo.hard[i], k)?;
        if z <= tau {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Keeps the `floor(beta * N)` lowest-scoring examples.
pub fn select_top_beta(scores: &NodeScores, beta: f64) -> Result<ScoredSelection> {
    check_beta(beta)?;
    scores.check()?;
    let order = scores.order();
    let count = selection_size(beta, scores.len());
    let selected = order[..count].iter().map(|&i| scores.node_ids[i]).collect();
    Ok(ScoredSelection {
        method: scores.method,
        beta,
        node_ids: scores.node_ids.clone(),
        scores: scores.values.clone(),
        order,
        selected,
    })
}

/// Separate ranking per pseudolabel class; class `y` contributes its best
/// `floor(beta * prior[y] * N)` examples.
pub fn select_stratified(
    scores: &NodeScores,
    p: &PseudoLabeling,
    beta: f64,
    class_prior: &[f64],
) -> Result<ScoredSelection> {
    check_beta(beta)?;
    scores.check()?;
    let c = p.num_classes;
    if class_prior.len() != c {
        return Err(Error::Dimension(format!(
            "class prior has {} entries for {c} classes",
            class_prior.len()
        )));
    }
    if class_prior.iter().any(|&q| !(q >= 0.0))
        || (class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::Parameter(format!(
            "class prior {class_prior:?} is not a probability vector"
        )));
    }
    let n = scores.len();
    let order = scores.order();
    let mut taken = vec![0usize; c];
    let mut stratum_sizes = vec![0usize; c];
    for &i in &order {
        stratum_sizes[label_of(p, scores.node_ids[i])?] += 1;
    }
    let quotas: Vec<usize> = class_prior
        .iter()
        .map(|&q| (beta * q * n as f64).floor() as usize)
        .collect();
    for y in 0..c {
        if class_prior[y] > 0.0 && stratum_sizes[y] < quotas[y] {
            warn!(
                "class {y} has {} examples but a quota of {}; taking all of them",
                stratum_sizes[y], quotas[y]
            );
        }
    }
    let mut selected = Vec::new();
    for &i in &order {
        let node = scores.node_ids[i];
        let y = label_of(p, node)?;
        if taken[y] < quotas[y] {
            taken[y] += 1;
            selected.push(node);
        }
    }
    Ok(ScoredSelection {
        method: scores.method,
        beta,
        node_ids: scores.node_ids.clone(),
        scores: scores.values.clone(),
        order,
        selected,
    })
}

fn label_of(p: &PseudoLabeling, example: usize) -> Result<usize> {
    match p.hard.get(example) {
        Some(&h) if h != ABSTAIN => Ok(h as usize),
        _ => Err(Error::Dimension(format!(
            "scored example {example} has no pseudolabel"
        ))),
    }
}

/// Relabels the `floor(beta * N)` highest-scoring nodes with the most common
/// label among their neighbors. A tie for the most common label keeps the
/// original label. Returns hard labels only.
pub fn relabel_by_neighbors(
    g: &NeighborGraph,
    p: &PseudoLabeling,
    scores: &NodeScores,
    beta: f64,
) -> Result<PseudoLabeling> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    if scores.node_ids != g.node_ids() {
        return Err(Error::Dimension(
            "scores and graph cover different nodes".into(),
        ));
    }
    scores.check()?;
    let mut worst_first: Vec<usize> = (0..scores.len()).collect();
    worst_first.sort_by(|&a, &b| {
        scores.values[b]
            .total_cmp(&scores.values[a])
            .then(a.cmp(&b))
    });
    let count = selection_size(beta, scores.len());

    let mut hard = p.hard.clone();
    let mut votes = vec![0usize; p.num_classes];
    for &i in &worst_first[..count] {
        votes.iter_mut().for_each(|v| *v = 0);
        for &j in g.neighbors(i) {
            votes[label_of(p, g.node_ids()[j])?] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let mut winners = votes.iter().enumerate().filter(|(_, &v)| v == top);
        let (first, _) = winners.next().unwrap();
        if winners.next().is_none() {
            hard[g.node_ids()[i]] = first as i32;
        }
    }
    PseudoLabeling::hard_only(hard, p.num_classes)
}

/// Score table: `example_index,score,rank,selected_at_<beta>...`, one row per
/// scored example in example order. Rank 1 is the best score.
pub fn write_score_table<W: Write>(
    w: &mut W,
    scores: &NodeScores,
    selections: &[ScoredSelection],
) -> std::io::Result<()> {
    let order = scores.order();
    let mut rank = vec![0usize; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    let chosen: Vec<std::collections::HashSet<usize>> = selections
        .iter()
        .map(|s| s.selected.iter().copied().collect())
        .collect();
    write!(w, "example_index,score,rank")?;
    for s in selections {
        write!(w, ",selected_at_{}", s.beta)?;
    }
    writeln!(w)?;
    for ((&node, &score), &r) in scores.node_ids.iter().zip(&scores.values).zip(&rank) {
        write!(w, "{node},{score},{r}")?;
        for set in &chosen {
            write!(w, ",{}", u8::from(set.contains(&node)))?;
        }
        writeln!(w)?;
    }
    Ok(())
}
