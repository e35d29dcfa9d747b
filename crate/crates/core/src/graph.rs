//! Exact K-nearest-neighbor graphs over covered examples.
//!
//! Distances are accumulated in `f64` in coordinate order, so every route
//! through this module (the blocked kernel, single queries, the scalar
//! [`squared_distance`]) produces bit-identical values for the same pair.
//! Neighbor lists are sorted by `(distance, node index)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{create, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Candidates processed together; each lane keeps its own accumulator.
const LANES: usize = 8;
/// Queries sharing one pass over the candidate panels.
const QUERY_BLOCK: usize = 32;

/// Squared Euclidean distance, summed sequentially in `f64`.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let diff = x as f64 - y as f64;
        acc += diff * diff;
    }
    acc
}

/// Edge weight `1 / (1 + distance)`.
pub fn edge_weight(squared: f64) -> f64 {
    1.0 / (1.0 + squared.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    node_ids: Vec<usize>,
    k: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    sq_distances: Vec<f64>,
    weights: Vec<f64>,
    symmetric: bool,
}

impl NeighborGraph {
    /// Number of nodes (covered examples).
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Original example index of every node.
    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    /// Node indices adjacent to node `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn squared_distances(&self, i: usize) -> &[f64] {
        &self.sq_distances[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Directed edge list `(src, dst, weight)` in original example indices.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .zip(self.weights(i))
                .map(move |(&j, &w)| (self.node_ids[i], self.node_ids[j], w))
        })
    }

    /// Debug dump: `src,dst,weight` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "src,dst,weight").map_err(io)?;
        for (s, d, wt) in self.edges() {
            writeln!(w, "{s},{d},{wt}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    fn from_lists(
        node_ids: Vec<usize>,
        k: usize,
        lists: Vec<Vec<(f64, usize)>>,
        symmetric: bool,
    ) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let total: usize = lists.iter().map(Vec::len).sum();
        let mut neighbors = Vec::with_capacity(total);
        let mut sq_distances = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for list in lists {
            for (d2, j) in list {
                neighbors.push(j);
                sq_distances.push(d2);
                weights.push(edge_weight(d2));
            }
            offsets.push(neighbors.len());
        }
        Self {
            node_ids,
            k,
            offsets,
            neighbors,
            sq_distances,
            weights,
            symmetric,
        }
    }
}

/// Bounded list of the `k` smallest `(distance, index)` pairs, kept sorted.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, j: usize) {
        if self.items.len() == self.k {
            let (wd, wj) = self.items[self.k - 1];
            if d2 > wd || (d2 == wd && j > wj) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| d < d2 || (d == d2 && i < j));
        self.items.insert(pos, (d2, j));
        self.items.truncate(self.k);
    }
}

/// Candidates transposed into `[panel][dim][lane]` so each lane's
/// accumulator walks coordinates in order.
fn build_panels(emb: &EmbeddingMatrix, nodes: &[usize]) -> Vec<f64> {
    let d = emb.d();
    let num_panels = nodes.len().div_ceil(LANES);
    let mut panels = vec![0.0f64; num_panels * d * LANES];
    for (j, &node) in nodes.iter().enumerate() {
        let (p, lane) = (j / LANES, j % LANES);
        let base = p * d * LANES;
        for (t, &v) in emb.row(node).iter().enumerate() {
            panels[base + t * LANES + lane] = v as f64;
        }
    }
    panels
}

#[inline(always)]
fn panel_distances(query: &[f64], panel: &[f64]) -> [f64; LANES] {
    let mut acc = [0.0f64; LANES];
    for (t, &q) in query.iter().enumerate() {
        let col = &panel[t * LANES..(t + 1) * LANES];
        for l in 0..LANES {
            let diff = q - col[l];
            acc[l] += diff * diff;
        }
    }
    acc
}

#[inline(always)]
fn scan_block(
    queries: &[Vec<f64>],
    first: usize,
    panels: &[f64],
    d: usize,
    n: usize,
    tops: &mut [TopK],
) {
    for (p, panel) in panels.chunks_exact(d * LANES).enumerate() {
        for (qi, (query, top)) in queries.iter().zip(tops.iter_mut()).enumerate() {
            let acc = panel_distances(query, panel);
            let me = first + qi;
            for (l, &d2) in acc.iter().enumerate() {
                let j = p * LANES + l;
                if j < n && j != me {
                    top.offer(d2, j);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_block_avx2(
    queries: &[Vec<f64>],
    first: usize,
    panels: &[f64],
    d: usize,
    n: usize,
    tops: &mut [TopK],
) {
    scan_block(queries, first, panels, d, n, tops)
}

fn scan(queries: &[Vec<f64>], first: usize, panels: &[f64], d: usize, n: usize, tops: &mut [TopK]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked above. No FMA is enabled,
            // so results match the portable path bit for bit.
            unsafe { scan_block_avx2(queries, first, panels, d, n, tops) };
            return;
        }
    }
    scan_block(queries, first, panels, d, n, tops)
}

/// Exact Euclidean K-NN among the `covered` examples.
///
/// Node `i` of the result is example `covered[i]`. Neighborhoods are not
/// symmetrized: `j` in `N(i)` does not imply `i` in `N(j)`. Ties in distance
/// go to the lower node index, and a node is never its own neighbor.
pub fn knn_brute_force(
    emb: &EmbeddingMatrix,
    covered: &[usize],
    k: usize,
) -> Result<NeighborGraph> {
    if covered.is_empty() {
        return Err(Error::Parameter("covered set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if k >= covered.len() {
        return Err(Error::Parameter(format!(
            "k = {k} must be smaller than the number of covered examples ({})",
            covered.len()
        )));
    }
    if let Some(&bad) = covered.iter().find(|&&c| c >= emb.n()) {
        return Err(Error::Dimension(format!(
            "covered index {bad} out of range for {} embeddings",
            emb.n()
        )));
    }
    let n = covered.len();
    let d = emb.d();
    let panels = build_panels(emb, covered);

    let lists: Vec<Vec<(f64, usize)>> = covered
        .par_chunks(QUERY_BLOCK)
        .enumerate()
        .flat_map_iter(|(b, block)| {
            let queries: Vec<Vec<f64>> = block
                .iter()
                .map(|&node| emb.row(node).iter().map(|&v| v as f64).collect())
                .collect();
            let mut tops: Vec<TopK> = (0..block.len()).map(|_| TopK::new(k)).collect();
            scan(&queries, b * QUERY_BLOCK, &panels, d, n, &mut tops);
            tops.into_iter().map(|t| t.items)
        })
        .collect();

    Ok(NeighborGraph::from_lists(covered.to_vec(), k, lists, false))
}

/// `k` nearest covered examples to an external query point, as
/// `(node index, squared distance)` sorted by `(distance, index)`.
pub fn knn_query(
    emb: &EmbeddingMatrix,
    covered: &[usize],
    query: &[f32],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if query.len() != emb.d() {
        return Err(Error::Dimension(format!(
            "query has dimension {}, embeddings have {}",
            query.len(),
            emb.d()
        )));
    }
    if k == 0 || k >= covered.len() {
        return Err(Error::Parameter(format!(
            "k = {k} must be in [1, {})",
            covered.len()
        )));
    }
    let mut top = TopK::new(k);
    for (j, &node) in covered.iter().enumerate() {
        top.offer(squared_distance(query, emb.row(node)), j);
    }
    Ok(top.items.into_iter().map(|(d2, j)| (j, d2)).collect())
}

/// Union edge set: `j` becomes a neighbor of `i` whenever either one lists
/// the other. Degrees become variable (at least `k`).
pub fn symmetrize(g: &NeighborGraph) -> NeighborGraph {
    if g.symmetric {
        return g.clone();
    }
    let mut lists: Vec<Vec<(f64, usize)>> = (0..g.len())
        .map(|i| {
            g.squared_distances(i)
                .iter()
                .copied()
                .zip(g.neighbors(i).iter().copied())
                .collect()
        })
        .collect();
    for i in 0..g.len() {
        for (&j, &d2) in g.neighbors(i).iter().zip(g.squared_distances(i)) {
            if !g.neighbors(j).contains(&i) {
                lists[j].push((d2, i));
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    NeighborGraph::from_lists(g.node_ids.clone(), g.k, lists, true)
}
