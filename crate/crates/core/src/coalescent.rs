//! Coalescent-with-recombination simulation of SNP windows.
//!
//! Genealogies are generated by a back-in-time ancestral-recombination-graph
//! process: each lineage carries a sorted list of ancestral segments,
//! recombination splits a lineage at a point drawn from the recombination map
//! restricted to its ancestral span, and coalescence merges two uniformly
//! chosen lineages. Material is retired as soon as it reaches its local most
//! recent common ancestor. Mutations are then dropped on the marginal trees as
//! a Poisson process under the infinite-sites model, so every mutation yields
//! one polymorphic column.
//!
//! Units: time is measured in coalescent units (a pair of lineages coalesces
//! at rate one under unit population size), and all rates are
//! population-scaled per bp, i.e. `rho = 4 Ne r` and `theta = 4 Ne mu`. Both
//! processes therefore run at `rate / 2` per bp per time unit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hotspot::{encode_window, HotspotError, LabeledWindow, PriorDraw, RecombMap};

#[derive(Debug, Error)]
pub enum CoalescentError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("sample count {0} must be at least 2")]
    SampleCountTooSmall(usize),
    #[error("recombination map covers {map_bp} bp but the region is {region_bp} bp")]
    MapDomainMismatch { map_bp: f64, region_bp: f64 },
    #[error("fewer than the required SNPs after {attempts} simulation attempts")]
    RetryExhausted { attempts: usize },
    #[error("diploid pairing requires an even sample count, got {0}")]
    OddSampleCount(usize),
    #[error("diploid pairing requires binary input values")]
    NonBinaryInput,
    #[error(transparent)]
    Encoding(#[from] HotspotError),
}

/// Piecewise-constant population size history in coalescent time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct PopSizeHistory {
    /// `(start_time, relative_size)` epochs; the first starts at 0.
    epochs: Vec<(f64, f64)>,
}

impl PopSizeHistory {
    pub fn new(epochs: Vec<(f64, f64)>) -> Result<Self, CoalescentError> {
        if epochs.is_empty() {
            return Err(CoalescentError::InvalidConfig("no epochs".into()));
        }
        if epochs[0].0 != 0.0 {
            return Err(CoalescentError::InvalidConfig(
                "first epoch must start at time 0".into(),
            ));
        }
        for w in epochs.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(CoalescentError::InvalidConfig(
                    "epoch start times must strictly increase".into(),
                ));
            }
        }
        if epochs.iter().any(|&(_, s)| !(s > 0.0) || !s.is_finite()) {
            return Err(CoalescentError::InvalidConfig(
                "relative sizes must be positive".into(),
            ));
        }
        Ok(Self { epochs })
    }

    /// Constant unit population size.
    pub fn constant() -> Self {
        Self { epochs: vec![(0.0, 1.0)] }
    }

    pub fn epochs(&self) -> &[(f64, f64)] {
        &self.epochs
    }

    fn epoch_at(&self, t: f64) -> usize {
        match self.epochs.binary_search_by(|e| e.0.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }
}

impl TryFrom<Vec<(f64, f64)>> for PopSizeHistory {
    type Error = String;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self, String> {
        Self::new(v).map_err(|e| e.to_string())
    }
}

impl From<PopSizeHistory> for Vec<(f64, f64)> {
    fn from(h: PopSizeHistory) -> Self {
        h.epochs
    }
}

/// Simulation parameters for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Haploid sample count.
    pub n: usize,
    /// Region length in bp.
    pub region_bp: f64,
    /// Mutation rate per generation per bp.
    pub mutation_rate: f64,
    /// Diploid effective population size.
    pub effective_size: f64,
    /// SNP count `d` of the encoded window.
    pub min_snps: usize,
    /// Root seed for runs driven by this config.
    pub seed: u64,
    /// Resimulation attempts for windows with too few SNPs.
    #[serde(default = "default_retry_cap")]
    pub retry_cap: usize,
    #[serde(default = "PopSizeHistory::constant")]
    pub demography: PopSizeHistory,
    /// Pair haploids into unphased {0,1,2} rows before encoding.
    #[serde(default)]
    pub diploid: bool,
}

fn default_retry_cap() -> usize {
    100
}

impl SimConfig {
    /// Population-scaled mutation rate per bp, `4 Ne mu`.
    pub fn theta_per_bp(&self) -> f64 {
        4.0 * self.effective_size * self.mutation_rate
    }

    /// Row count of encoded tensors (halved under diploid pairing).
    pub fn tensor_rows(&self) -> usize {
        if self.diploid {
            self.n / 2
        } else {
            self.n
        }
    }

    pub fn validate(&self) -> Result<(), CoalescentError> {
        if self.n < 2 {
            return Err(CoalescentError::SampleCountTooSmall(self.n));
        }
        let err = |m: String| Err(CoalescentError::InvalidConfig(m));
        if !(self.region_bp > 0.0) {
            return err(format!("region_bp {} must be positive", self.region_bp));
        }
        if !(self.mutation_rate > 0.0) {
            return err(format!("mutation_rate {} must be positive", self.mutation_rate));
        }
        if !(self.effective_size > 0.0) {
            return err(format!("effective_size {} must be positive", self.effective_size));
        }
        if self.min_snps < 2 {
            return err(format!("min_snps {} must be at least 2", self.min_snps));
        }
        if self.diploid && self.n % 2 != 0 {
            return Err(CoalescentError::OddSampleCount(self.n));
        }
        Ok(())
    }
}

/// Rooted binary tree over `n` leaves with node times in coalescent units.
///
/// Nodes are ordered by `(time, id)`: leaves `0..n-1` come first, the root
/// last. The branch above node `v` has length `time[parent(v)] - time(v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTree {
    n_leaves: usize,
    time: Vec<f64>,
    parent: Vec<Option<u32>>,
}

impl MarginalTree {
    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn node_count(&self) -> usize {
        self.time.len()
    }

    pub fn time(&self, node: usize) -> f64 {
        self.time[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node].map(|p| p as usize)
    }

    pub fn root(&self) -> usize {
        self.time.len() - 1
    }

    /// Time of the most recent common ancestor.
    pub fn height(&self) -> f64 {
        self.time[self.root()]
    }

    pub fn total_branch_length(&self) -> f64 {
        let mut acc = 0.0;
        for v in 0..self.node_count() {
            if let Some(p) = self.parent[v] {
                acc += self.time[p as usize] - self.time[v];
            }
        }
        acc
    }

    /// Leaves in the subtree rooted at `node`.
    pub fn leaves_under(&self, node: usize) -> Vec<usize> {
        let mut children: Vec<Vec<u32>> = vec![Vec::new(); self.node_count()];
        for v in 0..self.node_count() {
            if let Some(p) = self.parent[v] {
                children[p as usize].push(v as u32);
            }
        }
        let mut leaves = Vec::new();
        let mut stack = vec![node as u32];
        while let Some(v) = stack.pop() {
            if (v as usize) < self.n_leaves {
                leaves.push(v as usize);
            }
            stack.extend_from_slice(&children[v as usize]);
        }
        leaves.sort_unstable();
        leaves
    }
}

/// Genomic interval with its marginal tree.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeInterval {
    pub left: f64,
    pub right: f64,
    pub tree: MarginalTree,
}

/// Ordered tree intervals partitioning `[0, region_bp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTreeSequence {
    n: usize,
    region_bp: f64,
    pub intervals: Vec<TreeInterval>,
}

impl MarginalTreeSequence {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn region_bp(&self) -> f64 {
        self.region_bp
    }
}

/// Event counts from one ARG simulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArgStats {
    pub coalescences: u64,
    /// Recombination events with a breakpoint inside ancestral, not yet
    /// coalesced material. Satisfies
    /// `E[count] = (1/2) * ∫ rho * E[marginal tree length]`.
    pub ancestral_breakpoints: u64,
    /// Recombination events falling in gaps trapped within an ancestral span.
    pub trapped_breakpoints: u64,
}

#[derive(Clone, Copy, Debug)]
struct Seg {
    left: f64,
    right: f64,
    node: u32,
    samples: u32,
}

struct Lineage {
    segs: Vec<Seg>,
    /// Map mass integrated over the ancestral span (hull).
    mass: f64,
}

impl Lineage {
    fn refresh_mass(&mut self, map: &RecombMap) {
        self.mass = if self.segs.is_empty() {
            0.0
        } else {
            map.integral(self.segs[0].left, self.segs.last().unwrap().right)
        };
    }

    fn hull(&self) -> (f64, f64) {
        (self.segs[0].left, self.segs.last().unwrap().right)
    }
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    parent: u32,
    child: u32,
    left: f64,
    right: f64,
}

/// Draws genealogies for `[0, region_bp)` under the configured map and
/// demography. With a zero map the result is a single interval.
pub fn simulate_trees(
    n: usize,
    region_bp: f64,
    map: &RecombMap,
    demography: &PopSizeHistory,
    rng: &mut ChaCha8Rng,
) -> Result<MarginalTreeSequence, CoalescentError> {
    simulate_trees_with_stats(n, region_bp, map, demography, rng).map(|(ts, _)| ts)
}

/// [`simulate_trees`] plus event counts, for Monte Carlo validation.
pub fn simulate_trees_with_stats(
    n: usize,
    region_bp: f64,
    map: &RecombMap,
    demography: &PopSizeHistory,
    rng: &mut ChaCha8Rng,
) -> Result<(MarginalTreeSequence, ArgStats), CoalescentError> {
    if n < 2 {
        return Err(CoalescentError::SampleCountTooSmall(n));
    }
    if !(region_bp > 0.0) {
        return Err(CoalescentError::InvalidConfig(format!(
            "region_bp {region_bp} must be positive"
        )));
    }
    if (map.length() - region_bp).abs() > 1e-6 * region_bp.max(1.0) {
        return Err(CoalescentError::MapDomainMismatch {
            map_bp: map.length(),
            region_bp,
        });
    }

    let mut node_time: Vec<f64> = vec![0.0; n];
    let mut edges: Vec<Edge> = Vec::new();
    let mut stats = ArgStats::default();
    let total_mass = map.total_mass();
    let mut lineages: Vec<Lineage> = (0..n)
        .map(|leaf| Lineage {
            segs: vec![Seg { left: 0.0, right: region_bp, node: leaf as u32, samples: 1 }],
            mass: total_mass,
        })
        .collect();

    let mut t = 0.0;
    while lineages.len() >= 2 {
        let k = lineages.len();
        let pair_count = (k * (k - 1) / 2) as f64;
        let rho_rate: f64 = lineages.iter().map(|l| l.mass).sum::<f64>() / 2.0;
        let (t_next, coalesce) = next_event(t, pair_count, rho_rate, demography, rng);
        t = t_next;

        if coalesce {
            let i = rng.gen_range(0..k);
            let mut j = rng.gen_range(0..k - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (i.min(j), i.max(j));
            let second = lineages.swap_remove(b);
            let first = lineages.swap_remove(a);
            stats.coalescences += 1;
            if let Some(merged) = merge_lineages(
                first,
                second,
                t,
                n as u32,
                map,
                &mut node_time,
                &mut edges,
            ) {
                lineages.push(merged);
            }
        } else {
            // Choose the recombining lineage proportional to its hull mass.
            let target = rng.gen::<f64>() * rho_rate * 2.0;
            let mut acc = 0.0;
            let mut chosen = lineages.len() - 1;
            for (idx, lin) in lineages.iter().enumerate() {
                acc += lin.mass;
                if acc > target {
                    chosen = idx;
                    break;
                }
            }
            let (hull_l, hull_r) = lineages[chosen].hull();
            let mass = lineages[chosen].mass;
            if mass <= 0.0 {
                continue;
            }
            let x = map.invert_integral(hull_l, hull_r, rng.gen::<f64>() * mass);
            if let Some((left, right, ancestral)) = split_lineage(&mut lineages[chosen], x, map) {
                if ancestral {
                    stats.ancestral_breakpoints += 1;
                } else {
                    stats.trapped_breakpoints += 1;
                }
                lineages[chosen] = left;
                lineages.push(right);
            }
        }
    }
    debug_assert!(lineages.is_empty(), "unfinished material cannot be held by one lineage");

    let intervals = build_tree_sequence(n, region_bp, &node_time, &edges);
    Ok((MarginalTreeSequence { n, region_bp, intervals }, stats))
}

/// Waiting time to the next event under piecewise-constant coalescence rates.
/// An Exp(1) deviate is spent across epochs, carrying the overshoot over each
/// boundary.
fn next_event(
    t0: f64,
    pair_count: f64,
    rho_rate: f64,
    demography: &PopSizeHistory,
    rng: &mut ChaCha8Rng,
) -> (f64, bool) {
    let mut budget = -(1.0 - rng.gen::<f64>()).ln();
    let mut t = t0;
    let mut epoch = demography.epoch_at(t);
    loop {
        let size = demography.epochs[epoch].1;
        let coal_rate = pair_count / size;
        let lambda = coal_rate + rho_rate;
        let boundary = demography
            .epochs
            .get(epoch + 1)
            .map(|e| e.0)
            .unwrap_or(f64::INFINITY);
        let span = boundary - t;
        if lambda * span >= budget {
            t += budget / lambda;
            let coalesce = rng.gen::<f64>() * lambda < coal_rate;
            return (t, coalesce);
        }
        budget -= lambda * span;
        t = boundary;
        epoch += 1;
    }
}

/// Merges two lineages at time `t`. Overlapping material coalesces under a
/// fresh node; material reaching all `n` samples is retired. Returns the
/// surviving lineage, if any material remains uncoalesced.
fn merge_lineages(
    a: Lineage,
    b: Lineage,
    t: f64,
    n: u32,
    map: &RecombMap,
    node_time: &mut Vec<f64>,
    edges: &mut Vec<Edge>,
) -> Option<Lineage> {
    let mut out: Vec<Seg> = Vec::with_capacity(a.segs.len() + b.segs.len());
    let mut new_node: Option<u32> = None;
    // (left, right, child_a, child_b) overlap runs, squashed on equal pairs.
    let mut overlaps: Vec<(f64, f64, u32, u32)> = Vec::new();

    let mut boundaries: Vec<f64> = Vec::with_capacity(2 * (a.segs.len() + b.segs.len()));
    for seg in a.segs.iter().chain(b.segs.iter()) {
        boundaries.push(seg.left);
        boundaries.push(seg.right);
    }
    boundaries.sort_unstable_by(|x, y| x.total_cmp(y));
    boundaries.dedup();

    let push_seg = |out: &mut Vec<Seg>, seg: Seg| {
        if let Some(last) = out.last_mut() {
            if last.node == seg.node && last.right == seg.left {
                last.right = seg.right;
                return;
            }
        }
        out.push(seg);
    };

    let mut ia = 0;
    let mut ib = 0;
    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        while ia < a.segs.len() && a.segs[ia].right <= lo {
            ia += 1;
        }
        while ib < b.segs.len() && b.segs[ib].right <= lo {
            ib += 1;
        }
        let in_a = ia < a.segs.len() && a.segs[ia].left <= lo;
        let in_b = ib < b.segs.len() && b.segs[ib].left <= lo;
        match (in_a, in_b) {
            (true, false) => push_seg(&mut out, Seg { left: lo, right: hi, ..a.segs[ia] }),
            (false, true) => push_seg(&mut out, Seg { left: lo, right: hi, ..b.segs[ib] }),
            (true, true) => {
                let u = *new_node.get_or_insert_with(|| {
                    node_time.push(t);
                    (node_time.len() - 1) as u32
                });
                let (ca, cb) = (a.segs[ia].node, b.segs[ib].node);
                if let Some(last) = overlaps.last_mut() {
                    if last.1 == lo && last.2 == ca && last.3 == cb {
                        last.1 = hi;
                    } else {
                        overlaps.push((lo, hi, ca, cb));
                    }
                } else {
                    overlaps.push((lo, hi, ca, cb));
                }
                let samples = a.segs[ia].samples + b.segs[ib].samples;
                debug_assert!(samples <= n);
                if samples < n {
                    push_seg(&mut out, Seg { left: lo, right: hi, node: u, samples });
                }
            }
            (false, false) => {}
        }
    }

    if let Some(u) = new_node {
        for (lo, hi, ca, cb) in overlaps {
            edges.push(Edge { parent: u, child: ca, left: lo, right: hi });
            edges.push(Edge { parent: u, child: cb, left: lo, right: hi });
        }
    }

    if out.is_empty() {
        None
    } else {
        let mut lin = Lineage { segs: out, mass: 0.0 };
        lin.refresh_mass(map);
        Some(lin)
    }
}

/// Splits a lineage at breakpoint `x`. Returns `(left, right, ancestral)`
/// where `ancestral` says whether `x` fell inside carried material rather
/// than a trapped gap, or `None` when the cut would leave a side empty.
fn split_lineage(lineage: &Lineage, x: f64, map: &RecombMap) -> Option<(Lineage, Lineage, bool)> {
    let mut left: Vec<Seg> = Vec::new();
    let mut right: Vec<Seg> = Vec::new();
    let mut ancestral = false;
    for seg in &lineage.segs {
        if seg.right <= x {
            left.push(*seg);
        } else if seg.left >= x {
            right.push(*seg);
        } else {
            ancestral = true;
            left.push(Seg { right: x, ..*seg });
            right.push(Seg { left: x, ..*seg });
        }
    }
    if left.is_empty() || right.is_empty() {
        return None;
    }
    let mut l = Lineage { segs: left, mass: 0.0 };
    let mut r = Lineage { segs: right, mass: 0.0 };
    l.refresh_mass(map);
    r.refresh_mass(map);
    Some((l, r, ancestral))
}

/// Assembles marginal trees from the recorded edges by sweeping breakpoints
/// left to right.
fn build_tree_sequence(
    n: usize,
    region_bp: f64,
    node_time: &[f64],
    edges: &[Edge],
) -> Vec<TreeInterval> {
    let mut breakpoints: Vec<f64> = edges
        .iter()
        .flat_map(|e| [e.left, e.right])
        .chain([0.0, region_bp])
        .collect();
    breakpoints.sort_unstable_by(|x, y| x.total_cmp(y));
    breakpoints.dedup();

    let mut by_left: Vec<usize> = (0..edges.len()).collect();
    by_left.sort_unstable_by(|&a, &b| edges[a].left.total_cmp(&edges[b].left));
    let mut by_right: Vec<usize> = (0..edges.len()).collect();
    by_right.sort_unstable_by(|&a, &b| edges[a].right.total_cmp(&edges[b].right));

    let node_count = node_time.len();
    let mut parent: Vec<Option<u32>> = vec![None; node_count];
    let mut stamp: Vec<u32> = vec![0; node_count];
    let mut local_of: Vec<u32> = vec![0; node_count];
    let (mut li, mut ri) = (0, 0);

    let mut intervals = Vec::with_capacity(breakpoints.len().saturating_sub(1));
    for (iv, w) in breakpoints.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        while ri < by_right.len() && edges[by_right[ri]].right <= lo {
            parent[edges[by_right[ri]].child as usize] = None;
            ri += 1;
        }
        while li < by_left.len() && edges[by_left[li]].left <= lo {
            let e = &edges[by_left[li]];
            debug_assert!(parent[e.child as usize].is_none());
            parent[e.child as usize] = Some(e.parent);
            li += 1;
        }

        // Collect the nodes of this interval's tree by climbing from leaves.
        let mark = (iv + 1) as u32;
        let mut nodes: Vec<u32> = Vec::with_capacity(2 * n - 1);
        for leaf in 0..n {
            let mut v = leaf as u32;
            loop {
                if stamp[v as usize] == mark {
                    break;
                }
                stamp[v as usize] = mark;
                nodes.push(v);
                match parent[v as usize] {
                    Some(p) => v = p,
                    None => break,
                }
            }
        }
        nodes.sort_unstable_by(|&x, &y| {
            node_time[x as usize]
                .total_cmp(&node_time[y as usize])
                .then(x.cmp(&y))
        });
        for (local, &v) in nodes.iter().enumerate() {
            local_of[v as usize] = local as u32;
        }
        let time: Vec<f64> = nodes.iter().map(|&v| node_time[v as usize]).collect();
        let tree_parent: Vec<Option<u32>> = nodes
            .iter()
            .map(|&v| parent[v as usize].map(|p| local_of[p as usize]))
            .collect();
        debug_assert_eq!(tree_parent.iter().filter(|p| p.is_none()).count(), 1);
        intervals.push(TreeInterval {
            left: lo,
            right: hi,
            tree: MarginalTree { n_leaves: n, time, parent: tree_parent },
        });
    }
    intervals
}

/// Binary (or dosage) SNP matrix with strictly increasing positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnpMatrix {
    n: usize,
    positions: Vec<f64>,
    /// Row-major `n x d` values.
    values: Vec<u8>,
}

impl SnpMatrix {
    pub fn from_parts(n: usize, positions: Vec<f64>, values: Vec<u8>) -> Self {
        assert_eq!(values.len(), n * positions.len());
        Self { n, positions, values }
    }

    pub fn empty(n: usize) -> Self {
        Self { n, positions: Vec::new(), values: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.positions.len() + col]
    }

    pub fn column_sum(&self, col: usize) -> u32 {
        (0..self.n).map(|i| self.value(i, col) as u32).sum()
    }

    /// Average number of pairwise differences between rows, counting dosage
    /// distance for unphased values.
    pub fn mean_pairwise_difference(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for col in 0..self.cols() {
            let mut counts = [0f64; 3];
            for row in 0..self.n {
                counts[self.value(row, col).min(2) as usize] += 1.0;
            }
            total += counts[0] * counts[1] + counts[1] * counts[2] + 2.0 * counts[0] * counts[2];
        }
        total / (self.n as f64 * (self.n as f64 - 1.0) / 2.0)
    }

    /// Counts of columns whose folded (minor-allele) count equals `1..=bins`.
    pub fn folded_spectrum_bins(&self, bins: usize) -> Vec<f64> {
        let mut out = vec![0.0; bins];
        for col in 0..self.cols() {
            let c = self.column_sum(col) as usize;
            let folded = c.min(self.n - c);
            if folded >= 1 && folded <= bins {
                out[folded - 1] += 1.0;
            }
        }
        out
    }

    fn crop_columns(&self, start: usize, count: usize) -> SnpMatrix {
        let d = self.cols();
        let mut values = Vec::with_capacity(self.n * count);
        for row in 0..self.n {
            values.extend_from_slice(&self.values[row * d + start..row * d + start + count]);
        }
        SnpMatrix {
            n: self.n,
            positions: self.positions[start..start + count].to_vec(),
            values,
        }
    }
}

/// Drops infinite-sites mutations on the tree sequence at population-scaled
/// rate `mu_scaled` per bp (`mu_scaled / 2` per bp per time unit on each
/// branch). Columns come out position-sorted and minor-allele recoded: any
/// column with more than `n/2` carriers is flipped so 0 is the common
/// variant; exact ties keep the simulated orientation.
pub fn drop_mutations(
    trees: &MarginalTreeSequence,
    mu_scaled: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SnpMatrix, CoalescentError> {
    if !(mu_scaled >= 0.0) || !mu_scaled.is_finite() {
        return Err(CoalescentError::InvalidConfig(format!(
            "mu_scaled {mu_scaled} must be nonnegative"
        )));
    }
    let n = trees.n();
    let mut columns: Vec<(f64, Vec<u8>)> = Vec::new();
    for interval in &trees.intervals {
        let tree = &interval.tree;
        let total = tree.total_branch_length();
        let lambda = mu_scaled / 2.0 * (interval.right - interval.left) * total;
        if lambda <= 0.0 {
            continue;
        }
        let count = Poisson::new(lambda)
            .expect("positive rate")
            .sample(rng) as usize;
        for _ in 0..count {
            let pos = interval.left + rng.gen::<f64>() * (interval.right - interval.left);
            // Branch above `v`, chosen proportional to its length.
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = 0;
            for v in 0..tree.node_count() {
                if let Some(p) = tree.parent(v) {
                    acc += tree.time(p) - tree.time(v);
                    if acc > target {
                        chosen = v;
                        break;
                    }
                }
            }
            let mut bits = vec![0u8; n];
            for leaf in tree.leaves_under(chosen) {
                bits[leaf] = 1;
            }
            columns.push((pos, bits));
        }
    }
    columns.sort_by(|a, b| a.0.total_cmp(&b.0));

    let d = columns.len();
    let mut positions = Vec::with_capacity(d);
    let mut values = vec![0u8; n * d];
    for (j, (pos, bits)) in columns.into_iter().enumerate() {
        // Strictly increasing positions even if two draws collide.
        let pos = match positions.last() {
            Some(&prev) if pos <= prev => f64::next_up(prev),
            _ => pos,
        };
        positions.push(pos);
        let ones: u32 = bits.iter().map(|&b| b as u32).sum();
        let flip = ones as f64 > n as f64 / 2.0;
        for (i, bit) in bits.into_iter().enumerate() {
            values[i * d + j] = if flip { 1 - bit } else { bit };
        }
    }
    Ok(SnpMatrix { n, positions, values })
}

/// Randomly pairs haploid rows into unphased diploid rows over `{0,1,2}`.
/// Column positions and per-column allele counts are preserved.
pub fn pair_to_diploid(m: &SnpMatrix, rng: &mut ChaCha8Rng) -> Result<SnpMatrix, CoalescentError> {
    if m.rows() % 2 != 0 {
        return Err(CoalescentError::OddSampleCount(m.rows()));
    }
    if m.values.iter().any(|&v| v > 1) {
        return Err(CoalescentError::NonBinaryInput);
    }
    let mut perm: Vec<usize> = (0..m.rows()).collect();
    perm.shuffle(rng);
    let d = m.cols();
    let half = m.rows() / 2;
    let mut values = vec![0u8; half * d];
    for i in 0..half {
        let (a, b) = (perm[2 * i], perm[2 * i + 1]);
        for j in 0..d {
            values[i * d + j] = m.value(a, j) + m.value(b, j);
        }
    }
    Ok(SnpMatrix { n: half, positions: m.positions.clone(), values })
}

/// Simulates one labeled window: genealogies, mutations, optional diploid
/// pairing, resimulation while fewer than `min_snps` columns come out, and a
/// crop to the `min_snps` consecutive SNPs whose median position sits closest
/// to the hotspot center.
pub fn simulate_window(
    draw: &PriorDraw,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledWindow, CoalescentError> {
    cfg.validate()?;
    if (draw.map.length() - cfg.region_bp).abs() > 1e-6 * cfg.region_bp {
        return Err(CoalescentError::MapDomainMismatch {
            map_bp: draw.map.length(),
            region_bp: cfg.region_bp,
        });
    }
    let theta = cfg.theta_per_bp();
    for _ in 0..=cfg.retry_cap {
        let trees = simulate_trees(cfg.n, cfg.region_bp, &draw.map, &cfg.demography, rng)?;
        let mut m = drop_mutations(&trees, theta, rng)?;
        if cfg.diploid {
            m = pair_to_diploid(&m, rng)?;
        }
        if m.cols() >= cfg.min_snps {
            let m = crop_to_center(&m, cfg.min_snps, draw.window.hot_center());
            let tensor = encode_window(&m, cfg.region_bp, cfg.tensor_rows(), cfg.min_snps)?;
            return Ok(LabeledWindow {
                tensor,
                label: draw.label,
                hot: draw.h,
                heat: draw.k,
                draw: Some(draw.clone()),
            });
        }
    }
    Err(CoalescentError::RetryExhausted { attempts: cfg.retry_cap + 1 })
}

/// The run of `count` consecutive columns whose median position is closest to
/// `center` (ties keep the leftmost run).
pub(crate) fn crop_to_center(m: &SnpMatrix, count: usize, center: f64) -> SnpMatrix {
    let d = m.cols();
    debug_assert!(d >= count);
    if d == count {
        return m.clone();
    }
    let positions = m.positions();
    let median = |start: usize| -> f64 {
        if count % 2 == 1 {
            positions[start + count / 2]
        } else {
            (positions[start + count / 2 - 1] + positions[start + count / 2]) / 2.0
        }
    };
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for start in 0..=(d - count) {
        let dist = (median(start) - center).abs();
        if dist < best_dist {
            best_dist = dist;
            best = start;
        }
    }
    m.crop_columns(best, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hotspot::{sample_prior, PriorConfig, RecombMap, WindowSpec};
    use crate::rng::{rng_for, DOMAIN_TRAIN};

    fn test_rng(index: u64) -> ChaCha8Rng {
        rng_for(0xC0A1, DOMAIN_TRAIN, index)
    }

    fn zero_map(length: f64) -> RecombMap {
        RecombMap::flat(0.0, length).unwrap()
    }

    #[test]
    fn rejects_small_samples_and_bad_maps() {
        let mut rng = test_rng(0);
        let eta = PopSizeHistory::constant();
        assert!(simulate_trees(1, 100.0, &zero_map(100.0), &eta, &mut rng).is_err());
        assert!(simulate_trees(4, 100.0, &zero_map(50.0), &eta, &mut rng).is_err());
    }

    #[test]
    fn no_recombination_gives_one_interval() {
        let eta = PopSizeHistory::constant();
        for rep in 0..20 {
            let mut rng = test_rng(rep);
            let ts = simulate_trees(8, 1000.0, &zero_map(1000.0), &eta, &mut rng).unwrap();
            assert_eq!(ts.intervals.len(), 1);
            let iv = &ts.intervals[0];
            assert_eq!(iv.left, 0.0);
            assert_eq!(iv.right, 1000.0);
            assert_eq!(iv.tree.n_leaves(), 8);
            assert_eq!(iv.tree.node_count(), 15);
            assert!(iv.tree.total_branch_length() > 0.0);
        }
    }

    #[test]
    fn pair_coalescence_time_is_one() {
        // E[T_MRCA] = 2(1 - 1/n) = 1 for n = 2; desk-scale Monte Carlo here,
        // the full-size run lives in the acceptance suite.
        let eta = PopSizeHistory::constant();
        let reps = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for rep in 0..reps {
            let mut rng = test_rng(rep);
            let ts = simulate_trees(2, 10.0, &zero_map(10.0), &eta, &mut rng).unwrap();
            let h = ts.intervals[0].tree.height();
            sum += h;
            sumsq += h * h;
        }
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn bottleneck_demography_shortens_pair_times() {
        // Relative size 0.1 multiplies the coalescence rate by 10, so
        // E[T_MRCA] for a pair is 0.1.
        let eta = PopSizeHistory::new(vec![(0.0, 0.1)]).unwrap();
        let reps = 20_000;
        let mut sum = 0.0;
        for rep in 0..reps {
            let mut rng = test_rng(rep);
            let ts = simulate_trees(2, 10.0, &zero_map(10.0), &eta, &mut rng).unwrap();
            sum += ts.intervals[0].tree.height();
        }
        let mean = sum / reps as f64;
        let se = 0.1 / (reps as f64).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn epoch_boundaries_carry_overshoot() {
        // Size jumps from 1 to 0.5 at t = 0.3. For a pair,
        // P(T > t) = exp(-0.3 - 2(t - 0.3)) beyond the boundary; the mean is
        // 1 - exp(-0.3)/2 ≈ 0.6296.
        let eta = PopSizeHistory::new(vec![(0.0, 1.0), (0.3, 0.5)]).unwrap();
        let reps = 40_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for rep in 0..reps {
            let mut rng = test_rng(rep);
            let ts = simulate_trees(2, 10.0, &zero_map(10.0), &eta, &mut rng).unwrap();
            let h = ts.intervals[0].tree.height();
            sum += h;
            sumsq += h * h;
        }
        let expected = 1.0 - (-0.3f64).exp() / 2.0;
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected}");
    }

    #[test]
    fn recombination_produces_intervals_and_valid_trees() {
        let eta = PopSizeHistory::constant();
        let map = RecombMap::flat(10.0 / 1000.0, 1000.0).unwrap();
        let mut total_intervals = 0;
        for rep in 0..50 {
            let mut rng = test_rng(1000 + rep);
            let ts = simulate_trees(8, 1000.0, &map, &eta, &mut rng).unwrap();
            total_intervals += ts.intervals.len();
            // Intervals partition [0, L).
            assert_eq!(ts.intervals[0].left, 0.0);
            assert_eq!(ts.intervals.last().unwrap().right, 1000.0);
            for w in ts.intervals.windows(2) {
                assert_eq!(w[0].right, w[1].left);
            }
            for iv in &ts.intervals {
                assert_eq!(iv.tree.n_leaves(), 8);
                assert_eq!(iv.tree.node_count(), 15);
                let root = iv.tree.root();
                assert_eq!(iv.tree.leaves_under(root), (0..8).collect::<Vec<_>>());
                for v in 0..iv.tree.node_count() {
                    if let Some(p) = iv.tree.parent(v) {
                        assert!(iv.tree.time(p) >= iv.tree.time(v));
                    }
                }
            }
        }
        assert!(total_intervals > 50, "recombination should split the region");
    }

    #[test]
    fn zero_mutation_rate_yields_no_columns() {
        let eta = PopSizeHistory::constant();
        let mut rng = test_rng(7);
        let ts = simulate_trees(6, 500.0, &zero_map(500.0), &eta, &mut rng).unwrap();
        let m = drop_mutations(&ts, 0.0, &mut rng).unwrap();
        assert_eq!(m.cols(), 0);
        assert_eq!(m.rows(), 6);
    }

    #[test]
    fn columns_are_polymorphic_and_sorted() {
        let eta = PopSizeHistory::constant();
        let map = RecombMap::flat(5.0 / 1000.0, 1000.0).unwrap();
        for rep in 0..30 {
            let mut rng = test_rng(2000 + rep);
            let ts = simulate_trees(10, 1000.0, &map, &eta, &mut rng).unwrap();
            let m = drop_mutations(&ts, 0.01, &mut rng).unwrap();
            for j in 0..m.cols() {
                let c = m.column_sum(j);
                assert!(c >= 1 && c < 10, "column {j} has count {c}");
                // Minor-allele recoding: 1 is never the majority.
                assert!(c as f64 <= 10.0 / 2.0);
            }
            for w in m.positions().windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn watterson_snp_count_small_scale() {
        // E[#SNPs] = theta * sum_{i<n} 1/i with theta = mu_scaled * L.
        let eta = PopSizeHistory::constant();
        let n = 6;
        let mu_scaled = 0.004;
        let length = 1000.0;
        let reps = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for rep in 0..reps {
            let mut rng = test_rng(3000 + rep);
            let ts = simulate_trees(n, length, &zero_map(length), &eta, &mut rng).unwrap();
            let s = drop_mutations(&ts, mu_scaled, &mut rng).unwrap().cols() as f64;
            sum += s;
            sumsq += s * s;
        }
        let harmonic: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
        let expected = mu_scaled * length * harmonic;
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected}");
    }

    #[test]
    fn pairwise_difference_matches_theta() {
        // For n = 2 the expected mean pairwise difference equals theta.
        let eta = PopSizeHistory::constant();
        let mu_scaled = 0.005;
        let length = 1000.0;
        let reps = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for rep in 0..reps {
            let mut rng = test_rng(4000 + rep);
            let ts = simulate_trees(2, length, &zero_map(length), &eta, &mut rng).unwrap();
            let pi = drop_mutations(&ts, mu_scaled, &mut rng)
                .unwrap()
                .mean_pairwise_difference();
            sum += pi;
            sumsq += pi * pi;
        }
        let expected = mu_scaled * length;
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected}");
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let cfg = SimConfig {
            n: 8,
            region_bp: 2000.0,
            mutation_rate: 1.1e-8,
            effective_size: 20_000.0,
            min_snps: 2,
            seed: 0,
            retry_cap: 100,
            demography: PopSizeHistory::constant(),
            diploid: false,
        };
        let prior = PriorConfig {
            window: WindowSpec::new(800.0, 400.0, 800.0).unwrap(),
            ..PriorConfig::default_discrete()
        };
        let draw = sample_prior(&prior, &mut test_rng(50)).unwrap();
        let a = simulate_window(&draw, &cfg, &mut test_rng(51)).unwrap();
        let b = simulate_window(&draw, &cfg, &mut test_rng(51)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_simulation_shapes_and_label_passthrough() {
        let cfg = SimConfig {
            n: 12,
            region_bp: 28_000.0,
            mutation_rate: 1.1e-8,
            effective_size: 10_000.0,
            min_snps: 10,
            seed: 0,
            retry_cap: 100,
            demography: PopSizeHistory::constant(),
            diploid: false,
        };
        let prior = PriorConfig::default_discrete();
        let mut rng = test_rng(60);
        for _ in 0..10 {
            let draw = sample_prior(&prior, &mut rng).unwrap();
            let w = simulate_window(&draw, &cfg, &mut rng).unwrap();
            assert_eq!(w.tensor.rows(), 12);
            assert_eq!(w.tensor.snps(), 10);
            assert_eq!(w.hot, draw.h);
            assert_eq!(w.label, draw.label);
            // Distance channel rows identical, entries in [0, 1], last 0.
            for j in 0..10 {
                let v = w.tensor.get(0, j, 1);
                assert!((0.0..=1.0).contains(&v));
                for i in 1..12 {
                    assert_eq!(w.tensor.get(i, j, 1), v);
                }
            }
            assert_eq!(w.tensor.get(0, 9, 1), 0.0);
        }
    }

    #[test]
    fn retry_cap_exhausts_on_tiny_mutation_rate() {
        let cfg = SimConfig {
            n: 4,
            region_bp: 1000.0,
            mutation_rate: 1e-13,
            effective_size: 100.0,
            min_snps: 10,
            seed: 0,
            retry_cap: 5,
            demography: PopSizeHistory::constant(),
            diploid: false,
        };
        let prior = PriorConfig {
            window: WindowSpec::new(400.0, 200.0, 400.0).unwrap(),
            ..PriorConfig::default_discrete()
        };
        let draw = sample_prior(&prior, &mut test_rng(70)).unwrap();
        match simulate_window(&draw, &cfg, &mut test_rng(71)) {
            Err(CoalescentError::RetryExhausted { attempts }) => assert_eq!(attempts, 6),
            other => panic!("expected RetryExhausted, got {other:?}"),
        }
    }

    #[test]
    fn crop_selects_run_closest_to_center() {
        let m = SnpMatrix::from_parts(
            1,
            vec![100.0, 200.0, 480.0, 520.0, 900.0],
            vec![1, 1, 1, 1, 1],
        );
        let cropped = crop_to_center(&m, 2, 500.0);
        assert_eq!(cropped.positions(), &[480.0, 520.0]);
        let cropped = crop_to_center(&m, 3, 500.0);
        assert_eq!(cropped.positions(), &[200.0, 480.0, 520.0]);
    }

    #[test]
    fn diploid_pairing_sums_rows() {
        let m = SnpMatrix::from_parts(2, vec![1.0, 2.0, 3.0], vec![0, 1, 0, 1, 1, 0]);
        let d = pair_to_diploid(&m, &mut test_rng(80)).unwrap();
        assert_eq!(d.rows(), 1);
        assert_eq!(d.positions(), m.positions());
        assert_eq!((d.value(0, 0), d.value(0, 1), d.value(0, 2)), (1, 2, 0));
    }

    #[test]
    fn diploid_pairing_rejects_odd_and_nonbinary() {
        let odd = SnpMatrix::from_parts(3, vec![1.0], vec![1, 0, 0]);
        assert!(matches!(
            pair_to_diploid(&odd, &mut test_rng(81)),
            Err(CoalescentError::OddSampleCount(3))
        ));
        let dosage = SnpMatrix::from_parts(2, vec![1.0], vec![2, 0]);
        assert!(matches!(
            pair_to_diploid(&dosage, &mut test_rng(82)),
            Err(CoalescentError::NonBinaryInput)
        ));
    }

    #[test]
    fn diploid_pairing_preserves_column_sums() {
        let mut rng = test_rng(83);
        for _ in 0..20 {
            let n = 8;
            let d = 5;
            let values: Vec<u8> = (0..n * d).map(|_| rng.gen_range(0..2u8)).collect();
            let m = SnpMatrix::from_parts(n, (0..d).map(|j| j as f64).collect(), values);
            let paired = pair_to_diploid(&m, &mut rng).unwrap();
            for j in 0..d {
                assert_eq!(paired.column_sum(j), m.column_sum(j));
            }
        }
    }

    #[test]
    fn all_zero_matrix_pairs_to_all_zero() {
        let m = SnpMatrix::from_parts(4, vec![1.0, 2.0], vec![0; 8]);
        let d = pair_to_diploid(&m, &mut test_rng(84)).unwrap();
        assert_eq!(d.rows(), 2);
        assert!((0..2).all(|i| (0..2).all(|j| d.value(i, j) == 0)));
    }
}
