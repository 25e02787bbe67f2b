//! Slab partitioning of the atom graph into PURE/TO/FROM buckets and
//! per-partition node arrays with marker spans.
//!
//! Walls are planes of constant fractional coordinate along the longest cell
//! vector. Ownership of nodes follows the slab; ownership of edges follows
//! the destination node, so every edge message is computed by exactly one
//! partition.
//!
//! A node may be needed by more than one foreign partition (three or more
//! slabs with periodic wrap-around, or slabs thinner than the cutoff), so
//! the per-node requirement is a set of partitions rather than a single slot.
//! Such a node appears once per TO block in its owner's node array; the
//! first occurrence is the canonical row and the others are tracked as
//! duplicates.

use std::collections::HashMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3};
use crate::neighborlist::AtomGraph;
use crate::system::AtomicSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Equal atom counts per slab.
    #[default]
    Quantile,
    /// Equal slab widths.
    EqualWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PartitionOptions {
    pub mode: BoundaryMode,
    /// Permit slabs narrower than the cutoff. Correctness is preserved; a
    /// node may then be required by non-adjacent slabs.
    pub allow_thin_slabs: bool,
}

/// Vertical-wall partition rule along one cell axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionRule {
    pub axis: usize,
    /// `p + 1` strictly increasing fractional coordinates from 0 to 1.
    pub boundaries: Vec<f64>,
    pub p: usize,
    pub allow_thin_slabs: bool,
    /// Cell used for fractional coordinates (padded along open axes).
    pub lattice: Mat3,
}

impl PartitionRule {
    /// Slab index for a fractional coordinate in `[0, 1]`. Intervals are
    /// half-open `[lo, hi)`; exactly 1.0 maps to the last slab.
    pub fn slab_of(&self, frac: f64) -> usize {
        // partition_point gives the number of interior walls <= frac.
        let interior = &self.boundaries[1..self.p];
        interior.partition_point(|&b| b <= frac)
    }

    /// Fractional coordinate of every atom along the partition axis, folded
    /// into `[0, 1]`.
    pub fn axis_fractions(&self, system: &AtomicSystem) -> Result<Vec<f64>> {
        axis_fractions(system, &self.lattice, self.axis)
    }

    /// Owning partition of every atom.
    pub fn node_owners(&self, system: &AtomicSystem) -> Result<Vec<usize>> {
        Ok(self
            .axis_fractions(system)?
            .into_iter()
            .map(|f| self.slab_of(f))
            .collect())
    }

    /// Slab widths in Å, measured perpendicular to the walls.
    pub fn slab_widths(&self) -> Vec<f64> {
        let w = geometry::perpendicular_widths(&self.lattice)[self.axis];
        self.boundaries.windows(2).map(|b| (b[1] - b[0]) * w).collect()
    }

    /// Fails with [`Error::PartitionWidth`] when a slab is narrower than
    /// `cutoff` and thin slabs are not allowed.
    pub fn check_widths(&self, cutoff: f64) -> Result<()> {
        if self.allow_thin_slabs || self.p == 1 {
            return Ok(());
        }
        for (slab, width) in self.slab_widths().into_iter().enumerate() {
            if width < cutoff {
                return Err(Error::PartitionWidth {
                    slab,
                    axis: self.axis,
                    width,
                    cutoff,
                });
            }
        }
        Ok(())
    }
}

fn axis_fractions(system: &AtomicSystem, lattice: &Mat3, axis: usize) -> Result<Vec<f64>> {
    let inv = geometry::inverse(lattice).ok_or_else(|| Error::invalid("degenerate cell"))?;
    Ok(system
        .positions
        .iter()
        .map(|&x| {
            let f = geometry::vec_mat(x, &inv)[axis];
            if (0.0..=1.0).contains(&f) {
                f
            } else {
                let w = f - f.floor();
                if w >= 1.0 {
                    0.0
                } else {
                    w
                }
            }
        })
        .collect())
}

/// Partition rule along the longest cell vector.
pub fn choose_partition_rule(system: &AtomicSystem, p: usize, options: &PartitionOptions) -> Result<PartitionRule> {
    if p == 0 {
        return Err(Error::invalid("partition count must be >= 1"));
    }
    if p > system.len() {
        return Err(Error::invalid(format!(
            "{p} partitions requested for {} atoms",
            system.len()
        )));
    }
    let lattice = system.effective_lattice(0.0);
    if geometry::inverse(&lattice).is_none() {
        return Err(Error::invalid("degenerate cell"));
    }
    let lengths = lattice.map(geometry::norm);
    let mut axis = 0;
    for a in 1..3 {
        if lengths[a] > lengths[axis] {
            axis = a;
        }
    }
    let boundaries = match options.mode {
        BoundaryMode::EqualWidth => (0..=p).map(|k| k as f64 / p as f64).collect(),
        BoundaryMode::Quantile => {
            let mut fracs = axis_fractions(system, &lattice, axis)?;
            fracs.sort_by(f64::total_cmp);
            quantile_boundaries(&fracs, p)?
        }
    };
    Ok(PartitionRule {
        axis,
        boundaries,
        p,
        allow_thin_slabs: options.allow_thin_slabs,
        lattice,
    })
}

fn quantile_boundaries(sorted: &[f64], p: usize) -> Result<Vec<f64>> {
    let n = sorted.len();
    let mut out = vec![0.0];
    for k in 1..p {
        let ideal = (k * n + p / 2) / p;
        // Nearest index j with a gap sorted[j-1] < sorted[j].
        let mut cut = None;
        for delta in 0..n {
            for j in [ideal.saturating_sub(delta), ideal + delta] {
                if j >= 1 && j < n && sorted[j - 1] < sorted[j] {
                    cut = Some(j);
                    break;
                }
            }
            if cut.is_some() {
                break;
            }
        }
        let j = cut.ok_or_else(|| Error::invalid("all atoms share one coordinate along the partition axis"))?;
        let b = 0.5 * (sorted[j - 1] + sorted[j]);
        if b <= *out.last().unwrap() || b >= 1.0 {
            return Err(Error::invalid(format!(
                "cannot place {p} distinct walls: atoms are too clustered along the partition axis"
            )));
        }
        out.push(b);
    }
    out.push(1.0);
    Ok(out)
}

/// Node buckets per partition. `to[i][j]` holds nodes owned by `i` that
/// partition `j` needs; `from[j][i]` is the same sequence seen by `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Buckets {
    pub pure: Vec<Vec<usize>>,
    pub to: Vec<Vec<Vec<usize>>>,
    pub from: Vec<Vec<Vec<usize>>>,
    /// Owning partition of every node.
    pub owner: Vec<usize>,
}

impl Buckets {
    pub fn p(&self) -> usize {
        self.pure.len()
    }
}

/// Bucket assignment with per-node requirement sets.
pub fn assign_to_partitions(graph: &AtomGraph, system: &AtomicSystem, rule: &PartitionRule) -> Result<Buckets> {
    if system.len() != graph.num_nodes {
        return Err(Error::Shape {
            expected: format!("{} atoms", graph.num_nodes),
            found: format!("{} atoms", system.len()),
        });
    }
    rule.check_widths(graph.cutoff)?;
    let owner = rule.node_owners(system)?;
    Ok(buckets_from_owners(graph, owner, rule.p))
}

pub(crate) fn buckets_from_owners(graph: &AtomGraph, owner: Vec<usize>, p: usize) -> Buckets {
    // (owner of src, partition that needs it, src)
    let mut needs: Vec<(usize, usize, usize)> = (0..graph.num_edges())
        .into_par_iter()
        .filter_map(|e| {
            let (s, t) = (graph.src[e], graph.dst[e]);
            let (ps, pt) = (owner[s], owner[t]);
            (ps != pt).then_some((ps, pt, s))
        })
        .collect();
    needs.par_sort_unstable();
    needs.dedup();

    let mut to = vec![vec![Vec::new(); p]; p];
    let mut is_sent = vec![false; graph.num_nodes];
    for &(i, j, s) in &needs {
        to[i][j].push(s);
        is_sent[s] = true;
    }
    let mut from = vec![vec![Vec::new(); p]; p];
    for i in 0..p {
        for j in 0..p {
            from[j][i] = to[i][j].clone();
        }
    }
    let mut pure = vec![Vec::new(); p];
    for (n, &o) in owner.iter().enumerate() {
        if !is_sent[n] {
            pure[o].push(n);
        }
    }
    Buckets {
        pure,
        to,
        from,
        owner,
    }
}

/// One partition's share of the atom graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomPartition {
    pub id: usize,
    /// `[PURE | TO[0..p] | FROM[0..p]]` as global node ids.
    pub node_array: Vec<usize>,
    /// `markers[0] = 0`, `markers[1] = |PURE|`, then the end of each TO
    /// block and of each FROM block: `2 + 2p` entries.
    pub markers: Vec<usize>,
    /// Global id to canonical local row.
    pub global_to_local: HashMap<usize, usize>,
    /// `(duplicate row, canonical row)` for nodes sent to several partitions.
    pub duplicates: Vec<(usize, usize)>,
    /// Canonical rows of owned nodes, in ascending global id.
    pub owned_rows: Vec<usize>,
    /// Owned edges (destination owned here), in global edge order, with
    /// endpoints as local rows.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_global: Vec<usize>,
    /// Indices into the owned edge list whose source is a border node.
    pub border_edges: Vec<usize>,
}

impl AtomPartition {
    pub fn p(&self) -> usize {
        (self.markers.len() - 2) / 2
    }

    pub fn num_rows(&self) -> usize {
        self.node_array.len()
    }

    pub fn local_to_global(&self, row: usize) -> usize {
        self.node_array[row]
    }

    pub fn pure_span(&self) -> Range<usize> {
        0..self.markers[1]
    }

    /// Rows sent to partition `j`.
    pub fn to_span(&self, j: usize) -> Range<usize> {
        self.markers[1 + j]..self.markers[2 + j]
    }

    /// Rows received from partition `k`.
    pub fn from_span(&self, k: usize) -> Range<usize> {
        let p = self.p();
        self.markers[1 + p + k]..self.markers[2 + p + k]
    }

    /// Rows holding owned nodes (PURE and TO blocks).
    pub fn owned_region(&self) -> Range<usize> {
        0..self.markers[1 + self.p()]
    }

    pub fn border_region(&self) -> Range<usize> {
        self.markers[1 + self.p()]..self.num_rows()
    }

    /// Distinct global ids present locally (G′ᵢ).
    pub fn expanded_nodes(&self) -> Vec<usize> {
        let mut v = self.node_array.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn owned_nodes(&self) -> Vec<usize> {
        self.owned_rows.iter().map(|&r| self.node_array[r]).collect()
    }

    /// Border nodes (Hᵢ): present locally but owned elsewhere.
    pub fn border_nodes(&self) -> Vec<usize> {
        let mut v = self.node_array[self.border_region()].to_vec();
        v.sort_unstable();
        v
    }

    pub fn num_edges(&self) -> usize {
        self.edge_global.len()
    }
}

/// Atom graph split into partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAtomGraph {
    pub rule: PartitionRule,
    pub buckets: Buckets,
    pub parts: Vec<AtomPartition>,
    pub num_nodes: usize,
    pub num_edges: usize,
}

impl PartitionedAtomGraph {
    pub fn p(&self) -> usize {
        self.parts.len()
    }

    pub fn owner(&self, node: usize) -> usize {
        self.buckets.owner[node]
    }

    /// JSON dump of node arrays, markers and bucket tables.
    pub fn plan_json(&self) -> String {
        #[derive(Serialize)]
        struct PartDump<'a> {
            id: usize,
            node_array: &'a [usize],
            markers: &'a [usize],
        }
        #[derive(Serialize)]
        struct PlanDump<'a> {
            p: usize,
            axis: usize,
            boundaries: &'a [f64],
            partitions: Vec<PartDump<'a>>,
            buckets: &'a Buckets,
        }
        let dump = PlanDump {
            p: self.p(),
            axis: self.rule.axis,
            boundaries: &self.rule.boundaries,
            partitions: self
                .parts
                .iter()
                .map(|part| PartDump {
                    id: part.id,
                    node_array: &part.node_array,
                    markers: &part.markers,
                })
                .collect(),
            buckets: &self.buckets,
        };
        serde_json::to_string_pretty(&dump).expect("plan serializes")
    }
}

pub fn build_atom_partitions(graph: &AtomGraph, system: &AtomicSystem, rule: &PartitionRule) -> Result<PartitionedAtomGraph> {
    let buckets = assign_to_partitions(graph, system, rule)?;
    Ok(partitions_from_buckets(graph, rule.clone(), buckets))
}

pub(crate) fn partitions_from_buckets(graph: &AtomGraph, rule: PartitionRule, buckets: Buckets) -> PartitionedAtomGraph {
    let p = buckets.p();
    let incoming = graph.incoming_offsets();
    let parts = (0..p)
        .into_par_iter()
        .map(|i| build_one(graph, &buckets, &incoming, i))
        .collect();
    PartitionedAtomGraph {
        rule,
        buckets,
        parts,
        num_nodes: graph.num_nodes,
        num_edges: graph.num_edges(),
    }
}

fn build_one(graph: &AtomGraph, buckets: &Buckets, incoming: &[usize], i: usize) -> AtomPartition {
    let p = buckets.p();
    let mut node_array = Vec::new();
    let mut markers = Vec::with_capacity(2 + 2 * p);
    markers.push(0);
    node_array.extend_from_slice(&buckets.pure[i]);
    markers.push(node_array.len());
    for j in 0..p {
        node_array.extend_from_slice(&buckets.to[i][j]);
        markers.push(node_array.len());
    }
    for k in 0..p {
        node_array.extend_from_slice(&buckets.from[i][k]);
        markers.push(node_array.len());
    }

    let mut global_to_local = HashMap::with_capacity(node_array.len());
    let mut duplicates = Vec::new();
    for (row, &g) in node_array.iter().enumerate() {
        match global_to_local.get(&g) {
            Some(&canon) => duplicates.push((row, canon)),
            None => {
                global_to_local.insert(g, row);
            }
        }
    }
    let owned_end = markers[1 + p];
    let mut owned: Vec<(usize, usize)> = (0..owned_end)
        .filter(|&r| global_to_local[&node_array[r]] == r)
        .map(|r| (node_array[r], r))
        .collect();
    owned.sort_unstable();
    let owned_rows: Vec<usize> = owned.iter().map(|&(_, r)| r).collect();

    let mut edge_src = Vec::new();
    let mut edge_dst = Vec::new();
    let mut edge_global = Vec::new();
    let mut border_edges = Vec::new();
    for &(t, t_row) in &owned {
        for e in incoming[t]..incoming[t + 1] {
            let s = graph.src[e];
            if buckets.owner[s] != i {
                border_edges.push(edge_global.len());
            }
            edge_src.push(global_to_local[&s]);
            edge_dst.push(t_row);
            edge_global.push(e);
        }
    }
    AtomPartition {
        id: i,
        node_array,
        markers,
        global_to_local,
        duplicates,
        owned_rows,
        edge_src,
        edge_dst,
        edge_global,
        border_edges,
    }
}
