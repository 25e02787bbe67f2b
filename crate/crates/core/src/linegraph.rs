//! Distributed three-body (bond) line graphs.
//!
//! Bonds are atom-graph edges no longer than `r + τ`. A bond is owned by the
//! partition that owns its source atom, and a line edge `e → e′` (with
//! `dst(e) == src(e′)`) is realized by the owner of `e′`, the bond that
//! aggregates the message. Bonds entering a partition from outside are its
//! border bonds and arrive through the FROM buckets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neighborlist::AtomGraph;
use crate::partitioner::PartitionedAtomGraph;

/// Atom count above which the brute-force line graph refuses to run.
pub const BRUTE_FORCE_MAX_ATOMS: usize = 2000;

/// Directed line edge `(e, e′)` between global bond (edge) ids.
pub type LineEdge = (usize, usize);

/// Per-partition edge tables: atom id → bonds with that atom as source,
/// sorted by `(dst, offset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTable {
    pub tables: Vec<BTreeMap<usize, Vec<usize>>>,
}

/// PURE/TO/FROM buckets over bond (global edge) ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BondBuckets {
    pub pure: Vec<Vec<usize>>,
    pub to: Vec<Vec<Vec<usize>>>,
    pub from: Vec<Vec<Vec<usize>>>,
}

/// True when `b` retraces `a` back to its own source image.
#[inline]
pub fn is_reverse(graph: &AtomGraph, a: usize, b: usize) -> bool {
    let (oa, ob) = (graph.image_offset[a], graph.image_offset[b]);
    graph.dst[b] == graph.src[a] && ob == [-oa[0], -oa[1], -oa[2]]
}

fn check_range(graph: &AtomGraph, r: f64, tau: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("three-body cutoff must be positive, got {r}")));
    }
    if r > graph.cutoff {
        return Err(Error::invalid(format!(
            "three-body cutoff {r} exceeds the atom-graph cutoff {}",
            graph.cutoff
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be >= 0, got {tau}")));
    }
    Ok(())
}

fn outgoing_lists(graph: &AtomGraph, keep: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); graph.num_nodes];
    for e in 0..graph.num_edges() {
        if keep(e) {
            out[graph.src[e]].push(e);
        }
    }
    out
}

/// Node set of each partition closed under two outgoing hops from its owned
/// atoms.
pub fn build_two_hop_closure(parts: &PartitionedAtomGraph, graph: &AtomGraph) -> Vec<Vec<usize>> {
    let out = outgoing_lists(graph, |_| true);
    parts
        .parts
        .par_iter()
        .map(|part| {
            let mut seen = vec![false; graph.num_nodes];
            let mut frontier = part.owned_nodes();
            for &v in &frontier {
                seen[v] = true;
            }
            for _ in 0..2 {
                let mut next = Vec::new();
                for &v in &frontier {
                    for &e in &out[v] {
                        let w = graph.dst[e];
                        if !seen[w] {
                            seen[w] = true;
                            next.push(w);
                        }
                    }
                }
                frontier = next;
            }
            (0..graph.num_nodes).filter(|&v| seen[v]).collect()
        })
        .collect()
}

/// Edge tables and bond buckets for every partition.
pub fn build_edge_tables(
    graph: &AtomGraph,
    closure: &[Vec<usize>],
    parts: &PartitionedAtomGraph,
    r: f64,
    tau: f64,
) -> Result<(EdgeTable, BondBuckets)> {
    check_range(graph, r, tau)?;
    let p = parts.p();
    if closure.len() != p {
        return Err(Error::Shape {
            expected: format!("{p} closures"),
            found: format!("{}", closure.len()),
        });
    }
    let owner = &parts.buckets.owner;
    let limit = r + tau;
    let bonds: Vec<usize> = (0..graph.num_edges())
        .filter(|&e| graph.distance[e] <= limit)
        .collect();

    struct Local {
        table: BTreeMap<usize, Vec<usize>>,
        pure: Vec<usize>,
        from: Vec<Vec<usize>>,
        to_me: Vec<Vec<usize>>,
    }
    let locals: Vec<Local> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut inside = vec![false; graph.num_nodes];
            for &v in &closure[i] {
                inside[v] = true;
            }
            let mut table: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            let mut pure = Vec::new();
            let mut from = vec![Vec::new(); p];
            // Bonds owned elsewhere that this partition receives, keyed by sender.
            let mut to_me = vec![Vec::new(); p];
            // Border-destination pass: bonds pointing into this partition.
            for &e in &bonds {
                let (s, t) = (graph.src[e], graph.dst[e]);
                if owner[t] != i || !inside[s] {
                    continue;
                }
                table.entry(s).or_default().push(e);
                if owner[s] != i {
                    from[owner[s]].push(e);
                    to_me[owner[s]].push(e);
                }
            }
            // Pure-edge pass: bonds owned here.
            for &e in &bonds {
                let (s, t) = (graph.src[e], graph.dst[e]);
                if owner[s] != i || !inside[t] {
                    continue;
                }
                let list = table.entry(s).or_default();
                // Bonds already listed by the first pass are not repeated.
                if owner[t] != i {
                    list.push(e);
                }
                if owner[t] == i {
                    pure.push(e);
                }
            }
            for list in table.values_mut() {
                list.sort_unstable();
                list.dedup();
            }
            Local {
                table,
                pure,
                from,
                to_me,
            }
        })
        .collect();

    let mut tables = Vec::with_capacity(p);
    let mut pure = Vec::with_capacity(p);
    let mut from = Vec::with_capacity(p);
    let mut to = vec![vec![Vec::new(); p]; p];
    for (j, local) in locals.into_iter().enumerate() {
        for (i, bonds_from_i) in local.to_me.into_iter().enumerate() {
            to[i][j] = bonds_from_i;
        }
        tables.push(local.table);
        pure.push(local.pure);
        from.push(local.from);
    }
    Ok((EdgeTable { tables }, BondBuckets { pure, to, from }))
}

/// One partition's share of the line graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BondPartition {
    pub id: usize,
    /// `[PURE | TO[0..p] | FROM[0..p]]` as global bond (edge) ids.
    pub bond_array: Vec<usize>,
    pub markers: Vec<usize>,
    pub global_to_local: HashMap<usize, usize>,
    /// Rows of owned bonds, ascending global id.
    pub owned_rows: Vec<usize>,
    /// Local line edges sorted by `(global e′, global e)`.
    pub line_src: Vec<usize>,
    pub line_dst: Vec<usize>,
}

impl BondPartition {
    pub fn p(&self) -> usize {
        (self.markers.len() - 2) / 2
    }

    pub fn num_rows(&self) -> usize {
        self.bond_array.len()
    }

    pub fn to_span(&self, j: usize) -> Range<usize> {
        self.markers[1 + j]..self.markers[2 + j]
    }

    pub fn from_span(&self, k: usize) -> Range<usize> {
        let p = self.p();
        self.markers[1 + p + k]..self.markers[2 + p + k]
    }

    pub fn owned_region(&self) -> Range<usize> {
        0..self.markers[1 + self.p()]
    }

    /// Line edges as global `(e, e′)` pairs.
    pub fn global_line_edges(&self) -> Vec<LineEdge> {
        self.line_src
            .iter()
            .zip(&self.line_dst)
            .map(|(&a, &b)| (self.bond_array[a], self.bond_array[b]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedLineGraph {
    pub buckets: BondBuckets,
    pub parts: Vec<BondPartition>,
    pub r: f64,
    pub tau: f64,
}

impl PartitionedLineGraph {
    pub fn p(&self) -> usize {
        self.parts.len()
    }

    /// Debug dump: `partition,bond_e,bond_e_prime`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("partition,bond_e,bond_e_prime\n");
        for part in &self.parts {
            for (e, f) in part.global_line_edges() {
                let _ = writeln!(out, "{},{},{}", part.id, e, f);
            }
        }
        out
    }
}

/// Localize bonds and draw line edges for every partition.
pub fn build_line_graph_partitions(
    graph: &AtomGraph,
    tables: &EdgeTable,
    buckets: &BondBuckets,
    r: f64,
    tau: f64,
) -> Result<PartitionedLineGraph> {
    let p = buckets.pure.len();
    let parts = (0..p)
        .into_par_iter()
        .map(|i| localize(graph, &tables.tables[i], buckets, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PartitionedLineGraph {
        buckets: buckets.clone(),
        parts,
        r,
        tau,
    })
}

fn localize(
    graph: &AtomGraph,
    table: &BTreeMap<usize, Vec<usize>>,
    buckets: &BondBuckets,
    i: usize,
) -> Result<BondPartition> {
    let p = buckets.pure.len();
    let mut bond_array = Vec::new();
    let mut markers = vec![0];
    bond_array.extend_from_slice(&buckets.pure[i]);
    markers.push(bond_array.len());
    for j in 0..p {
        bond_array.extend_from_slice(&buckets.to[i][j]);
        markers.push(bond_array.len());
    }
    for k in 0..p {
        bond_array.extend_from_slice(&buckets.from[i][k]);
        markers.push(bond_array.len());
    }
    let mut global_to_local = HashMap::with_capacity(bond_array.len());
    for (row, &b) in bond_array.iter().enumerate() {
        if global_to_local.insert(b, row).is_some() {
            return Err(Error::Consistency(format!(
                "bond {b} listed twice in partition {i}"
            )));
        }
    }
    let owned_end = markers[1 + p];
    let mut owned: Vec<(usize, usize)> = (0..owned_end).map(|r| (bond_array[r], r)).collect();
    owned.sort_unstable();
    let owned_rows = owned.into_iter().map(|(_, r)| r).collect();

    let mut lines: Vec<(usize, usize)> = Vec::new();
    for list in table.values() {
        for &e in list {
            let Some(next) = table.get(&graph.dst[e]) else {
                continue;
            };
            for &f in next {
                if needs_in_line(graph, &global_to_local, owned_end, e, f) {
                    lines.push((f, e));
                }
            }
        }
    }
    lines.sort_unstable();
    let mut line_src = Vec::with_capacity(lines.len());
    let mut line_dst = Vec::with_capacity(lines.len());
    for (f, e) in lines {
        let dangling = || Error::Consistency(format!("partition {i}: line edge references unknown bond"));
        line_src.push(*global_to_local.get(&e).ok_or_else(dangling)?);
        line_dst.push(*global_to_local.get(&f).ok_or_else(dangling)?);
    }
    Ok(BondPartition {
        id: i,
        bond_array,
        markers,
        global_to_local,
        owned_rows,
        line_src,
        line_dst,
    })
}

/// `e′` receives a line edge from `e` here when it is owned by this
/// partition and does not retrace `e`.
fn needs_in_line(
    graph: &AtomGraph,
    global_to_local: &HashMap<usize, usize>,
    owned_end: usize,
    e: usize,
    e_next: usize,
) -> bool {
    if is_reverse(graph, e, e_next) {
        return false;
    }
    matches!(global_to_local.get(&e_next), Some(&row) if row < owned_end)
}

/// Single-partition line graph, sorted by `(e′, e)`.
pub fn serial_line_graph(graph: &AtomGraph, r: f64, tau: f64) -> Vec<LineEdge> {
    let limit = r + tau;
    let out = outgoing_lists(graph, |e| graph.distance[e] <= limit);
    let mut lines = Vec::new();
    for e in 0..graph.num_edges() {
        if graph.distance[e] > limit {
            continue;
        }
        for &f in &out[graph.dst[e]] {
            if !is_reverse(graph, e, f) {
                lines.push((e, f));
            }
        }
    }
    lines.sort_unstable_by_key(|&(e, f)| (f, e));
    lines
}

/// Triple enumeration over every center atom: all bonds into it times all
/// bonds out of it, minus exact reversals. Sorted by `(e′, e)`.
pub fn brute_force_line_graph(graph: &AtomGraph, r: f64, tau: f64) -> Result<Vec<LineEdge>> {
    if graph.num_nodes > BRUTE_FORCE_MAX_ATOMS {
        return Err(Error::TooManyAtoms {
            atoms: graph.num_nodes,
            limit: BRUTE_FORCE_MAX_ATOMS,
        });
    }
    let limit = r + tau;
    let bonds: Vec<usize> = (0..graph.num_edges())
        .filter(|&e| graph.distance[e] <= limit)
        .collect();
    let mut lines = Vec::new();
    for center in 0..graph.num_nodes {
        let into: Vec<usize> = bonds.iter().copied().filter(|&e| graph.dst[e] == center).collect();
        let out_of: Vec<usize> = bonds.iter().copied().filter(|&e| graph.src[e] == center).collect();
        for &e in &into {
            for &f in &out_of {
                let retrace = graph.dst[f] == graph.src[e]
                    && (0..3).all(|k| graph.image_offset[f][k] == -graph.image_offset[e][k]);
                if !retrace {
                    lines.push((e, f));
                }
            }
        }
    }
    lines.sort_unstable_by_key(|&(e, f)| (f, e));
    Ok(lines)
}

/// Full distributed construction: closure, edge tables, localization.
pub fn build_partitioned_line_graph(
    graph: &AtomGraph,
    parts: &PartitionedAtomGraph,
    r: f64,
    tau: f64,
) -> Result<PartitionedLineGraph> {
    let closure = build_two_hop_closure(parts, graph);
    let (tables, buckets) = build_edge_tables(graph, &closure, parts, r, tau)?;
    build_line_graph_partitions(graph, &tables, &buckets, r, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;
    use crate::neighborlist::build_neighbor_list;
    use crate::partitioner::{build_atom_partitions, choose_partition_rule, PartitionOptions, PartitionRule};
    use crate::system::AtomicSystem;

    fn open(positions: Vec<[f64; 3]>, species: Vec<u8>) -> AtomicSystem {
        AtomicSystem::new(positions, [[0.0; 3]; 3], species, [false; 3]).unwrap()
    }

    fn chain(n: usize) -> AtomicSystem {
        open((0..n).map(|k| [1.0 + k as f64, 0.0, 0.0]).collect(), vec![6; n])
    }

    fn water() -> AtomicSystem {
        open(
            vec![[10.0, 10.0, 10.0], [10.9572, 10.0, 10.0], [9.7601, 10.9266, 10.0]],
            vec![8, 1, 1],
        )
    }

    fn wall_rule(system: &AtomicSystem, walls_x: &[f64]) -> PartitionRule {
        let mut rule = choose_partition_rule(system, 1, &PartitionOptions::default()).unwrap();
        rule.axis = 0;
        let inv = geometry::inverse(&rule.lattice).unwrap();
        let mut b = vec![0.0];
        for &x in walls_x {
            b.push(geometry::vec_mat([x, 0.0, 0.0], &inv)[0]);
        }
        b.push(1.0);
        rule.p = b.len() - 1;
        rule.boundaries = b;
        rule.allow_thin_slabs = true;
        rule
    }

    fn edge_id(g: &AtomGraph, s: usize, t: usize) -> usize {
        (0..g.num_edges()).find(|&e| g.src[e] == s && g.dst[e] == t).unwrap()
    }

    #[test]
    fn two_hop_closure_on_chain() {
        let sys = chain(5);
        let g = build_neighbor_list(&sys, 1.5, 1).unwrap();
        let parts = build_atom_partitions(&g, &sys, &wall_rule(&sys, &[2.5])).unwrap();
        let closure = build_two_hop_closure(&parts, &g);
        assert_eq!(closure[0], vec![0, 1, 2, 3]);
        for (c, part) in closure.iter().zip(&parts.parts) {
            for v in part.expanded_nodes() {
                assert!(c.contains(&v));
            }
        }
        let single = build_atom_partitions(&g, &sys, &wall_rule(&sys, &[])).unwrap();
        assert_eq!(build_two_hop_closure(&single, &g)[0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn water_tables_and_lines() {
        let sys = water();
        let g = build_neighbor_list(&sys, 2.0, 1).unwrap();
        let parts = build_atom_partitions(&g, &sys, &wall_rule(&sys, &[])).unwrap();
        let closure = build_two_hop_closure(&parts, &g);
        let (tables, buckets) = build_edge_tables(&g, &closure, &parts, 1.2, 0.0).unwrap();
        let t = &tables.tables[0];
        assert_eq!(t[&0].len(), 2);
        assert_eq!(t[&1].len(), 1);
        assert_eq!(t[&2].len(), 1);
        assert_eq!(buckets.pure[0].len(), 4);

        let lg = build_line_graph_partitions(&g, &tables, &buckets, 1.2, 0.0).unwrap();
        let lines = lg.parts[0].global_line_edges();
        // H1->O->H2 and H2->O->H1; retracing pairs are excluded.
        let expected = vec![
            (edge_id(&g, 2, 0), edge_id(&g, 0, 1)),
            (edge_id(&g, 1, 0), edge_id(&g, 0, 2)),
        ];
        let mut sorted = expected.clone();
        sorted.sort_unstable_by_key(|&(e, f)| (f, e));
        assert_eq!(lines, sorted);
        assert_eq!(brute_force_line_graph(&g, 1.2, 0.0).unwrap(), sorted);
        assert_eq!(serial_line_graph(&g, 1.2, 0.0), sorted);
    }

    #[test]
    fn triangle_has_six_line_edges() {
        let sys = open(
            vec![[5.0, 5.0, 5.0], [6.0, 5.0, 5.0], [5.5, 5.8660254, 5.0]],
            vec![6, 6, 6],
        );
        let g = build_neighbor_list(&sys, 1.2, 1).unwrap();
        assert_eq!(g.num_edges(), 6);
        let lines = serial_line_graph(&g, 1.2, 0.0);
        assert_eq!(lines.len(), 6);
        assert_eq!(lines, brute_force_line_graph(&g, 1.2, 0.0).unwrap());
    }

    #[test]
    fn empty_and_isolated_cases() {
        let sys = open(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![1, 1]);
        let g = build_neighbor_list(&sys, 1.5, 1).unwrap();
        // A single bond pair only retraces itself.
        assert!(serial_line_graph(&g, 1.5, 0.0).is_empty());
        // Nothing within r + τ.
        assert!(serial_line_graph(&g, 0.5, 0.1).is_empty());
        let parts = build_atom_partitions(&g, &sys, &wall_rule(&sys, &[])).unwrap();
        let closure = build_two_hop_closure(&parts, &g);
        let (tables, _) = build_edge_tables(&g, &closure, &parts, 0.5, 0.0).unwrap();
        assert!(tables.tables[0].is_empty());
        assert!(build_edge_tables(&g, &closure, &parts, 2.0, 0.0).is_err());
    }

    #[test]
    fn chain_border_bond_from_left_partition() {
        let sys = chain(4);
        let g = build_neighbor_list(&sys, 1.5, 1).unwrap();
        let parts = build_atom_partitions(&g, &sys, &wall_rule(&sys, &[2.5])).unwrap();
        let lg = build_partitioned_line_graph(&g, &parts, 1.5, 0.0).unwrap();
        let bc = edge_id(&g, 1, 2);
        assert_eq!(lg.buckets.from[1][0], vec![bc]);
        assert_eq!(lg.buckets.to[0][1], vec![bc]);
        let cb = edge_id(&g, 2, 1);
        assert_eq!(lg.buckets.from[0][1], vec![cb]);

        let mut union: Vec<LineEdge> = lg.parts.iter().flat_map(|p| p.global_line_edges()).collect();
        union.sort_unstable_by_key(|&(e, f)| (f, e));
        assert_eq!(union, serial_line_graph(&g, 1.5, 0.0));
        let csv = lg.to_csv();
        assert!(csv.starts_with("partition,bond_e,bond_e_prime\n"));
        assert_eq!(csv.lines().count(), union.len() + 1);
    }
}
