#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slabgraph::geometry::{Mat3, Vec3};
use slabgraph::neighborlist::AtomGraph;
use slabgraph::partitioner::PartitionedAtomGraph;
use slabgraph::AtomicSystem;

pub fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn quartz() -> AtomicSystem {
    AtomicSystem::load_xyz(fixture("quartz.xyz")).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random triclinic cell holding `n` atoms at roughly `density` atoms/Å³,
/// placed on a jittered grid so no two atoms come closer than ~0.4 of the
/// grid spacing.
pub fn random_system(rng: &mut impl Rng, n: usize, density: f64, pbc: [bool; 3]) -> AtomicSystem {
    let volume = n as f64 / density;
    let aspect: Vec3 = [rng.gen_range(0.6..1.6), rng.gen_range(0.6..1.6), rng.gen_range(0.6..1.6)];
    let s = (volume / (aspect[0] * aspect[1] * aspect[2])).cbrt();
    let len = aspect.map(|a| a * s);
    let shear = 0.25;
    let lattice: Mat3 = [
        [len[0], 0.0, 0.0],
        [rng.gen_range(-shear..shear) * len[1], len[1], 0.0],
        [
            rng.gen_range(-shear..shear) * len[2],
            rng.gen_range(-shear..shear) * len[2],
            len[2],
        ],
    ];
    // Grid with at least n cells, proportioned like the cell.
    let k = (n as f64 / (aspect[0] * aspect[1] * aspect[2])).cbrt();
    let mut m = aspect.map(|a| ((a * k).ceil() as usize).max(1));
    while m[0] * m[1] * m[2] < n {
        let a = (0..3).min_by_key(|&a| m[a]).unwrap();
        m[a] += 1;
    }
    let mut cells: Vec<usize> = (0..m[0] * m[1] * m[2]).collect();
    cells.shuffle(rng);
    let species_pool = [1u8, 6, 8, 14, 26];
    let mut positions = Vec::with_capacity(n);
    let mut species = Vec::with_capacity(n);
    for &c in &cells[..n] {
        let idx = [c % m[0], (c / m[0]) % m[1], c / (m[0] * m[1])];
        let frac: Vec3 = std::array::from_fn(|a| (idx[a] as f64 + 0.5 + rng.gen_range(-0.3..0.3)) / m[a] as f64);
        positions.push(frac_to_cart(frac, &lattice));
        species.push(*species_pool.choose(rng).unwrap());
    }
    AtomicSystem::new(positions, lattice, species, pbc).unwrap()
}

pub fn random_pbc(rng: &mut impl Rng) -> [bool; 3] {
    match rng.gen_range(0..4) {
        0 => [true; 3],
        1 => [false; 3],
        _ => [rng.gen(), rng.gen(), rng.gen()],
    }
}

pub fn frac_to_cart(f: Vec3, lattice: &Mat3) -> Vec3 {
    std::array::from_fn(|c| (0..3).map(|a| f[a] * lattice[a][c]).sum())
}

/// Fractional coordinates by Cramer's rule: solve `x = f · L`.
pub fn cart_to_frac(x: Vec3, lattice: &Mat3) -> Vec3 {
    let det3 = |m: &Mat3| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    // Columns of L^T are the lattice vectors.
    let lt: Mat3 = std::array::from_fn(|r| std::array::from_fn(|c| lattice[c][r]));
    let d = det3(&lt);
    std::array::from_fn(|a| {
        let mut m = lt;
        for r in 0..3 {
            m[r][a] = x[r];
        }
        det3(&m) / d
    })
}

pub fn edge_set(graph: &AtomGraph) -> BTreeSet<(usize, usize, [i32; 3])> {
    (0..graph.num_edges())
        .map(|e| (graph.dst[e], graph.src[e], graph.image_offset[e]))
        .collect()
}

/// Recompute every partition's node sets, buckets, node array, markers and
/// owned edges from the global graph and compare with `parts`.
pub fn check_partition_structure(
    system: &AtomicSystem,
    graph: &AtomGraph,
    parts: &PartitionedAtomGraph,
) -> Result<(), String> {
    let p = parts.p();
    let rule = &parts.rule;
    let n = system.len();
    // Ownership from the wall positions.
    let mut owner = vec![0usize; n];
    for (v, &x) in system.positions.iter().enumerate() {
        let f = cart_to_frac(x, &rule.lattice)[rule.axis];
        let f = f - f.floor();
        let slab = (0..p)
            .find(|&s| rule.boundaries[s] <= f && f < rule.boundaries[s + 1])
            .unwrap_or(p - 1);
        // Atoms sitting within rounding distance of a wall may go either way.
        let near_wall = rule.boundaries.iter().any(|&b| (f - b).abs() < 1e-12 || (f - 1.0 + b).abs() < 1e-12);
        if !near_wall && parts.buckets.owner[v] != slab {
            return Err(format!("atom {v} at fraction {f} owned by {} not {slab}", parts.buckets.owner[v]));
        }
        owner[v] = parts.buckets.owner[v];
    }
    if parts.num_edges != graph.num_edges() || parts.num_nodes != n {
        return Err("global counts differ".into());
    }
    let mut to = vec![vec![BTreeSet::new(); p]; p];
    for e in 0..graph.num_edges() {
        let (s, t) = (graph.src[e], graph.dst[e]);
        if owner[s] != owner[t] {
            to[owner[s]][owner[t]].insert(s);
        }
    }
    let mut total_owned = 0;
    for i in 0..p {
        let part = &parts.parts[i];
        let owned: Vec<usize> = (0..n).filter(|&v| owner[v] == i).collect();
        let owned_edges: Vec<usize> = (0..graph.num_edges()).filter(|&e| owner[graph.dst[e]] == i).collect();
        let mut expanded: BTreeSet<usize> = owned.iter().copied().collect();
        expanded.extend(owned_edges.iter().map(|&e| graph.src[e]));
        let border: Vec<usize> = expanded.iter().copied().filter(|&v| owner[v] != i).collect();
        let expanded: Vec<usize> = expanded.into_iter().collect();
        let sent: BTreeSet<usize> = (0..p).flat_map(|j| to[i][j].iter().copied()).collect();
        let pure: Vec<usize> = owned.iter().copied().filter(|v| !sent.contains(v)).collect();

        let mut array = pure.clone();
        let mut markers = vec![0, pure.len()];
        for j in 0..p {
            array.extend(to[i][j].iter().copied());
            markers.push(array.len());
        }
        for k in 0..p {
            array.extend(to[k][i].iter().copied());
            markers.push(array.len());
        }

        let ctx = |what: &str| format!("partition {i}/{p}: {what} differs");
        if part.owned_nodes() != owned {
            return Err(ctx("owned set"));
        }
        if part.expanded_nodes() != expanded {
            return Err(ctx("expanded node set"));
        }
        if part.border_nodes() != border {
            return Err(ctx("border node set"));
        }
        if part.node_array != array {
            return Err(ctx("node array"));
        }
        if part.markers != markers {
            return Err(ctx("markers"));
        }
        if part.edge_global != owned_edges {
            return Err(ctx("owned edge list"));
        }
        for (k, &e) in owned_edges.iter().enumerate() {
            let (rs, rd) = (part.edge_src[k], part.edge_dst[k]);
            if part.node_array[rs] != graph.src[e] || part.node_array[rd] != graph.dst[e] {
                return Err(ctx("local edge endpoints"));
            }
            if part.global_to_local[&graph.src[e]] != rs || part.global_to_local[&graph.dst[e]] != rd {
                return Err(ctx("canonical rows"));
            }
        }
        let border_sourced: Vec<usize> = (0..owned_edges.len())
            .filter(|&k| owner[graph.src[owned_edges[k]]] != i)
            .collect();
        if part.border_edges != border_sourced {
            return Err(ctx("border-sourced edges"));
        }
        // Every later copy of an owned node is a duplicate of its first row.
        let mut dups = Vec::new();
        for r in 0..markers[1 + p] {
            let first = array.iter().position(|&v| v == array[r]).unwrap();
            if first != r {
                dups.push((r, first));
            }
        }
        let mut got = part.duplicates.clone();
        got.sort_unstable();
        if got != dups {
            return Err(ctx("duplicate rows"));
        }
        total_owned += part.num_edges();
    }
    if total_owned != graph.num_edges() {
        return Err(format!("owned edges sum to {total_owned}, graph has {}", graph.num_edges()));
    }
    Ok(())
}

/// Bond-level buckets recomputed from ownership alone: TO/FROM pairs and PURE.
pub fn check_bond_buckets(
    graph: &slabgraph::neighborlist::AtomGraph,
    owner: &[usize],
    lines: &slabgraph::linegraph::PartitionedLineGraph,
    limit: f64,
) -> Result<(), String> {
    let p = lines.p();
    for i in 0..p {
        let mut pure = Vec::new();
        let mut from = vec![Vec::new(); p];
        for e in 0..graph.num_edges() {
            if graph.distance[e] > limit {
                continue;
            }
            let (s, t) = (owner[graph.src[e]], owner[graph.dst[e]]);
            if s == i && t == i {
                pure.push(e);
            }
            if t == i && s != i {
                from[s].push(e);
            }
        }
        if lines.buckets.pure[i] != pure {
            return Err(format!("pure bonds of partition {i}"));
        }
        for k in 0..p {
            if lines.buckets.from[i][k] != from[k] || lines.buckets.to[k][i] != from[k] {
                return Err(format!("bonds {k} -> {i}"));
            }
        }
    }
    Ok(())
}
