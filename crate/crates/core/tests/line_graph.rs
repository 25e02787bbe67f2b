mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use slabgraph::linegraph::{brute_force_line_graph, build_partitioned_line_graph, serial_line_graph};
use slabgraph::neighborlist::build_neighbor_list;
use slabgraph::partitioner::{build_atom_partitions, choose_partition_rule, PartitionOptions};

use common::{random_pbc, random_system, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn union_matches_triple_enumeration(
        seed in any::<u64>(),
        n in 10usize..250,
        p in 1usize..5,
        r in 1.5f64..3.5,
        tau in prop_oneof![Just(0.0), 0.0f64..0.3],
    ) {
        let mut g = rng(seed);
        let pbc = random_pbc(&mut g);
        let sys = random_system(&mut g, n, 0.07, pbc);
        let graph = build_neighbor_list(&sys, 4.0, 0).unwrap();
        let opts = PartitionOptions { allow_thin_slabs: true, ..PartitionOptions::default() };
        let rule = choose_partition_rule(&sys, p, &opts).unwrap();
        let parts = build_atom_partitions(&graph, &sys, &rule).unwrap();
        let r = r.min(4.0 - tau);
        let lines = build_partitioned_line_graph(&graph, &parts, r, tau).unwrap();

        let brute = brute_force_line_graph(&graph, r, tau).unwrap();
        let mut union = Vec::new();
        for part in &lines.parts {
            union.extend(part.global_line_edges());
        }
        let total = union.len();
        union.sort_unstable();
        // No line edge is realized twice.
        let distinct: BTreeSet<_> = union.iter().copied().collect();
        prop_assert_eq!(distinct.len(), total);
        let mut expected = brute.clone();
        expected.sort_unstable();
        prop_assert_eq!(&union, &expected);
        let mut serial = serial_line_graph(&graph, r, tau);
        serial.sort_unstable();
        prop_assert_eq!(&serial, &expected);
        common::check_bond_buckets(&graph, &parts.buckets.owner, &lines, r + tau).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn water_molecule_angles() {
    let sys = slabgraph::AtomicSystem::load_xyz(common::fixture("water.xyz")).unwrap();
    let graph = build_neighbor_list(&sys, 2.0, 0).unwrap();
    let brute = brute_force_line_graph(&graph, 1.5, 0.0).unwrap();
    // Two O-H bonds in each direction; the H-O-H angle gives H→O→H line edges.
    assert!(!brute.is_empty());
    for &(a, b) in &brute {
        assert_eq!(graph.dst[a], graph.src[b]);
    }
}
