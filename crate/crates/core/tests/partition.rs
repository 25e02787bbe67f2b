mod common;

use proptest::prelude::*;
use rand::Rng;

use slabgraph::engine::{Block, DistOptions, Distributed, TransferPlan};
use slabgraph::neighborlist::build_neighbor_list;
use slabgraph::partitioner::{build_atom_partitions, choose_partition_rule, BoundaryMode, PartitionOptions};
use slabgraph::Error;

use common::{check_partition_structure, random_pbc, random_system, rng};

fn thin() -> PartitionOptions {
    PartitionOptions {
        allow_thin_slabs: true,
        ..PartitionOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn structure_matches_first_principles(
        seed in any::<u64>(),
        n in 10usize..300,
        p in 1usize..9,
        cutoff in 1.5f64..5.0,
        equal_width in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let pbc = random_pbc(&mut r);
        let sys = random_system(&mut r, n, 0.07, pbc);
        let options = PartitionOptions {
            mode: if equal_width { BoundaryMode::EqualWidth } else { BoundaryMode::Quantile },
            allow_thin_slabs: true,
        };
        let graph = build_neighbor_list(&sys, cutoff, 0).unwrap();
        let rule = choose_partition_rule(&sys, p, &options).unwrap();
        let parts = build_atom_partitions(&graph, &sys, &rule).unwrap();
        check_partition_structure(&sys, &graph, &parts).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn transfers_are_symmetric_and_idempotent(seed in any::<u64>(), n in 10usize..200, p in 1usize..6) {
        let mut r = rng(seed);
        let sys = random_system(&mut r, n, 0.07, [true; 3]);
        let opts = DistOptions { partition: thin(), ..DistOptions::default() };
        let dist = Distributed::create_with(&sys, 3.5, None, p, 0, &opts).unwrap();
        dist.atom_plan.check_symmetry().unwrap();
        let feats: Vec<f64> = (0..n * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut once = dist.distribute_node_features(&feats, 2).unwrap();
        dist.atom_transfer(&mut once).unwrap();
        let mut twice = once.clone();
        dist.atom_transfer(&mut twice).unwrap();
        prop_assert_eq!(&once, &twice);
        // After a transfer every local row holds its global node's value.
        for (i, part) in dist.atoms.parts.iter().enumerate() {
            for row in 0..part.num_rows() {
                let g = part.node_array[row];
                prop_assert_eq!(once.blocks[i].row(row), &feats[2 * g..2 * g + 2]);
            }
        }
    }

    #[test]
    fn reverse_transfer_is_the_adjoint(seed in any::<u64>(), n in 10usize..150, p in 2usize..6) {
        let mut r = rng(seed);
        let sys = random_system(&mut r, n, 0.07, [true; 3]);
        let graph = build_neighbor_list(&sys, 3.5, 0).unwrap();
        let rule = choose_partition_rule(&sys, p, &thin()).unwrap();
        let parts = build_atom_partitions(&graph, &sys, &rule).unwrap();
        let plan = TransferPlan::from_atoms(&parts);
        let random_blocks = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Block> {
            parts.parts.iter().map(|q| {
                let mut b = Block::zeros(q.num_rows(), 1);
                for row in 0..q.num_rows() { b.row_mut(row)[0] = r.gen_range(-1.0..1.0); }
                b
            }).collect()
        };
        let dot = |a: &[Block], b: &[Block]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x.data.iter().zip(&y.data).map(|(u, v)| u * v).sum::<f64>()).sum()
        };
        // Restrict inputs of the forward map to canonical owned rows.
        let mut x = random_blocks(&mut r);
        for (b, q) in x.iter_mut().zip(&parts.parts) {
            let keep: std::collections::HashSet<usize> = q.owned_rows.iter().copied().collect();
            for row in 0..q.num_rows() {
                if !keep.contains(&row) { b.row_mut(row)[0] = 0.0; }
            }
        }
        let y = random_blocks(&mut r);
        let mut fx = x.clone();
        plan.forward(&mut fx.iter_mut().collect::<Vec<_>>()).unwrap();
        let mut ry = y.clone();
        plan.reverse(&mut ry.iter_mut().collect::<Vec<_>>()).unwrap();
        let mut ry_owned = ry.clone();
        for (b, q) in ry_owned.iter_mut().zip(&parts.parts) {
            let keep: std::collections::HashSet<usize> = q.owned_rows.iter().copied().collect();
            for row in 0..q.num_rows() {
                if !keep.contains(&row) { b.row_mut(row)[0] = 0.0; }
            }
        }
        let lhs = dot(&fx, &y);
        let rhs = dot(&x, &ry_owned);
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }
}

#[test]
fn narrow_slabs_are_rejected_unless_allowed() {
    let sys = common::quartz().make_supercell([2, 1, 1]).unwrap();
    let err = Distributed::create_distributed(&sys, 4.0, None, 4, 0).unwrap_err();
    assert!(matches!(err, Error::PartitionWidth { .. }), "{err}");
    let opts = DistOptions { partition: thin(), ..DistOptions::default() };
    Distributed::create_with(&sys, 4.0, None, 4, 0, &opts).unwrap();
}

#[test]
fn partition_count_above_atom_count_is_invalid() {
    let sys = common::quartz();
    assert!(matches!(
        choose_partition_rule(&sys, 10, &PartitionOptions::default()),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn quartz_plan_matches_golden_file() {
    let sys = common::quartz().make_supercell([3, 1, 1]).unwrap();
    let graph = build_neighbor_list(&sys, 3.0, 0).unwrap();
    let rule = choose_partition_rule(&sys, 3, &thin()).unwrap();
    let parts = build_atom_partitions(&graph, &sys, &rule).unwrap();
    check_partition_structure(&sys, &graph, &parts).unwrap();
    let golden = std::fs::read_to_string(common::fixture("quartz_3x1x1_p3_plan.json")).unwrap();
    assert_eq!(parts.plan_json().trim_end(), golden.trim_end());
}
