//! Distributed execution runtime.
//!
//! Each partition is a worker context holding dense feature blocks laid out
//! like its node (or bond) array. Between layers the blocks are exchanged by
//! span copies derived from the marker arrays: TO spans of the owner are
//! copied into FROM spans of the receiver. The reverse exchange, used for
//! gradients, scatter-adds FROM spans back into the owner's rows.

use std::ops::Range;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::linegraph::{build_partitioned_line_graph, PartitionedLineGraph};
use crate::neighborlist::{build_neighbor_list, AtomGraph};
use crate::partitioner::{build_atom_partitions, choose_partition_rule, PartitionOptions, PartitionedAtomGraph};
use crate::system::AtomicSystem;

/// Per-step timing categories, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    GraphCreation,
    FeatureCalculation,
    ForwardPass,
    BackwardPass,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::GraphCreation,
        Phase::FeatureCalculation,
        Phase::ForwardPass,
        Phase::BackwardPass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::GraphCreation => "Graph Creation",
            Phase::FeatureCalculation => "Feature Calculation",
            Phase::ForwardPass => "Forward Pass",
            Phase::BackwardPass => "Backward Pass",
        }
    }
}

/// Accumulated wall time per phase, in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub seconds: [f64; 4],
}

impl Timings {
    pub fn add(&mut self, phase: Phase, elapsed: Duration) {
        self.seconds[phase as usize] += elapsed.as_secs_f64();
    }

    pub fn get(&self, phase: Phase) -> f64 {
        self.seconds[phase as usize]
    }

    pub fn total(&self) -> f64 {
        self.seconds.iter().sum()
    }

    pub fn merge(&mut self, other: &Timings) {
        for (a, b) in self.seconds.iter_mut().zip(other.seconds) {
            *a += b;
        }
    }

    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(phase, start.elapsed());
        out
    }

    pub fn csv_header() -> String {
        Phase::ALL.map(Phase::name).join(",")
    }

    pub fn csv_values(&self) -> String {
        self.seconds.map(|s| format!("{s:.6e}")).join(",")
    }
}

/// Dense row-major block of `rows × width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Block {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Block {
            rows,
            width,
            data: vec![0.0; rows * width],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.width..(r + 1) * self.width]
    }

    fn span(&self, rows: &Range<usize>) -> &[f64] {
        &self.data[rows.start * self.width..rows.end * self.width]
    }

    fn span_mut(&mut self, rows: &Range<usize>) -> &mut [f64] {
        &mut self.data[rows.start * self.width..rows.end * self.width]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }
}

/// Span-copy plan between partitions for one graph level.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    /// `sends[i][j]`: rows of partition `i` copied to partition `j`.
    pub sends: Vec<Vec<Range<usize>>>,
    /// `recvs[j][i]`: rows of partition `j` receiving from partition `i`.
    pub recvs: Vec<Vec<Range<usize>>>,
    /// Per partition `(duplicate row, canonical row)`.
    pub duplicates: Vec<Vec<(usize, usize)>>,
    /// Per partition, canonical owned rows in ascending global id.
    pub owned_rows: Vec<Vec<usize>>,
    /// Per partition, local row → global id.
    pub globals: Vec<Vec<usize>>,
    /// Test hook: a pair whose copies are silently skipped.
    pub dropped: Option<(usize, usize)>,
}

impl TransferPlan {
    pub fn p(&self) -> usize {
        self.sends.len()
    }

    pub fn rows(&self, i: usize) -> usize {
        self.globals[i].len()
    }

    pub fn is_empty(&self) -> bool {
        self.sends.iter().flatten().all(|r| r.is_empty())
    }

    /// Rows sent per step, summed over all ordered pairs.
    pub fn rows_per_exchange(&self) -> usize {
        self.sends.iter().flatten().map(|r| r.len()).sum()
    }

    pub fn from_atoms(parts: &PartitionedAtomGraph) -> Self {
        let p = parts.p();
        let mut plan = TransferPlan {
            sends: Vec::with_capacity(p),
            recvs: Vec::with_capacity(p),
            duplicates: Vec::with_capacity(p),
            owned_rows: Vec::with_capacity(p),
            globals: Vec::with_capacity(p),
            dropped: None,
        };
        for part in &parts.parts {
            plan.sends.push((0..p).map(|j| part.to_span(j)).collect());
            plan.recvs.push((0..p).map(|k| part.from_span(k)).collect());
            plan.duplicates.push(part.duplicates.clone());
            plan.owned_rows.push(part.owned_rows.clone());
            plan.globals.push(part.node_array.clone());
        }
        plan
    }

    pub fn from_bonds(lines: &PartitionedLineGraph) -> Self {
        let p = lines.p();
        let mut plan = TransferPlan {
            sends: Vec::with_capacity(p),
            recvs: Vec::with_capacity(p),
            duplicates: vec![Vec::new(); p],
            owned_rows: Vec::with_capacity(p),
            globals: Vec::with_capacity(p),
            dropped: None,
        };
        for part in &lines.parts {
            plan.sends.push((0..p).map(|j| part.to_span(j)).collect());
            plan.recvs.push((0..p).map(|k| part.from_span(k)).collect());
            plan.owned_rows.push(part.owned_rows.clone());
            plan.globals.push(part.bond_array.clone());
        }
        plan
    }

    /// Every send span matches the receiving span in length and global ids.
    pub fn check_symmetry(&self) -> Result<()> {
        let p = self.p();
        for i in 0..p {
            for j in 0..p {
                let a = &self.globals[i][self.sends[i][j].clone()];
                let b = &self.globals[j][self.recvs[j][i].clone()];
                if a != b {
                    return Err(Error::Consistency(format!(
                        "transfer {i}->{j}: sent ids differ from received ids"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_blocks(&self, blocks: &[&mut Block]) -> Result<usize> {
        if blocks.len() != self.p() {
            return Err(Error::Shape {
                expected: format!("{} partition blocks", self.p()),
                found: blocks.len().to_string(),
            });
        }
        let width = blocks.first().map_or(0, |b| b.width);
        for (i, b) in blocks.iter().enumerate() {
            if b.rows != self.rows(i) || b.width != width || b.data.len() != b.rows * b.width {
                return Err(Error::Shape {
                    expected: format!("{} rows of width {width} in partition {i}", self.rows(i)),
                    found: format!("{} rows of width {}", b.rows, b.width),
                });
            }
        }
        Ok(width)
    }

    /// Copy owner rows into receivers' FROM spans.
    pub fn forward(&self, blocks: &mut [&mut Block]) -> Result<TransferStats> {
        let width = self.check_blocks(blocks)?;
        for (i, block) in blocks.iter_mut().enumerate() {
            for &(dup, canon) in &self.duplicates[i] {
                let (lo, hi) = (canon.min(dup), canon.max(dup));
                let (a, b) = block.data.split_at_mut(hi * width);
                let (lo_row, hi_row) = (&mut a[lo * width..(lo + 1) * width], &mut b[..width]);
                if canon < dup {
                    hi_row.copy_from_slice(lo_row);
                } else {
                    lo_row.copy_from_slice(hi_row);
                }
            }
        }
        let mut stats = TransferStats::default();
        for i in 0..self.p() {
            for j in 0..self.p() {
                let span = &self.sends[i][j];
                if i == j || span.is_empty() || self.dropped == Some((i, j)) {
                    continue;
                }
                let (src, dst) = pair_mut(blocks, i, j);
                dst.span_mut(&self.recvs[j][i]).copy_from_slice(src.span(span));
                stats.rows += span.len();
                stats.values += span.len() * width;
            }
        }
        Ok(stats)
    }

    /// Scatter-add FROM spans back into the owners' rows, clearing them,
    /// then fold duplicate rows into their canonical rows.
    pub fn reverse(&self, blocks: &mut [&mut Block]) -> Result<TransferStats> {
        let width = self.check_blocks(blocks)?;
        let mut stats = TransferStats::default();
        for i in 0..self.p() {
            for j in 0..self.p() {
                let span = &self.sends[i][j];
                if i == j || span.is_empty() || self.dropped == Some((i, j)) {
                    continue;
                }
                let (owner, receiver) = pair_mut(blocks, i, j);
                let from = receiver.span_mut(&self.recvs[j][i]);
                for (a, b) in owner.span_mut(span).iter_mut().zip(from.iter_mut()) {
                    *a += *b;
                    *b = 0.0;
                }
                stats.rows += span.len();
                stats.values += span.len() * width;
            }
        }
        for (i, block) in blocks.iter_mut().enumerate() {
            for &(dup, canon) in &self.duplicates[i] {
                for k in 0..width {
                    let v = block.data[dup * width + k];
                    block.data[canon * width + k] += v;
                    block.data[dup * width + k] = 0.0;
                }
            }
        }
        Ok(stats)
    }
}

/// Two distinct blocks borrowed mutably at once (`a != b`).
fn pair_mut<'a>(blocks: &'a mut [&mut Block], a: usize, b: usize) -> (&'a mut Block, &'a mut Block) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = blocks.split_at_mut(b);
        (&mut *lo[a], &mut *hi[0])
    } else {
        let (lo, hi) = blocks.split_at_mut(a);
        (&mut *hi[0], &mut *lo[b])
    }
}

/// Volume moved by one exchange.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub rows: usize,
    pub values: usize,
}

impl std::ops::AddAssign for TransferStats {
    fn add_assign(&mut self, o: Self) {
        self.rows += o.rows;
        self.values += o.values;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Nodes,
    Edges,
    Bonds,
}

/// Per-partition feature blocks of a common width.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedFeatures {
    pub kind: FeatureKind,
    pub width: usize,
    pub blocks: Vec<Block>,
}

impl DistributedFeatures {
    fn block_refs(&mut self) -> Vec<&mut Block> {
        self.blocks.iter_mut().collect()
    }
}

/// Which graph level an exchange acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Atoms,
    Bonds,
}

/// An exchange performed after a layer: which blocks, which direction.
pub struct Exchange<S> {
    pub level: Level,
    pub reverse: bool,
    pub select: fn(&mut S) -> &mut Block,
}

impl<S> Clone for Exchange<S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S> Copy for Exchange<S> {}

/// One layer: a per-partition computation followed by exchanges.
pub struct Layer<'a, S> {
    pub run: &'a (dyn Fn(usize, &mut S) -> Result<()> + Sync),
    pub exchanges: Vec<Exchange<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistOptions {
    pub partition: PartitionOptions,
    /// Bond-distance tolerance for the line graph.
    pub tau: f64,
    /// Worker threads executing partitions; `None` means one per partition.
    pub workers: Option<usize>,
}

impl Default for DistOptions {
    fn default() -> Self {
        DistOptions {
            partition: PartitionOptions::default(),
            tau: 0.0,
            workers: None,
        }
    }
}

/// Partitioned graphs, transfer plans and the worker pool description.
#[derive(Debug, Clone)]
pub struct Distributed {
    pub system: AtomicSystem,
    pub graph: AtomGraph,
    pub atoms: PartitionedAtomGraph,
    pub bonds: Option<PartitionedLineGraph>,
    pub atom_plan: TransferPlan,
    pub bond_plan: Option<TransferPlan>,
    pub workers: usize,
    pub threebody_cutoff: Option<f64>,
    /// Wall time spent building graphs, partitions and plans.
    pub creation_time: Duration,
}

impl Distributed {
    pub fn create_distributed(
        system: &AtomicSystem,
        atom_cutoff: f64,
        threebody_cutoff: Option<f64>,
        p: usize,
        n_threads: usize,
    ) -> Result<Self> {
        Self::create_with(system, atom_cutoff, threebody_cutoff, p, n_threads, &DistOptions::default())
    }

    pub fn create_with(
        system: &AtomicSystem,
        atom_cutoff: f64,
        threebody_cutoff: Option<f64>,
        p: usize,
        n_threads: usize,
        options: &DistOptions,
    ) -> Result<Self> {
        let start = Instant::now();
        let graph = build_neighbor_list(system, atom_cutoff, n_threads)?;
        let rule = choose_partition_rule(system, p, &options.partition)?;
        let atoms = build_atom_partitions(&graph, system, &rule)?;
        let bonds = match threebody_cutoff {
            Some(r) => Some(build_partitioned_line_graph(&graph, &atoms, r, options.tau)?),
            None => None,
        };
        let atom_plan = TransferPlan::from_atoms(&atoms);
        let bond_plan = bonds.as_ref().map(TransferPlan::from_bonds);
        let workers = options.workers.unwrap_or(p).clamp(1, p);
        Ok(Distributed {
            system: system.clone(),
            graph,
            atoms,
            bonds,
            atom_plan,
            bond_plan,
            workers,
            threebody_cutoff,
            creation_time: start.elapsed(),
        })
    }

    pub fn p(&self) -> usize {
        self.atoms.p()
    }

    /// Local source rows of partition `i`'s owned edges.
    pub fn src_nodes(&self, i: usize) -> &[usize] {
        &self.atoms.parts[i].edge_src
    }

    /// Local destination rows of partition `i`'s owned edges.
    pub fn dst_nodes(&self, i: usize) -> &[usize] {
        &self.atoms.parts[i].edge_dst
    }

    /// Test hook: silently skip transfers from partition `i` to `j`.
    pub fn corrupt_plan(&mut self, i: usize, j: usize) {
        self.atom_plan.dropped = Some((i, j));
        if let Some(plan) = &mut self.bond_plan {
            plan.dropped = Some((i, j));
        }
    }

    fn plan(&self, level: Level) -> Result<&TransferPlan> {
        match level {
            Level::Atoms => Ok(&self.atom_plan),
            Level::Bonds => self
                .bond_plan
                .as_ref()
                .ok_or_else(|| Error::invalid("no three-body graph in this distributed object")),
        }
    }

    fn gather(&self, kind: FeatureKind, features: &[f64], width: usize) -> Result<DistributedFeatures> {
        let (count, ids): (usize, Vec<&[usize]>) = match kind {
            FeatureKind::Nodes => (
                self.graph.num_nodes,
                self.atoms.parts.iter().map(|p| p.node_array.as_slice()).collect(),
            ),
            FeatureKind::Edges => (
                self.graph.num_edges(),
                self.atoms.parts.iter().map(|p| p.edge_global.as_slice()).collect(),
            ),
            FeatureKind::Bonds => (
                self.graph.num_edges(),
                self.plan(Level::Bonds)?.globals.iter().map(Vec::as_slice).collect(),
            ),
        };
        if width == 0 || features.len() != count * width {
            return Err(Error::Shape {
                expected: format!("{count} rows of width {width}"),
                found: format!("{} values", features.len()),
            });
        }
        let blocks = ids
            .iter()
            .map(|ids| {
                let mut block = Block::zeros(ids.len(), width);
                for (r, &g) in ids.iter().enumerate() {
                    block.row_mut(r).copy_from_slice(&features[g * width..(g + 1) * width]);
                }
                block
            })
            .collect();
        Ok(DistributedFeatures { kind, width, blocks })
    }

    /// Gather global node rows into every partition's full node array.
    pub fn distribute_node_features(&self, features: &[f64], width: usize) -> Result<DistributedFeatures> {
        self.gather(FeatureKind::Nodes, features, width)
    }

    /// Gather global edge rows into each partition's owned edge list.
    pub fn distribute_edge_features(&self, features: &[f64], width: usize) -> Result<DistributedFeatures> {
        self.gather(FeatureKind::Edges, features, width)
    }

    /// Gather global bond (edge id) rows into every partition's bond array.
    pub fn distribute_bond_features(&self, features: &[f64], width: usize) -> Result<DistributedFeatures> {
        self.gather(FeatureKind::Bonds, features, width)
    }

    /// One-time computation over the whole system and graph on the calling
    /// thread (e.g. global features no partition can form locally); the
    /// `N × width` result is distributed to every partition's node array.
    pub fn serial_prestage(
        &self,
        width: usize,
        stage: impl FnOnce(&AtomicSystem, &AtomGraph) -> Result<Vec<f64>>,
    ) -> Result<DistributedFeatures> {
        let features = stage(&self.system, &self.graph)?;
        self.distribute_node_features(&features, width)
    }

    pub fn atom_transfer(&self, features: &mut DistributedFeatures) -> Result<TransferStats> {
        self.expect_kind(features, FeatureKind::Nodes)?;
        self.atom_plan.forward(&mut features.block_refs())
    }

    pub fn bond_transfer(&self, features: &mut DistributedFeatures) -> Result<TransferStats> {
        self.expect_kind(features, FeatureKind::Bonds)?;
        self.plan(Level::Bonds)?.forward(&mut features.block_refs())
    }

    /// Transpose of [`Self::atom_transfer`]: border rows are added into their owners.
    pub fn reverse_atom_transfer(&self, features: &mut DistributedFeatures) -> Result<TransferStats> {
        self.expect_kind(features, FeatureKind::Nodes)?;
        self.atom_plan.reverse(&mut features.block_refs())
    }

    pub fn reverse_bond_transfer(&self, features: &mut DistributedFeatures) -> Result<TransferStats> {
        self.expect_kind(features, FeatureKind::Bonds)?;
        self.plan(Level::Bonds)?.reverse(&mut features.block_refs())
    }

    fn expect_kind(&self, features: &DistributedFeatures, kind: FeatureKind) -> Result<()> {
        if features.kind != kind || features.blocks.len() != self.p() {
            return Err(Error::Shape {
                expected: format!("{kind:?} features over {} partitions", self.p()),
                found: format!("{:?} features over {}", features.kind, features.blocks.len()),
            });
        }
        Ok(())
    }

    /// Assemble the global array from owned rows only.
    pub fn aggregate(&self, features: &DistributedFeatures) -> Result<Vec<f64>> {
        if features.blocks.len() != self.p() {
            return Err(Error::Shape {
                expected: format!("{} blocks", self.p()),
                found: features.blocks.len().to_string(),
            });
        }
        let width = features.width;
        let (count, owned): (usize, Vec<(Vec<usize>, Vec<usize>)>) = match features.kind {
            FeatureKind::Nodes | FeatureKind::Bonds => {
                let plan = self.plan(if features.kind == FeatureKind::Nodes {
                    Level::Atoms
                } else {
                    Level::Bonds
                })?;
                let count = if features.kind == FeatureKind::Nodes {
                    self.graph.num_nodes
                } else {
                    self.graph.num_edges()
                };
                let owned = (0..self.p())
                    .map(|i| {
                        let rows = plan.owned_rows[i].clone();
                        let ids = rows.iter().map(|&r| plan.globals[i][r]).collect();
                        (rows, ids)
                    })
                    .collect();
                (count, owned)
            }
            FeatureKind::Edges => (
                self.graph.num_edges(),
                self.atoms
                    .parts
                    .iter()
                    .map(|p| ((0..p.num_edges()).collect(), p.edge_global.clone()))
                    .collect(),
            ),
        };
        let mut out = vec![0.0; count * width];
        for ((rows, ids), block) in owned.iter().zip(&features.blocks) {
            if block.width != width || rows.iter().any(|&r| r >= block.rows) {
                return Err(Error::Shape {
                    expected: format!("width {width}"),
                    found: format!("block {}x{}", block.rows, block.width),
                });
            }
            for (&r, &g) in rows.iter().zip(ids) {
                out[g * width..(g + 1) * width].copy_from_slice(block.row(r));
            }
        }
        Ok(out)
    }

    /// Run `f` once per partition on its state, spread over the workers.
    /// The first failing partition (lowest id) is reported.
    pub fn for_each_partition<S: Send>(
        &self,
        states: &mut [S],
        f: &(dyn Fn(usize, &mut S) -> Result<()> + Sync),
    ) -> Result<()> {
        if states.len() != self.p() {
            return Err(Error::Shape {
                expected: format!("{} partition states", self.p()),
                found: states.len().to_string(),
            });
        }
        let wrap = |k: usize, e: Error| Error::Worker {
            partition: k,
            source: Box::new(e),
        };
        let workers = self.workers.clamp(1, states.len().max(1));
        if workers == 1 {
            for (k, s) in states.iter_mut().enumerate() {
                f(k, s).map_err(|e| wrap(k, e))?;
            }
            return Ok(());
        }
        let mut lanes: Vec<Vec<(usize, &mut S)>> = (0..workers).map(|_| Vec::new()).collect();
        for (k, s) in states.iter_mut().enumerate() {
            lanes[k % workers].push((k, s));
        }
        let failures: Vec<(usize, Error)> = std::thread::scope(|scope| {
            let handles: Vec<_> = lanes
                .into_iter()
                .map(|lane| {
                    scope.spawn(move || {
                        for (k, s) in lane {
                            if let Err(e) = f(k, s) {
                                return Some((k, e));
                            }
                        }
                        None
                    })
                })
                .collect();
            handles
                .into_iter()
                .filter_map(|h| match h.join() {
                    Ok(r) => r,
                    Err(_) => Some((usize::MAX, Error::Consistency("worker panicked".into()))),
                })
                .collect()
        });
        match failures.into_iter().min_by_key(|(k, _)| *k) {
            Some((k, e)) => Err(wrap(k, e)),
            None => Ok(()),
        }
    }

    /// Exchange the selected block of every partition state.
    pub fn exchange<S>(&self, states: &mut [S], ex: Exchange<S>) -> Result<TransferStats> {
        let plan = self.plan(ex.level)?;
        let mut blocks: Vec<&mut Block> = states.iter_mut().map(|s| (ex.select)(s)).collect();
        if ex.reverse {
            plan.reverse(&mut blocks)
        } else {
            plan.forward(&mut blocks)
        }
    }

    /// Lockstep execution: each layer on all partitions, then its exchanges.
    pub fn run_layered<S: Send>(&self, states: &mut [S], layers: &[Layer<'_, S>]) -> Result<TransferStats> {
        let mut stats = TransferStats::default();
        for layer in layers {
            self.for_each_partition(states, layer.run)?;
            for &ex in &layer.exchanges {
                stats += self.exchange(states, ex)?;
            }
        }
        Ok(stats)
    }
}
