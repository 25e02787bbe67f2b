//! Command-line surface: equivalence audits, scaling benchmarks and MD runs.
//!
//! Exit codes: 0 success, 1 tolerance failure, 2 configuration error,
//! 3 runtime error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::engine::{DistOptions, Distributed, Phase, Timings};
use crate::error::{Error, Result};
use crate::md::{max_position_difference, run_md, velocity_verlet_step, Evaluator, MDState, MdConfig};
use crate::partitioner::PartitionOptions;
use crate::potential::{forward_distributed, forward_serial, PotentialOutput, ToyPotentialParams};
use crate::system::AtomicSystem;

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "slabgraph", version, about = "Slab-partitioned graph potentials: audits, benchmarks and MD")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare distributed against serial evaluation for each partition count.
    Audit(AuditArgs),
    /// Scaling and timing benchmarks, written as CSV.
    Bench(BenchArgs),
    /// NVE molecular dynamics with per-step CSV output.
    Md(MdArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct SystemArgs {
    /// Extended-XYZ structure file.
    #[arg(long)]
    pub fixture: PathBuf,
    /// Supercell repetitions `a,b,c` (bench: several triples separated by `;`).
    #[arg(long, default_value = "1,1,1")]
    pub reps: String,
    /// Atom-graph cutoff, Å.
    #[arg(long, default_value_t = 4.0)]
    pub cutoff: f64,
    /// Three-body cutoff, Å; omit for an atom-graph-only potential.
    #[arg(long)]
    pub threebody_cutoff: Option<f64>,
    /// Seed for parameters, perturbations and velocities.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Load potential parameters from a blob instead of seeding them.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Neighbor-list threads (0: global pool).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Accept slabs narrower than the cutoff.
    #[arg(long)]
    pub allow_thin_slabs: bool,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Partition counts to compare with the serial run.
    #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
    pub partitions: Vec<usize>,
    /// Uniform random displacement amplitude, Å.
    #[arg(long, default_value_t = 0.05)]
    pub perturb: f64,
    /// Per-atom energy tolerance, eV/atom.
    #[arg(long, default_value_t = 1e-12)]
    pub energy_tol: f64,
    /// Force component tolerance, eV/Å.
    #[arg(long, default_value_t = 1e-10)]
    pub force_tol: f64,
    /// Stress component tolerance, eV/Å³.
    #[arg(long, default_value_t = 1e-10)]
    pub stress_tol: f64,
    /// Drop the 0→1 transfers (negative control).
    #[arg(long)]
    pub corrupt_plan: bool,
    /// Write the edge list, partition plans and line edges here.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Strong,
    Weak,
    Capacity,
    Density,
    Breakdown,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_enum)]
    pub mode: BenchMode,
    #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
    pub partitions: Vec<usize>,
    /// Timed repetitions per configuration.
    #[arg(long, default_value_t = 20)]
    pub repeat: usize,
    /// Repetitions averaged, counted from the end.
    #[arg(long, default_value_t = 10)]
    pub keep_last: usize,
    /// Memory budget for capacity mode, bytes.
    #[arg(long, default_value_t = 1 << 30)]
    pub budget_bytes: u64,
    /// Density multipliers for density mode.
    #[arg(long, default_value = "1,2", value_delimiter = ',')]
    pub density_factors: Vec<f64>,
    /// Uniform random displacement amplitude, Å.
    #[arg(long, default_value_t = 0.05)]
    pub perturb: f64,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MdArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Time step, fs.
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    /// Initial Maxwell–Boltzmann temperature, K.
    #[arg(long, default_value_t = 300.0)]
    pub temperature: f64,
    /// Partition count; 1 runs the serial evaluator.
    #[arg(long, default_value_t = 1)]
    pub partitions: usize,
    /// Uniform random displacement amplitude applied before the run, Å.
    #[arg(long, default_value_t = 0.0)]
    pub perturb: f64,
    /// Trajectory CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// XYZ snapshot file.
    #[arg(long)]
    pub xyz: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub snapshot_every: usize,
    /// Also integrate with the serial evaluator from the same state and fail
    /// if positions ever differ by more than `--position-tol`.
    #[arg(long)]
    pub paired: bool,
    /// Position tolerance for `--paired`, Å.
    #[arg(long, default_value_t = 1e-8)]
    pub position_tol: f64,
}

/// Parse `a,b,c[;a,b,c...]`.
pub fn parse_reps(text: &str) -> Result<Vec<[usize; 3]>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|triple| {
            let v: Vec<usize> = triple
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("bad repetition triple '{triple}'")))?;
            match v.as_slice() {
                [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok([*a, *b, *c]),
                _ => Err(Error::invalid(format!("repetitions need three positive integers, got '{triple}'"))),
            }
        })
        .collect()
}

impl SystemArgs {
    fn base(&self) -> Result<AtomicSystem> {
        AtomicSystem::load_xyz(&self.fixture)
    }

    fn first_reps(&self) -> Result<[usize; 3]> {
        parse_reps(&self.reps)?
            .first()
            .copied()
            .ok_or_else(|| Error::invalid("no repetitions given"))
    }

    fn params(&self) -> Result<ToyPotentialParams> {
        match &self.params {
            Some(path) => {
                let p = ToyPotentialParams::load(path)?;
                if p.cutoff != self.cutoff || p.threebody_cutoff != self.threebody_cutoff {
                    return Err(Error::invalid(format!(
                        "parameter file cutoffs ({}, {:?}) differ from the command line ({}, {:?})",
                        p.cutoff, p.threebody_cutoff, self.cutoff, self.threebody_cutoff
                    )));
                }
                Ok(p)
            }
            None => ToyPotentialParams::default_with(self.cutoff, self.threebody_cutoff, self.seed),
        }
    }

    fn options(&self, workers: Option<usize>) -> DistOptions {
        DistOptions {
            partition: PartitionOptions {
                allow_thin_slabs: self.allow_thin_slabs,
                ..PartitionOptions::default()
            },
            workers,
            ..DistOptions::default()
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Worker { source, .. } => exit_code(source),
        Error::Consistency(_) | Error::NonFinite { .. } | Error::MdDiverged { .. } => EXIT_RUNTIME,
        _ => EXIT_CONFIG,
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Audit(a) => cmd_audit(a, out),
        Command::Bench(b) => cmd_bench(b, out),
        Command::Md(m) => cmd_md(m, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Largest per-atom energy, force component and stress component gaps.
pub fn discrepancies(a: &PotentialOutput, b: &PotentialOutput) -> (f64, f64, f64) {
    let de = a
        .per_atom_energy
        .iter()
        .zip(&b.per_atom_energy)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let df = a
        .forces
        .iter()
        .flatten()
        .zip(b.forces.iter().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let ds = a
        .stress
        .iter()
        .flatten()
        .zip(b.stress.iter().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    (de, df, ds)
}

pub fn cmd_audit(args: &AuditArgs, out: &mut dyn Write) -> Result<i32> {
    let sys = args.system.base()?.make_supercell(args.system.first_reps()?)?;
    let sys = sys.random_perturb(args.perturb, args.system.seed)?;
    let params = args.system.params()?;
    let serial = forward_serial(&sys, &params)?;
    let io = |source| Error::Io {
        path: "<stdout>".into(),
        source,
    };
    writeln!(out, "atoms={} serial_energy={:.12e}", sys.len(), serial.energy).map_err(io)?;
    let mut failed = false;
    for &p in &args.partitions {
        let mut dist = Distributed::create_with(
            &sys,
            params.cutoff,
            params.threebody_cutoff,
            p,
            args.system.threads,
            &args.system.options(None),
        )?;
        if args.corrupt_plan && p >= 2 {
            dist.corrupt_plan(0, 1);
        }
        let owned: usize = dist.atoms.parts.iter().map(|q| q.num_edges()).sum();
        let owned_lines: usize = dist.bonds.as_ref().map_or(0, |b| b.parts.iter().map(|q| q.line_src.len()).sum());
        let serial_lines = match (&dist.bonds, params.threebody_cutoff) {
            (Some(b), Some(r)) => crate::linegraph::serial_line_graph(&dist.graph, r, b.tau).len(),
            _ => 0,
        };
        if let Some(dir) = &args.dump_dir {
            dump_plan(dir, p, &dist)?;
        }
        let got = forward_distributed(&dist, &params)?;
        let (de, df, ds) = discrepancies(&serial, &got);
        let checks = [
            ("energy_per_atom", de, args.energy_tol),
            ("force", df, args.force_tol),
            ("stress", ds, args.stress_tol),
            ("edge_ownership", owned.abs_diff(dist.graph.num_edges()) as f64, 0.0),
            ("line_ownership", owned_lines.abs_diff(serial_lines) as f64, 0.0),
        ];
        let mut line = format!("p={p}");
        for (name, value, tol) in checks {
            line.push_str(&format!(" {name}={value:.3e}"));
            if !(value <= tol) {
                failed = true;
                writeln!(out, "FAIL p={p} metric={name} value={value:.6e} tolerance={tol:.1e}").map_err(io)?;
            }
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    writeln!(out, "{}", if failed { "audit: FAIL" } else { "audit: ok" }).map_err(io)?;
    Ok(if failed { EXIT_TOLERANCE } else { EXIT_OK })
}

fn write_file(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

fn dump_plan(dir: &Path, p: usize, dist: &Distributed) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(dir.join("edges.csv"), &dist.graph.to_csv())?;
    write_file(dir.join(format!("plan_p{p}.json")), &dist.atoms.plan_json())?;
    if let Some(lines) = &dist.bonds {
        write_file(dir.join(format!("line_edges_p{p}.csv")), &lines.to_csv())?;
    }
    Ok(())
}

/// Averages of the trailing `keep_last` samples.
fn keep_last_mean(samples: &[Timings], walls: &[f64], keep_last: usize) -> (Timings, f64) {
    let k = keep_last.clamp(1, walls.len());
    let start = walls.len() - k;
    let mut t = Timings::default();
    for s in &samples[start..] {
        t.merge(s);
    }
    for v in t.seconds.iter_mut() {
        *v /= k as f64;
    }
    (t, walls[start..].iter().sum::<f64>() / k as f64)
}

struct Measurement {
    atoms: usize,
    edges: usize,
    bonds: usize,
    mean_wall: f64,
    phases: Timings,
}

/// Time full evaluations (graph build + forward + backward).
fn measure(
    sys: &AtomicSystem,
    params: &ToyPotentialParams,
    p: usize,
    workers: usize,
    args: &BenchArgs,
) -> Result<Measurement> {
    let mut samples = Vec::with_capacity(args.repeat);
    let mut walls = Vec::with_capacity(args.repeat);
    let (mut edges, mut bonds) = (0, 0);
    for _ in 0..args.repeat.max(1) {
        let mut t = Timings::default();
        let start = Instant::now();
        let dist = Distributed::create_with(
            sys,
            params.cutoff,
            params.threebody_cutoff,
            p,
            args.system.threads,
            &args.system.options(Some(workers)),
        )?;
        t.add(Phase::GraphCreation, dist.creation_time);
        crate::potential::forward_distributed_timed(&dist, params, &mut t)?;
        walls.push(start.elapsed().as_secs_f64());
        samples.push(t);
        edges = dist.graph.num_edges();
        bonds = dist.bonds.as_ref().map_or(0, |b| b.buckets.pure.iter().map(Vec::len).sum::<usize>()
            + b.buckets.to.iter().flatten().map(Vec::len).sum::<usize>());
    }
    let (phases, mean_wall) = keep_last_mean(&samples, &walls, args.keep_last);
    Ok(Measurement {
        atoms: sys.len(),
        edges,
        bonds,
        mean_wall,
        phases,
    })
}

/// Rough resident size of one evaluation, bytes.
pub fn estimated_bytes(atoms: usize, edges: usize, params: &ToyPotentialParams) -> u64 {
    let (f, k, l) = (params.features as u64, params.basis as u64, params.layers as u64);
    let per_edge = 64 + 8 * (2 * k + 4) + if params.threebody_cutoff.is_some() { 8 * (5 * f + 3) + 64 } else { 0 };
    let per_atom = 64 + 8 * f * (2 * l + 4) + 48;
    atoms as u64 * per_atom + edges as u64 * per_edge
}

pub const BENCH_COLUMNS: &str = "mode,p,workers,reps,atoms,edges,bonds,density_factor,mean_seconds,normalized,Graph Creation,Feature Calculation,Forward Pass,Backward Pass,flag";

fn bench_row(
    mode: &str,
    p: usize,
    workers: usize,
    reps: [usize; 3],
    density: f64,
    m: &Measurement,
    baseline: f64,
    flag: &str,
) -> String {
    format!(
        "{mode},{p},{workers},{}x{}x{},{},{},{},{density},{:.6e},{:.6},{},{flag}",
        reps[0],
        reps[1],
        reps[2],
        m.atoms,
        m.edges,
        m.bonds,
        m.mean_wall,
        m.mean_wall / baseline,
        m.phases.csv_values()
    )
}

fn open_out<'a>(path: &Option<PathBuf>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    match path {
        Some(p) => Ok(Box::new(BufWriter::new(File::create(p).map_err(|source| Error::Io {
            path: p.clone(),
            source,
        })?))),
        None => Ok(Box::new(stdout)),
    }
}

pub fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write) -> Result<i32> {
    if args.repeat == 0 {
        return Err(Error::invalid("--repeat must be >= 1"));
    }
    if args.partitions.contains(&0) {
        return Err(Error::invalid("partition counts must be >= 1"));
    }
    let base = args.system.base()?;
    let reps = args.system.first_reps()?;
    let params = args.system.params()?;
    let mut rows = vec![BENCH_COLUMNS.to_string()];
    let mode = format!("{:?}", args.mode).to_lowercase();
    // Single-partition baseline: two partitions sharing one worker.
    let baseline_of = |sys: &AtomicSystem| measure(sys, &params, 2, 1, args);
    match args.mode {
        BenchMode::Strong | BenchMode::Breakdown => {
            let sys = base.make_supercell(reps)?.random_perturb(args.perturb, args.system.seed)?;
            let baseline = baseline_of(&sys)?;
            rows.push(bench_row(&mode, 1, 1, reps, 1.0, &baseline, baseline.mean_wall, "baseline"));
            for &p in args.partitions.iter().filter(|&&p| p > 1) {
                let m = measure(&sys, &params, p, p, args)?;
                rows.push(bench_row(&mode, p, p, reps, 1.0, &m, baseline.mean_wall, ""));
            }
        }
        BenchMode::Weak => {
            let sys = base.make_supercell(reps)?.random_perturb(args.perturb, args.system.seed)?;
            let baseline = baseline_of(&sys)?;
            rows.push(bench_row(&mode, 1, 1, reps, 1.0, &baseline, baseline.mean_wall, "baseline"));
            for &p in args.partitions.iter().filter(|&&p| p > 1) {
                let scaled = [reps[0] * p, reps[1], reps[2]];
                let sys = base.make_supercell(scaled)?.random_perturb(args.perturb, args.system.seed)?;
                let m = measure(&sys, &params, p, p, args)?;
                rows.push(bench_row(&mode, p, p, scaled, 1.0, &m, baseline.mean_wall, ""));
            }
        }
        BenchMode::Density => {
            let sys = base.make_supercell(reps)?.random_perturb(args.perturb, args.system.seed)?;
            let mut baseline = None;
            for &factor in &args.density_factors {
                if !(factor > 0.0) {
                    return Err(Error::invalid("density factors must be positive"));
                }
                let dense = sys.scaled(factor.powf(-1.0 / 3.0));
                for &p in &args.partitions {
                    let m = measure(&dense, &params, p.max(2), if p == 1 { 1 } else { p }, args)?;
                    let base_wall = *baseline.get_or_insert(m.mean_wall);
                    let flag = if p == 1 { "baseline" } else { "" };
                    rows.push(bench_row(&mode, p, p, reps, factor, &m, base_wall, flag));
                }
            }
        }
        BenchMode::Capacity => {
            for &p in &args.partitions {
                let (workers, parts) = if p == 1 { (1, 2) } else { (p, p) };
                // Bisect the largest cubic repetition whose estimate fits.
                let fits = |k: usize| -> Result<Option<Measurement>> {
                    let sys = base.make_supercell([k, k, k])?.random_perturb(args.perturb, args.system.seed)?;
                    let graph = crate::neighborlist::build_neighbor_list(&sys, params.cutoff, args.system.threads)?;
                    if estimated_bytes(sys.len(), graph.num_edges(), &params) > args.budget_bytes {
                        return Ok(None);
                    }
                    drop(graph);
                    measure(&sys, &params, parts, workers, args).map(Some)
                };
                let (mut lo, mut hi) = (0usize, 1usize);
                let mut best = None;
                loop {
                    match fits(hi) {
                        Ok(Some(m)) => {
                            lo = hi;
                            best = Some(m);
                            hi *= 2;
                        }
                        Ok(None) => break,
                        Err(Error::PartitionWidth { .. }) if best.is_none() => {
                            lo = hi;
                            hi *= 2;
                        }
                        Err(e) => return Err(e),
                    }
                    if hi > 64 {
                        break;
                    }
                }
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    match fits(mid)? {
                        Some(m) => {
                            lo = mid;
                            best = Some(m);
                        }
                        None => hi = mid,
                    }
                }
                match best {
                    Some(m) => rows.push(bench_row(&mode, p, workers, [lo; 3], 1.0, &m, m.mean_wall, "")),
                    None => rows.push(format!("{mode},{p},{workers},0x0x0,0,0,0,1,nan,nan,nan,nan,nan,nan,over_budget")),
                }
            }
        }
    }
    let mut w = open_out(&args.out, stdout)?;
    for row in rows {
        writeln!(w, "{row}").map_err(|source| Error::Io {
            path: args.out.clone().unwrap_or_else(|| "<stdout>".into()),
            source,
        })?;
    }
    w.flush().map_err(|source| Error::Io {
        path: args.out.clone().unwrap_or_else(|| "<stdout>".into()),
        source,
    })?;
    Ok(EXIT_OK)
}

pub fn cmd_md(args: &MdArgs, stdout: &mut dyn Write) -> Result<i32> {
    let sys = args.system.base()?.make_supercell(args.system.first_reps()?)?;
    let sys = sys.random_perturb(args.perturb, args.system.seed)?;
    let params = args.system.params()?;
    let evaluator = match args.partitions {
        0 => return Err(Error::invalid("--partitions must be >= 1")),
        1 => Evaluator::Serial,
        p => Evaluator::Distributed {
            p,
            n_threads: args.system.threads,
            options: args.system.options(None),
        },
    };
    let config = MdConfig {
        steps: args.steps,
        dt: args.dt,
        temperature: args.temperature,
        seed: args.system.seed,
        evaluator,
        snapshot_every: args.xyz.as_ref().map(|_| args.snapshot_every),
    };
    if args.paired {
        if args.partitions < 2 {
            return Err(Error::invalid("--paired needs --partitions >= 2"));
        }
        let dx = paired_difference(&config, &params, &sys)?;
        let _ = writeln!(err_line(stdout, &args.out), "paired steps={} max_position_difference={dx:.3e}", config.steps);
        if !(dx <= args.position_tol) {
            let _ = writeln!(
                err_line(stdout, &args.out),
                "FAIL metric=position_difference value={dx:.6e} tolerance={:.1e}",
                args.position_tol
            );
            return Ok(EXIT_TOLERANCE);
        }
    }
    let mut csv = open_out(&args.out, stdout)?;
    let mut xyz = match &args.xyz {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?)),
        None => None,
    };
    let summary = run_md(
        &config,
        &params,
        &sys,
        &mut csv,
        xyz.as_mut().map(|w| w as &mut dyn Write),
    )?;
    let flush = |p: &Path, r: std::io::Result<()>| r.map_err(|source| Error::Io { path: p.to_path_buf(), source });
    flush(Path::new("<trajectory>"), csv.flush())?;
    if let (Some(w), Some(p)) = (xyz.as_mut(), &args.xyz) {
        flush(p, w.flush())?;
    }
    drop(csv);
    if args.out.is_some() {
        let _ = writeln!(
            stdout,
            "steps={} max_drift_per_atom={:.3e} max_momentum_drift={:.3e}",
            summary.steps, summary.max_energy_drift_per_atom, summary.max_momentum_drift
        );
    }
    Ok(EXIT_OK)
}

/// Where summary lines go: stdout unless the trajectory itself is on stdout,
/// in which case they are dropped so the CSV stays clean.
fn err_line<'a>(stdout: &'a mut dyn Write, out: &Option<PathBuf>) -> Box<dyn Write + 'a> {
    if out.is_some() {
        Box::new(stdout)
    } else {
        Box::new(std::io::stderr())
    }
}

/// Largest coordinate difference between serial and distributed
/// trajectories started from the same state.
fn paired_difference(config: &MdConfig, params: &ToyPotentialParams, sys: &AtomicSystem) -> Result<f64> {
    let start = MDState::with_temperature(sys.clone(), config.temperature, config.seed, config.dt)?;
    let (mut a, mut b) = (start.clone(), start);
    let mut t = Timings::default();
    let mut worst = 0.0f64;
    for _ in 0..config.steps {
        velocity_verlet_step(&mut a, params, &Evaluator::Serial, &mut t)?;
        velocity_verlet_step(&mut b, params, &config.evaluator, &mut t)?;
        worst = worst.max(max_position_difference(&a.system, &b.system)?);
    }
    Ok(worst)
}
