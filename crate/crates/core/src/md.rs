//! NVE velocity-Verlet dynamics. Graphs are rebuilt and repartitioned on
//! every force evaluation.
//!
//! Units: Å, fs, amu, eV.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{DistOptions, Distributed, Phase, Timings};
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::potential::{forward_distributed_timed, PotentialOutput, ToyPotentialParams};
use crate::system::AtomicSystem;

/// Acceleration in Å/fs² produced by 1 eV/Å acting on 1 amu.
pub const ACCEL_UNIT: f64 = 9.648_533_212e-3;
/// Boltzmann constant in eV/K.
pub const BOLTZMANN: f64 = 8.617_333_262e-5;

/// How forces are computed each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evaluator {
    Serial,
    Distributed {
        p: usize,
        n_threads: usize,
        options: DistOptions,
    },
}

impl Evaluator {
    /// Build graphs for `system` and evaluate the potential.
    pub fn evaluate(
        &self,
        system: &AtomicSystem,
        params: &ToyPotentialParams,
        timings: &mut Timings,
    ) -> Result<PotentialOutput> {
        let (p, n_threads, options) = match *self {
            Evaluator::Serial => (1, 0, DistOptions::default()),
            Evaluator::Distributed { p, n_threads, options } => (p, n_threads, options),
        };
        let dist = Distributed::create_with(system, params.cutoff, params.threebody_cutoff, p, n_threads, &options)?;
        timings.add(Phase::GraphCreation, dist.creation_time);
        forward_distributed_timed(&dist, params, timings)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MDState {
    pub system: AtomicSystem,
    /// Å/fs.
    pub velocities: Vec<Vec3>,
    /// amu.
    pub masses: Vec<f64>,
    /// fs.
    pub dt: f64,
    pub step: usize,
    /// Result of the latest force evaluation, if any.
    pub last: Option<PotentialOutput>,
}

impl MDState {
    pub fn new(system: AtomicSystem, velocities: Vec<Vec3>, dt: f64) -> Result<Self> {
        if velocities.len() != system.len() {
            return Err(Error::Shape {
                expected: format!("{} velocities", system.len()),
                found: velocities.len().to_string(),
            });
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("time step must be finite and >= 0, got {dt}")));
        }
        let masses = system.masses();
        Ok(MDState {
            system,
            velocities,
            masses,
            dt,
            step: 0,
            last: None,
        })
    }

    /// Maxwell–Boltzmann velocities at `temperature` K with the centre-of-mass
    /// momentum removed.
    pub fn with_temperature(system: AtomicSystem, temperature: f64, seed: u64, dt: f64) -> Result<Self> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be >= 0, got {temperature}")));
        }
        let masses = system.masses();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut velocities: Vec<Vec3> = masses
            .iter()
            .map(|&m| {
                let sigma = (BOLTZMANN * temperature * ACCEL_UNIT / m).sqrt();
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)]
            })
            .collect();
        if temperature == 0.0 {
            velocities.iter_mut().for_each(|v| *v = [0.0; 3]);
        }
        let total: f64 = masses.iter().sum();
        let p = momentum(&masses, &velocities);
        for v in velocities.iter_mut() {
            for a in 0..3 {
                v[a] -= p[a] / total;
            }
        }
        Self::new(system, velocities, dt)
    }

    /// eV.
    pub fn kinetic_energy(&self) -> f64 {
        let mut ke = 0.0;
        for (m, v) in self.masses.iter().zip(&self.velocities) {
            ke += 0.5 * m * geometry::dot(*v, *v);
        }
        ke / ACCEL_UNIT
    }

    /// amu·Å/fs.
    pub fn momentum(&self) -> Vec3 {
        momentum(&self.masses, &self.velocities)
    }

    fn ensure_forces(&mut self, params: &ToyPotentialParams, evaluator: &Evaluator, timings: &mut Timings) -> Result<()> {
        if self.last.is_none() {
            let out = evaluator.evaluate(&self.system, params, timings)?;
            check_forces(&out, self.step)?;
            self.last = Some(out);
        }
        Ok(())
    }
}

fn momentum(masses: &[f64], velocities: &[Vec3]) -> Vec3 {
    let mut p = [0.0; 3];
    for (m, v) in masses.iter().zip(velocities) {
        for a in 0..3 {
            p[a] += m * v[a];
        }
    }
    p
}

fn check_forces(out: &PotentialOutput, step: usize) -> Result<()> {
    if !out.energy.is_finite() || out.forces.iter().flatten().any(|f| !f.is_finite()) {
        return Err(Error::MdDiverged { step });
    }
    Ok(())
}

fn kick(state: &mut MDState, forces: &[Vec3]) {
    let half = 0.5 * state.dt * ACCEL_UNIT;
    for ((v, f), m) in state.velocities.iter_mut().zip(forces).zip(&state.masses) {
        for a in 0..3 {
            v[a] += half * f[a] / m;
        }
    }
}

/// One velocity-Verlet step. A zero time step leaves the state untouched.
pub fn velocity_verlet_step(
    state: &mut MDState,
    params: &ToyPotentialParams,
    evaluator: &Evaluator,
    timings: &mut Timings,
) -> Result<()> {
    if state.dt == 0.0 {
        return Ok(());
    }
    state.ensure_forces(params, evaluator, timings)?;
    let forces = state.last.take().expect("forces evaluated").forces;
    kick(state, &forces);
    let dt = state.dt;
    for (x, v) in state.system.positions.iter_mut().zip(&state.velocities) {
        for a in 0..3 {
            x[a] += dt * v[a];
        }
    }
    state.system = state.system.wrap_positions();
    let out = evaluator.evaluate(&state.system, params, timings)?;
    check_forces(&out, state.step + 1)?;
    kick(state, &out.forces);
    state.step += 1;
    state.last = Some(out);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdConfig {
    pub steps: usize,
    pub dt: f64,
    pub temperature: f64,
    pub seed: u64,
    pub evaluator: Evaluator,
    /// Write an XYZ frame every `k` steps.
    pub snapshot_every: Option<usize>,
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt >= 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be >= 0, got {}", self.dt)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::invalid("snapshot interval must be >= 1"));
        }
        if let Evaluator::Distributed { p: 0, .. } = self.evaluator {
            return Err(Error::invalid("partition count must be >= 1"));
        }
        Ok(())
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 12] = [
    "step",
    "time_fs",
    "E_pot",
    "E_kin",
    "E_total",
    "max_force",
    "stress_xx",
    "stress_yy",
    "stress_zz",
    "stress_yz",
    "stress_xz",
    "stress_xy",
];

pub fn trajectory_header() -> String {
    format!("{},{},step_wall", TRAJECTORY_COLUMNS.join(","), Timings::csv_header())
}

#[derive(Debug, Clone)]
pub struct MdSummary {
    pub steps: usize,
    pub initial_total_energy: f64,
    pub final_total_energy: f64,
    /// max_t |E_total(t) − E_total(0)| / N, eV/atom.
    pub max_energy_drift_per_atom: f64,
    /// Largest component of the momentum change from the initial state.
    pub max_momentum_drift: f64,
    pub timings: Timings,
    /// Wall time of each step, seconds.
    pub step_walls: Vec<f64>,
    pub final_state: MDState,
}

/// Run NVE dynamics from `initial`, writing one CSV row per step.
pub fn run_md(
    config: &MdConfig,
    params: &ToyPotentialParams,
    initial: &AtomicSystem,
    csv: &mut dyn Write,
    mut snapshots: Option<&mut dyn Write>,
) -> Result<MdSummary> {
    config.validate()?;
    let io = |source| Error::Io {
        path: "<trajectory>".into(),
        source,
    };
    writeln!(csv, "{}", trajectory_header()).map_err(io)?;
    let mut state = MDState::with_temperature(initial.clone(), config.temperature, config.seed, config.dt)?;
    let mut timings = Timings::default();
    state.ensure_forces(params, &config.evaluator, &mut timings)?;
    let n = state.system.len().max(1) as f64;
    let e0 = state.last.as_ref().map_or(0.0, |o| o.energy) + state.kinetic_energy();
    let p0 = state.momentum();
    let mut summary = MdSummary {
        steps: 0,
        initial_total_energy: e0,
        final_total_energy: e0,
        max_energy_drift_per_atom: 0.0,
        max_momentum_drift: 0.0,
        timings: Timings::default(),
        step_walls: Vec::with_capacity(config.steps),
        final_state: state.clone(),
    };
    for _ in 0..config.steps {
        let mut step_timings = Timings::default();
        let start = Instant::now();
        velocity_verlet_step(&mut state, params, &config.evaluator, &mut step_timings)?;
        let wall = start.elapsed().as_secs_f64();
        let out = state.last.as_ref().expect("forces after step");
        let ke = state.kinetic_energy();
        let total = out.energy + ke;
        let max_force = out.forces.iter().flatten().fold(0.0f64, |a, f| a.max(f.abs()));
        let s: &Mat3 = &out.stress;
        writeln!(
            csv,
            "{},{},{:.12e},{:.12e},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e}",
            state.step,
            state.step as f64 * state.dt,
            out.energy,
            ke,
            total,
            max_force,
            s[0][0],
            s[1][1],
            s[2][2],
            s[1][2],
            s[0][2],
            s[0][1],
            step_timings.csv_values(),
            wall
        )
        .map_err(io)?;
        if let (Some(k), Some(w)) = (config.snapshot_every, snapshots.as_deref_mut()) {
            if state.step % k == 0 {
                let comment = format!("step={} E_total={total:.10}", state.step);
                w.write_all(state.system.to_xyz(&comment).as_bytes()).map_err(io)?;
            }
        }
        summary.max_energy_drift_per_atom = summary.max_energy_drift_per_atom.max((total - e0).abs() / n);
        let p = state.momentum();
        for a in 0..3 {
            summary.max_momentum_drift = summary.max_momentum_drift.max((p[a] - p0[a]).abs());
        }
        summary.final_total_energy = total;
        summary.steps += 1;
        summary.step_walls.push(wall);
        summary.timings.merge(&step_timings);
    }
    summary.final_state = state;
    Ok(summary)
}

/// Largest per-coordinate difference between two configurations of the
/// same cell, using the minimum image along periodic axes.
pub fn max_position_difference(a: &AtomicSystem, b: &AtomicSystem) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} atoms", a.len()),
            found: b.len().to_string(),
        });
    }
    let inv = geometry::inverse(&a.lattice);
    let mut worst = 0.0f64;
    for (x, y) in a.positions.iter().zip(&b.positions) {
        let mut d = geometry::sub(*x, *y);
        if let Some(inv) = &inv {
            let mut frac = geometry::vec_mat(d, inv);
            for k in 0..3 {
                if a.pbc[k] {
                    frac[k] -= frac[k].round();
                }
            }
            d = geometry::vec_mat(frac, &a.lattice);
        }
        worst = d.iter().fold(worst, |w, v| w.max(v.abs()));
    }
    Ok(worst)
}
