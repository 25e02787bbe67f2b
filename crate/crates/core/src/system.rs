//! Periodic atomic systems: extended-XYZ ingestion, supercells, wrapping and
//! random perturbations.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::elements;
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};

/// Upper bound on atom counts produced by [`AtomicSystem::make_supercell`].
pub const DEFAULT_MAX_ATOMS: usize = 20_000_000;

/// A simulation cell: Cartesian positions (Å), row-vector lattice (Å),
/// atomic numbers and per-axis periodicity.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicSystem {
    pub positions: Vec<Vec3>,
    pub lattice: Mat3,
    pub species: Vec<u8>,
    pub pbc: [bool; 3],
}

/// Positions expressed in units of the cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalCoords(pub Vec<Vec3>);

impl AtomicSystem {
    pub fn new(positions: Vec<Vec3>, lattice: Mat3, species: Vec<u8>, pbc: [bool; 3]) -> Result<Self> {
        let system = AtomicSystem {
            positions,
            lattice,
            species,
            pbc,
        };
        system.validate()?;
        Ok(system)
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.len() != self.positions.len() {
            return Err(Error::Shape {
                expected: format!("{} species", self.positions.len()),
                found: format!("{} species", self.species.len()),
            });
        }
        if let Some(z) = self
            .species
            .iter()
            .find(|&&z| z == 0 || z as usize > elements::MAX_Z)
        {
            return Err(Error::invalid(format!("atomic number {z} out of range")));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        if self.pbc.iter().any(|&p| p) && geometry::inverse(&self.lattice).is_none() {
            return Err(Error::invalid("periodic system with a singular lattice"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn volume(&self) -> f64 {
        geometry::det(&self.lattice).abs()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.species
            .iter()
            .map(|&z| elements::mass(z).expect("species validated"))
            .collect()
    }

    pub fn fractional(&self) -> Result<FractionalCoords> {
        let inv = geometry::inverse(&self.lattice)
            .ok_or_else(|| Error::invalid("singular lattice"))?;
        Ok(FractionalCoords(
            self.positions.iter().map(|&x| geometry::vec_mat(x, &inv)).collect(),
        ))
    }

    pub fn set_fractional(&mut self, frac: &FractionalCoords) {
        self.positions = frac
            .0
            .iter()
            .map(|&f| geometry::vec_mat(f, &self.lattice))
            .collect();
    }

    /// Lattice used for neighbor search. Periodic rows are kept; each
    /// non-periodic axis is replaced by a direction orthogonal to the other
    /// rows, long enough that images sit at least twice `cutoff` away.
    pub fn effective_lattice(&self, cutoff: f64) -> Mat3 {
        if self.pbc.iter().all(|&p| p) {
            return self.lattice;
        }
        let mut basis: Vec<Vec3> = Vec::with_capacity(3);
        for axis in 0..3 {
            if self.pbc[axis] {
                basis.push(self.lattice[axis]);
            }
        }
        let mut out = self.lattice;
        for axis in 0..3 {
            if self.pbc[axis] {
                continue;
            }
            let dir = orthogonal_direction(&basis);
            basis.push(dir);
            let (lo, hi) = self
                .positions
                .iter()
                .map(|&x| geometry::dot(x, dir))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let extent = if self.positions.is_empty() { 0.0 } else { hi - lo };
            out[axis] = geometry::scale(dir, extent + 2.0 * cutoff + 1.0);
        }
        out
    }

    /// Tile the cell `reps[k]` times along each cell vector.
    pub fn make_supercell(&self, reps: [usize; 3]) -> Result<Self> {
        self.make_supercell_with_limit(reps, DEFAULT_MAX_ATOMS)
    }

    pub fn make_supercell_with_limit(&self, reps: [usize; 3], max_atoms: usize) -> Result<Self> {
        if reps.contains(&0) {
            return Err(Error::invalid(format!("supercell repetitions must be >= 1, got {reps:?}")));
        }
        let atoms = reps
            .iter()
            .try_fold(self.len(), |acc, &r| acc.checked_mul(r))
            .unwrap_or(usize::MAX);
        if atoms > max_atoms {
            return Err(Error::TooManyAtoms {
                atoms,
                limit: max_atoms,
            });
        }
        if reps == [1, 1, 1] {
            return Ok(self.clone());
        }
        let mut positions = Vec::with_capacity(atoms);
        let mut species = Vec::with_capacity(atoms);
        for a in 0..reps[0] {
            for b in 0..reps[1] {
                for c in 0..reps[2] {
                    let shift = geometry::offset_vector([a as i32, b as i32, c as i32], &self.lattice);
                    for (x, &z) in self.positions.iter().zip(&self.species) {
                        positions.push(geometry::add(*x, shift));
                        species.push(z);
                    }
                }
            }
        }
        let mut lattice = self.lattice;
        for (row, &r) in lattice.iter_mut().zip(&reps) {
            *row = geometry::scale(*row, r as f64);
        }
        Ok(AtomicSystem {
            positions,
            lattice,
            species,
            pbc: self.pbc,
        })
    }

    /// Bring every atom into the home cell along periodic axes. Atoms that
    /// are already inside are left bitwise untouched.
    pub fn wrap_positions(&self) -> Self {
        let Some(inv) = geometry::inverse(&self.lattice) else {
            return self.clone();
        };
        let mut out = self.clone();
        for x in out.positions.iter_mut() {
            for _ in 0..2 {
                let f = geometry::vec_mat(*x, &inv);
                let mut shift = [0i32; 3];
                for k in 0..3 {
                    if self.pbc[k] && !(0.0..1.0).contains(&f[k]) {
                        shift[k] = f[k].floor() as i32;
                    }
                }
                if shift == [0, 0, 0] {
                    break;
                }
                *x = geometry::sub(*x, geometry::offset_vector(shift, &self.lattice));
            }
        }
        out
    }

    /// Displace each coordinate by independent uniform noise in
    /// `[-amplitude, amplitude]`.
    pub fn random_perturb(&self, amplitude: f64, seed: u64) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::invalid(format!("perturbation amplitude must be >= 0, got {amplitude}")));
        }
        if amplitude == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Uniform::new_inclusive(-amplitude, amplitude);
        let mut out = self.clone();
        for x in out.positions.iter_mut() {
            for c in x.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
        Ok(out)
    }

    /// Uniformly scale the cell and positions by `factor` (fractional
    /// coordinates are preserved).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for x in out.positions.iter_mut() {
            *x = geometry::scale(*x, factor);
        }
        for row in out.lattice.iter_mut() {
            *row = geometry::scale(*row, factor);
        }
        out
    }

    pub fn load_xyz(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        parse_xyz(&text, path)
    }

    /// Extended-XYZ text for this system.
    pub fn to_xyz(&self, comment: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.len());
        let lat: Vec<String> = self.lattice.iter().flatten().map(|v| format!("{v:?}")).collect();
        let pbc: Vec<&str> = self.pbc.iter().map(|&p| if p { "T" } else { "F" }).collect();
        let _ = writeln!(
            out,
            "Lattice=\"{}\" Properties=species:S:1:pos:R:3 pbc=\"{}\" comment=\"{}\"",
            lat.join(" "),
            pbc.join(" "),
            comment.replace('"', "'")
        );
        for (x, &z) in self.positions.iter().zip(&self.species) {
            let _ = writeln!(
                out,
                "{} {:?} {:?} {:?}",
                elements::symbol(z).unwrap_or("X"),
                x[0],
                x[1],
                x[2]
            );
        }
        out
    }
}

fn orthogonal_direction(basis: &[Vec3]) -> Vec3 {
    let mut candidates = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if basis.len() == 2 {
        candidates.insert(0, geometry::cross(basis[0], basis[1]));
    }
    let mut best = [0.0, 0.0, 1.0];
    let mut best_norm = -1.0;
    for c in candidates {
        // Gram-Schmidt against the existing basis.
        let mut v = c;
        for b in basis {
            let bb = geometry::dot(*b, *b);
            v = geometry::sub(v, geometry::scale(*b, geometry::dot(v, *b) / bb));
        }
        let n = geometry::norm(v);
        if n > best_norm + 1e-12 {
            best_norm = n;
            best = geometry::scale(v, 1.0 / n);
        }
    }
    best
}

/// Parse extended-XYZ text. `origin` is only used in error messages.
pub fn parse_xyz(text: &str, origin: &Path) -> Result<AtomicSystem> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, count_line) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| err(1, format!("expected atom count, found {count_line:?}")))?;
    let (_, header) = lines.next().ok_or_else(|| err(2, "missing comment line".into()))?;
    let fields = parse_header(header).map_err(|m| err(2, m))?;

    let lattice = match fields.iter().find(|(k, _)| k.eq_ignore_ascii_case("lattice")) {
        Some((_, v)) => {
            let nums = parse_floats(v).map_err(|m| err(2, format!("Lattice: {m}")))?;
            if nums.len() != 9 {
                return Err(err(2, format!("Lattice needs 9 numbers, found {}", nums.len())));
            }
            Some([
                [nums[0], nums[1], nums[2]],
                [nums[3], nums[4], nums[5]],
                [nums[6], nums[7], nums[8]],
            ])
        }
        None => None,
    };
    let pbc = match fields.iter().find(|(k, _)| k.eq_ignore_ascii_case("pbc")) {
        Some((_, v)) => {
            let flags: Vec<&str> = v.split_whitespace().collect();
            if flags.len() != 3 {
                return Err(err(2, format!("pbc needs 3 flags, found {v:?}")));
            }
            let mut pbc = [false; 3];
            for (slot, f) in pbc.iter_mut().zip(flags) {
                *slot = match f {
                    "T" | "t" | "True" | "true" | "1" => true,
                    "F" | "f" | "False" | "false" | "0" => false,
                    other => return Err(err(2, format!("bad pbc flag {other:?}"))),
                };
            }
            pbc
        }
        None => [lattice.is_some(); 3],
    };
    if pbc.iter().any(|&p| p) && lattice.is_none() {
        return Err(err(2, "periodic boundaries requested but no Lattice given".into()));
    }

    let mut positions = Vec::with_capacity(count);
    let mut species = Vec::with_capacity(count);
    for _ in 0..count {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| err(positions.len() + 3, format!("expected {count} atom lines")))?;
        let lineno = idx + 1;
        let mut parts = line.split_whitespace();
        let sym = parts.next().ok_or_else(|| err(lineno, "empty atom line".into()))?;
        let z = elements::atomic_number(sym)
            .ok_or_else(|| err(lineno, format!("unknown element symbol {sym:?}")))?;
        let mut x = [0.0; 3];
        for (k, slot) in x.iter_mut().enumerate() {
            let tok = parts
                .next()
                .ok_or_else(|| err(lineno, format!("missing coordinate {k}")))?;
            *slot = tok
                .parse()
                .map_err(|_| err(lineno, format!("bad coordinate {tok:?}")))?;
        }
        positions.push(x);
        species.push(z);
    }
    let lattice = lattice.unwrap_or([[0.0; 3]; 3]);
    AtomicSystem::new(positions, lattice, species, pbc).map_err(|e| err(2, e.to_string()))
}

fn parse_header(line: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            // bare word, e.g. a free-form comment
            out.push((key, String::new()));
            continue;
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            for c in chars.by_ref() {
                if c == '"' {
                    closed = true;
                    break;
                }
                value.push(c);
            }
            if !closed {
                return Err(format!("unterminated quote in value of {key}"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.push((key, value));
    }
    Ok(out)
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect()
}
