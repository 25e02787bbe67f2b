//! Directed atom graphs under periodic boundary conditions.
//!
//! [`build_neighbor_list`] is a multi-threaded cell list; bins are laid out
//! in fractional space with a perpendicular width of at least the cutoff,
//! and the stencil reaches as many bins as needed to cover the cutoff, so
//! cells thinner than the cutoff (multiple periodic images of the same pair,
//! self-image edges) are handled without special cases.
//! [`brute_force_neighbor_list`] scans all pairs over an explicit image range
//! and serves as the oracle.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::system::AtomicSystem;

/// Atom count above which the quadratic oracle refuses to run.
pub const BRUTE_FORCE_MAX_ATOMS: usize = 5000;

/// Directed edge list sorted by `(dst, src, image_offset)`.
///
/// Edge `k` points from `src[k]` (shifted by `image_offset[k]` cells) to
/// `dst[k]`; `vector[k] = x[src] - x[dst] + image_offset · lattice`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomGraph {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub image_offset: Vec<[i32; 3]>,
    pub distance: Vec<f64>,
    pub vector: Vec<Vec3>,
    pub cutoff: f64,
    pub num_nodes: usize,
    /// Lattice the offsets refer to. Equals the system lattice for fully
    /// periodic systems; open axes are padded.
    pub lattice: Mat3,
}

impl AtomGraph {
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// CSR-style offsets: incoming edges of node `v` are
    /// `incoming[v]..incoming[v + 1]`.
    pub fn incoming_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0usize; self.num_nodes + 1];
        for &d in &self.dst {
            offsets[d + 1] += 1;
        }
        for i in 0..self.num_nodes {
            offsets[i + 1] += offsets[i];
        }
        offsets
    }

    /// `(src, dst, offset)` triples, the identity of each edge.
    pub fn triples(&self) -> Vec<(usize, usize, [i32; 3])> {
        (0..self.num_edges())
            .map(|e| (self.src[e], self.dst[e], self.image_offset[e]))
            .collect()
    }

    /// Index of the edge `(dst, src, -offset)` for every edge.
    pub fn reverse_edges(&self) -> Result<Vec<usize>> {
        let offsets = self.incoming_offsets();
        (0..self.num_edges())
            .map(|e| {
                let (s, t, o) = (self.src[e], self.dst[e], self.image_offset[e]);
                let neg = [-o[0], -o[1], -o[2]];
                let range = offsets[s]..offsets[s + 1];
                let slice: Vec<(usize, [i32; 3])> =
                    range.clone().map(|k| (self.src[k], self.image_offset[k])).collect();
                slice
                    .binary_search(&(t, neg))
                    .map(|pos| range.start + pos)
                    .map_err(|_| Error::Consistency(format!("edge {e} has no reverse")))
            })
            .collect()
    }

    /// Debug dump: `src,dst,ox,oy,oz,distance`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("src,dst,ox,oy,oz,distance\n");
        for e in 0..self.num_edges() {
            let o = self.image_offset[e];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:?}",
                self.src[e], self.dst[e], o[0], o[1], o[2], self.distance[e]
            );
        }
        out
    }

    fn from_sorted_triples(
        system: &AtomicSystem,
        lattice: Mat3,
        cutoff: f64,
        triples: Vec<(usize, usize, [i32; 3])>,
    ) -> Self {
        let vector: Vec<Vec3> = triples
            .par_iter()
            .map(|&(s, t, o)| edge_vector(&system.positions, &lattice, s, t, o))
            .collect();
        let distance = vector.par_iter().map(|&v| geometry::norm(v)).collect();
        let mut src = Vec::with_capacity(triples.len());
        let mut dst = Vec::with_capacity(triples.len());
        let mut image_offset = Vec::with_capacity(triples.len());
        for (s, t, o) in triples {
            src.push(s);
            dst.push(t);
            image_offset.push(o);
        }
        AtomGraph {
            src,
            dst,
            image_offset,
            distance,
            vector,
            cutoff,
            num_nodes: system.len(),
            lattice,
        }
    }
}

/// `x[src] - x[dst] + offset · lattice`, evaluated in a fixed order so that
/// the reverse edge yields the exact negation.
#[inline]
pub fn edge_vector(positions: &[Vec3], lattice: &Mat3, src: usize, dst: usize, offset: [i32; 3]) -> Vec3 {
    geometry::add(
        geometry::sub(positions[src], positions[dst]),
        geometry::offset_vector(offset, lattice),
    )
}

fn check_inputs(system: &AtomicSystem, cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(Error::invalid(format!("cutoff must be positive, got {cutoff}")));
    }
    if system.is_empty() {
        return Err(Error::invalid("system has no atoms"));
    }
    system.validate()
}

/// Integer cell index and wrapped fractional coordinate of every atom.
fn wrapped_fractional(system: &AtomicSystem, lattice: &Mat3) -> Result<(Vec<[i32; 3]>, Vec<Vec3>)> {
    let inv = geometry::inverse(lattice).ok_or_else(|| Error::invalid("singular lattice"))?;
    let mut cells = Vec::with_capacity(system.len());
    let mut fracs = Vec::with_capacity(system.len());
    for &x in &system.positions {
        let f = geometry::vec_mat(x, &inv);
        let mut k = [0i32; 3];
        let mut w = [0.0; 3];
        for a in 0..3 {
            let fl = f[a].floor();
            k[a] = fl as i32;
            w[a] = f[a] - fl;
            if w[a] >= 1.0 {
                w[a] -= 1.0;
                k[a] += 1;
            }
            if w[a] < 0.0 {
                w[a] = 0.0;
            }
        }
        cells.push(k);
        fracs.push(w);
    }
    Ok((cells, fracs))
}

fn overlap_error(s: usize, t: usize) -> Error {
    Error::invalid(format!("atoms {s} and {t} overlap (zero-length edge)"))
}

/// Cell-list construction of the directed graph of all pairs within
/// `cutoff` (inclusive), over all periodic images.
pub fn build_neighbor_list(system: &AtomicSystem, cutoff: f64, n_threads: usize) -> Result<AtomGraph> {
    check_inputs(system, cutoff)?;
    let lattice = system.effective_lattice(cutoff);
    let (cells, fracs) = wrapped_fractional(system, &lattice)?;
    let widths = geometry::perpendicular_widths(&lattice);
    let n = system.len();

    // A hair of slack so rounding in the fractional transform cannot push a
    // pair at exactly the cutoff outside the stencil.
    let reach_len = cutoff * (1.0 + 1e-9) + 1e-12;
    let mut nbins = [1usize; 3];
    for a in 0..3 {
        nbins[a] = ((widths[a] / reach_len).floor() as usize).max(1);
    }
    let bin_limit = 8 * n + 64;
    while nbins.iter().product::<usize>() > bin_limit {
        let a = (0..3).max_by_key(|&a| nbins[a]).unwrap();
        nbins[a] = (nbins[a] / 2).max(1);
    }
    let mut reach = [0i64; 3];
    for a in 0..3 {
        let bin_width = widths[a] / nbins[a] as f64;
        reach[a] = (reach_len / bin_width).ceil() as i64;
    }

    let bin_coord = |w: Vec3| -> [usize; 3] {
        let mut b = [0usize; 3];
        for a in 0..3 {
            b[a] = ((w[a] * nbins[a] as f64) as usize).min(nbins[a] - 1);
        }
        b
    };
    let flat = |b: [usize; 3]| (b[0] * nbins[1] + b[1]) * nbins[2] + b[2];
    let total_bins = nbins.iter().product::<usize>();

    // Counting sort of atoms into bins.
    let atom_bins: Vec<[usize; 3]> = fracs.iter().map(|&w| bin_coord(w)).collect();
    let mut bin_start = vec![0usize; total_bins + 1];
    for b in &atom_bins {
        bin_start[flat(*b) + 1] += 1;
    }
    for i in 0..total_bins {
        bin_start[i + 1] += bin_start[i];
    }
    let mut fill = bin_start.clone();
    let mut bin_atoms = vec![0usize; n];
    for (i, b) in atom_bins.iter().enumerate() {
        let slot = &mut fill[flat(*b)];
        bin_atoms[*slot] = i;
        *slot += 1;
    }

        let positions = &system.positions;
    let work = |t: usize| -> Result<Vec<(usize, usize, [i32; 3])>> {
        let bt = atom_bins[t];
        let mut found = Vec::new();
        for dx in -reach[0]..=reach[0] {
            for dy in -reach[1]..=reach[1] {
                for dz in -reach[2]..=reach[2] {
                    let mut nb = [0usize; 3];
                    let mut shift = [0i32; 3];
                    for (a, d) in [dx, dy, dz].into_iter().enumerate() {
                        let idx = bt[a] as i64 + d;
                        let m = nbins[a] as i64;
                        nb[a] = idx.rem_euclid(m) as usize;
                        shift[a] = idx.div_euclid(m) as i32;
                    }
                    let f = flat(nb);
                    for &s in &bin_atoms[bin_start[f]..bin_start[f + 1]] {
                        let o = [
                            shift[0] - cells[s][0] + cells[t][0],
                            shift[1] - cells[s][1] + cells[t][1],
                            shift[2] - cells[s][2] + cells[t][2],
                        ];
                        if s == t && o == [0, 0, 0] {
                            continue;
                        }
                        let d = geometry::norm(edge_vector(positions, &lattice, s, t, o));
                        if d <= cutoff {
                            if d == 0.0 {
                                return Err(overlap_error(s, t));
                            }
                            found.push((s, t, o));
                        }
                    }
                }
            }
        }
        found.sort_unstable_by_key(|&(s, _, o)| (s, o));
        Ok(found)
    };

    let per_atom: Vec<Vec<(usize, usize, [i32; 3])>> = with_pool(n_threads, || {
        (0..n).into_par_iter().map(work).collect::<Result<Vec<_>>>()
    })?;
    let triples: Vec<_> = per_atom.into_iter().flatten().collect();
    Ok(with_pool(n_threads, || {
        AtomGraph::from_sorted_triples(system, lattice, cutoff, triples)
    }))
}

/// Run `f` on a rayon pool with `n_threads` workers (0 = rayon default).
pub(crate) fn with_pool<T: Send>(n_threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if n_threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(n_threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Exhaustive scan over all atom pairs and all images with offsets in
/// `±(ceil(cutoff / width) + 1)` along each periodic axis.
pub fn brute_force_neighbor_list(system: &AtomicSystem, cutoff: f64) -> Result<AtomGraph> {
    check_inputs(system, cutoff)?;
    if system.len() > BRUTE_FORCE_MAX_ATOMS {
        return Err(Error::TooManyAtoms {
            atoms: system.len(),
            limit: BRUTE_FORCE_MAX_ATOMS,
        });
    }
    let lattice = system.effective_lattice(cutoff);
    let inv = geometry::inverse(&lattice).ok_or_else(|| Error::invalid("singular lattice"))?;
    let widths = geometry::perpendicular_widths(&lattice);
    let mut range = [0i32; 3];
    for a in 0..3 {
        if system.pbc[a] {
            range[a] = (cutoff / widths[a]).ceil() as i32 + 1;
        }
    }
    let home: Vec<[i32; 3]> = system
        .positions
        .iter()
        .map(|&x| {
            let f = geometry::vec_mat(x, &inv);
            [f[0].floor() as i32, f[1].floor() as i32, f[2].floor() as i32]
        })
        .collect();
    let n = system.len();
    let mut triples = Vec::new();
    for t in 0..n {
        for s in 0..n {
            let mut base = [0i32; 3];
            for a in 0..3 {
                if system.pbc[a] {
                    base[a] = home[t][a] - home[s][a];
                }
            }
            for i in -range[0]..=range[0] {
                for j in -range[1]..=range[1] {
                    for k in -range[2]..=range[2] {
                        let o = [base[0] + i, base[1] + j, base[2] + k];
                        if s == t && o == [0, 0, 0] {
                            continue;
                        }
                        let d = geometry::norm(edge_vector(&system.positions, &lattice, s, t, o));
                        if d <= cutoff {
                            if d == 0.0 {
                                return Err(overlap_error(s, t));
                            }
                            triples.push((s, t, o));
                        }
                    }
                }
            }
        }
    }
    triples.sort_unstable_by_key(|&(s, t, o)| (t, s, o));
    Ok(AtomGraph::from_sorted_triples(system, lattice, cutoff, triples))
}
