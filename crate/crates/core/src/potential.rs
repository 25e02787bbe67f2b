//! A small smooth message-passing potential with analytic forces and virial
//! stress, evaluated through the distributed engine.
//!
//! Atom layers: `h ← h + tanh(W m + b) − tanh(b)` with
//! `m_t = Σ_{s→t} h_s ⊙ φ(d)`, `φ = fc(d)·R g(d)` (Gaussian basis `g`,
//! cosine cutoff `fc`). With the three-body graph enabled, bond features
//! `b0 = fc3(d)·Rb g3(d)` are updated once from angle cosines of adjacent
//! bonds and added to the filter of the final atom layer. Per-atom energy is
//! `readout·h_L` plus half of a smooth Morse pair term per incoming edge.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elements::MAX_Z;
use crate::engine::{Block, Distributed, Exchange, Layer, Level, Phase, Timings};
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::system::AtomicSystem;

const MAGIC: &[u8; 4] = b"SGTP";
const VERSION: u32 = 1;
const FLAG_THREEBODY: u32 = 1;

/// Smooth Morse-like pair term `D[(1 − e^{−a(d−r0)})² − 1]·fc(d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPrior {
    pub depth: f64,
    pub stiffness: f64,
    pub r0: f64,
}

impl Default for PairPrior {
    fn default() -> Self {
        PairPrior {
            depth: 0.1,
            stiffness: 1.5,
            r0: 1.6,
        }
    }
}

impl PairPrior {
    /// Value and derivative of the bare Morse term.
    fn eval(&self, d: f64) -> (f64, f64) {
        let x = (-self.stiffness * (d - self.r0)).exp();
        let v = self.depth * ((1.0 - x) * (1.0 - x) - 1.0);
        let dv = 2.0 * self.depth * self.stiffness * (1.0 - x) * x;
        (v, dv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPotentialParams {
    pub features: usize,
    pub basis: usize,
    pub layers: usize,
    pub cutoff: f64,
    pub threebody_cutoff: Option<f64>,
    pub seed: u64,
    /// `MAX_Z × F`, row `Z − 1`.
    pub embedding: Vec<f64>,
    /// Per layer, `F × K`.
    pub radial: Vec<Vec<f64>>,
    /// Per layer, `F × F`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Three-body branch; empty when disabled.
    pub bond_radial: Vec<f64>,
    pub bond_angular: Vec<f64>,
    pub bond_weight: Vec<f64>,
    pub bond_bias: Vec<f64>,
    pub readout: Vec<f64>,
    pub pair: PairPrior,
}

impl ToyPotentialParams {
    /// Defaults: F = 16, K = 8, L = 2.
    pub fn default_with(cutoff: f64, threebody_cutoff: Option<f64>, seed: u64) -> Result<Self> {
        Self::new(16, 8, 2, cutoff, threebody_cutoff, seed)
    }

    pub fn new(
        features: usize,
        basis: usize,
        layers: usize,
        cutoff: f64,
        threebody_cutoff: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, k) = (features, basis);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..=scale)).collect() };
        let embedding = draw(MAX_Z * f, 1.0);
        let mut radial = Vec::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for _ in 0..layers {
            radial.push(draw(f * k, 0.5 / (k.max(1) as f64).sqrt()));
            weights.push(draw(f * f, 1.0 / (f.max(1) as f64).sqrt()));
            biases.push(draw(f, 0.1));
        }
        let (bond_radial, bond_angular, bond_weight, bond_bias) = if threebody_cutoff.is_some() {
            (
                draw(f * k, 0.5 / (k.max(1) as f64).sqrt()),
                draw(f * 4, 0.5),
                draw(f * f, 1.0 / (f.max(1) as f64).sqrt()),
                draw(f, 0.1),
            )
        } else {
            Default::default()
        };
        let readout = draw(f, 0.2);
        let params = ToyPotentialParams {
            features,
            basis,
            layers,
            cutoff,
            threebody_cutoff,
            seed,
            embedding,
            radial,
            weights,
            biases,
            bond_radial,
            bond_angular,
            bond_weight,
            bond_bias,
            readout,
            pair: PairPrior::default(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, k, l) = (self.features, self.basis, self.layers);
        if f == 0 || k < 2 || l == 0 {
            return Err(Error::Params(format!("need F >= 1, K >= 2, L >= 1; got F={f} K={k} L={l}")));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::Params(format!("cutoff must be positive, got {}", self.cutoff)));
        }
        if let Some(r3) = self.threebody_cutoff {
            if !(r3 > 0.0 && r3 <= self.cutoff) {
                return Err(Error::Params(format!(
                    "three-body cutoff {r3} must lie in (0, {}]",
                    self.cutoff
                )));
            }
        }
        let three = self.threebody_cutoff.is_some();
        let shapes: [(&str, usize, usize); 6] = [
            ("embedding", self.embedding.len(), MAX_Z * f),
            ("readout", self.readout.len(), f),
            ("bond_radial", self.bond_radial.len(), if three { f * k } else { 0 }),
            ("bond_angular", self.bond_angular.len(), if three { f * 4 } else { 0 }),
            ("bond_weight", self.bond_weight.len(), if three { f * f } else { 0 }),
            ("bond_bias", self.bond_bias.len(), if three { f } else { 0 }),
        ];
        for (name, found, want) in shapes {
            if found != want {
                return Err(Error::Params(format!("{name}: expected {want} values, found {found}")));
            }
        }
        if self.radial.len() != l || self.weights.len() != l || self.biases.len() != l {
            return Err(Error::Params(format!("expected {l} layers of weights")));
        }
        for i in 0..l {
            if self.radial[i].len() != f * k || self.weights[i].len() != f * f || self.biases[i].len() != f {
                return Err(Error::Params(format!("layer {i} has wrong weight shapes")));
            }
        }
        let pair = [self.pair.depth, self.pair.stiffness, self.pair.r0];
        if self.all_values().any(|v| !v.is_finite()) || pair.iter().any(|v| !v.is_finite()) {
            return Err(Error::Params("non-finite parameter".into()));
        }
        Ok(())
    }

    fn all_values(&self) -> impl Iterator<Item = &f64> {
        self.embedding
            .iter()
            .chain(self.radial.iter().flatten())
            .chain(self.weights.iter().flatten())
            .chain(self.biases.iter().flatten())
            .chain(&self.bond_radial)
            .chain(&self.bond_angular)
            .chain(&self.bond_weight)
            .chain(&self.bond_bias)
            .chain(&self.readout)
    }

    /// Flat little-endian blob: magic, version, F, K, L, flags, scalars,
    /// then every array in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let flags = if self.threebody_cutoff.is_some() { FLAG_THREEBODY } else { 0 };
        for v in [VERSION, self.features as u32, self.basis as u32, self.layers as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        let scalars = [
            self.cutoff,
            self.threebody_cutoff.unwrap_or(0.0),
            self.pair.depth,
            self.pair.stiffness,
            self.pair.r0,
        ];
        for v in scalars.iter().chain(self.all_values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader(bytes);
        if rd.take(4)? != MAGIC {
            return Err(Error::Params("bad magic".into()));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = u32::from_le_bytes(rd.take(4)?.try_into().unwrap()) as usize;
        }
        let [version, f, k, l, flags] = header;
        if version != VERSION as usize {
            return Err(Error::Params(format!("unsupported version {version}")));
        }
        if f == 0 || f > 4096 || k > 4096 || l > 1024 {
            return Err(Error::Params(format!("implausible header F={f} K={k} L={l}")));
        }
        let seed = u64::from_le_bytes(rd.take(8)?.try_into().unwrap());
        let s = rd.floats(5)?;
        let three = flags as u32 & FLAG_THREEBODY != 0;
        let t = |n: usize| if three { n } else { 0 };
        let embedding = rd.floats(MAX_Z * f)?;
        let radial = (0..l).map(|_| rd.floats(f * k)).collect::<Result<Vec<_>>>()?;
        let weights = (0..l).map(|_| rd.floats(f * f)).collect::<Result<Vec<_>>>()?;
        let biases = (0..l).map(|_| rd.floats(f)).collect::<Result<Vec<_>>>()?;
        let params = ToyPotentialParams {
            features: f,
            basis: k,
            layers: l,
            cutoff: s[0],
            threebody_cutoff: three.then_some(s[1]),
            seed,
            embedding,
            radial,
            weights,
            biases,
            bond_radial: rd.floats(t(f * k))?,
            bond_angular: rd.floats(t(f * 4))?,
            bond_weight: rd.floats(t(f * f))?,
            bond_bias: rd.floats(t(f))?,
            readout: rd.floats(f)?,
            pair: PairPrior {
                depth: s[2],
                stiffness: s[3],
                r0: s[4],
            },
        };
        if !rd.0.is_empty() {
            return Err(Error::Params("trailing bytes in parameter blob".into()));
        }
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Params("truncated parameter blob".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutput {
    /// eV.
    pub energy: f64,
    pub per_atom_energy: Vec<f64>,
    /// eV/Å.
    pub forces: Vec<Vec3>,
    /// `(1/Ω) Σ sym(r ⊗ ∂E/∂r)` in eV/Å³; zero for cells without volume.
    pub stress: Mat3,
}

#[inline]
fn cosine_cutoff(d: f64, rc: f64) -> (f64, f64) {
    if d >= rc {
        return (0.0, 0.0);
    }
    let a = std::f64::consts::PI / rc;
    (0.5 * ((a * d).cos() + 1.0), -0.5 * a * (a * d).sin())
}

/// Gaussian basis on `K` centres spanning `[0, rc]`: values and derivatives.
fn gaussian_basis(d: f64, rc: f64, g: &mut [f64], dg: &mut [f64]) {
    let k = g.len();
    let width = rc / (k - 1) as f64;
    let inv = 1.0 / (width * width);
    for i in 0..k {
        let x = d - rc * i as f64 / (k - 1) as f64;
        g[i] = (-0.5 * x * x * inv).exp();
        dg[i] = -x * inv * g[i];
    }
}

/// `out = M v` for row-major `M` (`rows × v.len()`).
#[inline]
fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        let mut acc = 0.0;
        for c in 0..n {
            acc += row[c] * v[c];
        }
        *o = acc;
    }
}

/// `out = Mᵀ v` for row-major `M` (`v.len() × out.len()`).
#[inline]
fn mat_t_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    for (r, &x) in v.iter().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        for c in 0..n {
            out[c] += row[c] * x;
        }
    }
}

const NONE: usize = usize::MAX;

/// Per-partition working state, laid out on the partition's local rows.
struct Local {
    f: usize,
    k: usize,
    // Owned atom edges.
    esrc: Vec<usize>,
    edst: Vec<usize>,
    egid: Vec<usize>,
    ebond: Vec<usize>,
    basis: Vec<f64>,
    dbasis: Vec<f64>,
    fc: Vec<f64>,
    dfc: Vec<f64>,
    h: Vec<Block>,
    z: Vec<Block>,
    cursor: usize,
    energy: Block,
    // Bond rows.
    /// Owned bond rows in ascending global id (line-edge target order).
    bond_owned: Vec<usize>,
    bond_gid: Vec<usize>,
    bond_atoms: Vec<(usize, usize)>,
    line_src: Vec<usize>,
    line_dst: Vec<usize>,
    b0: Block,
    b1: Block,
    bz: Block,
    // Reverse pass.
    hg: Block,
    b1g: Block,
    b0g: Block,
    bvec: Block,
    dd: Vec<f64>,
    gx: Block,
    virial: Mat3,
}

fn current_h(s: &mut Local) -> &mut Block {
    let c = s.cursor;
    &mut s.h[c]
}
fn sel_b0(s: &mut Local) -> &mut Block {
    &mut s.b0
}
fn sel_b1(s: &mut Local) -> &mut Block {
    &mut s.b1
}
fn sel_hg(s: &mut Local) -> &mut Block {
    &mut s.hg
}
fn sel_b1g(s: &mut Local) -> &mut Block {
    &mut s.b1g
}
fn sel_b0g(s: &mut Local) -> &mut Block {
    &mut s.b0g
}
fn sel_bvec(s: &mut Local) -> &mut Block {
    &mut s.bvec
}
fn sel_gx(s: &mut Local) -> &mut Block {
    &mut s.gx
}

fn ex(level: Level, reverse: bool, select: fn(&mut Local) -> &mut Block) -> Exchange<Local> {
    Exchange { level, reverse, select }
}

#[derive(Clone, Copy)]
struct Model<'a> {
    dist: &'a Distributed,
    params: &'a ToyPotentialParams,
    r3: Option<f64>,
}

impl Model<'_> {
    fn graph_vector(&self, e: usize) -> (Vec3, f64) {
        (self.dist.graph.vector[e], self.dist.graph.distance[e])
    }

    /// Local state with embeddings and edge bases filled in.
    fn init_local(&self, i: usize) -> Local {
        let params = self.params;
        let (f, k, l) = (params.features, params.basis, params.layers);
        let part = &self.dist.atoms.parts[i];
        let n = part.num_rows();
        let ne = part.num_edges();
        let mut h0 = Block::zeros(n, f);
        for r in 0..n {
            let z = self.dist.system.species[part.node_array[r]] as usize;
            h0.row_mut(r).copy_from_slice(&params.embedding[(z - 1) * f..z * f]);
        }
        let mut basis = vec![0.0; ne * k];
        let mut dbasis = vec![0.0; ne * k];
        let mut fc = vec![0.0; ne];
        let mut dfc = vec![0.0; ne];
        for (e, &g) in part.edge_global.iter().enumerate() {
            let d = self.dist.graph.distance[g];
            gaussian_basis(d, params.cutoff, &mut basis[e * k..(e + 1) * k], &mut dbasis[e * k..(e + 1) * k]);
            (fc[e], dfc[e]) = cosine_cutoff(d, params.cutoff);
        }
        let mut h = vec![h0];
        h.extend((0..l).map(|_| Block::zeros(n, f)));

        let mut nb = 0;
        let mut bond_owned = Vec::new();
        let (mut bond_gid, mut bond_atoms, mut line_src, mut line_dst) = Default::default();
        let mut ebond = vec![NONE; ne];
        if let (Some(lines), Some(_)) = (&self.dist.bonds, self.r3) {
            let bp = &lines.parts[i];
            nb = bp.num_rows();
            bond_owned = bp.owned_rows.clone();
            bond_gid = bp.bond_array.clone();
            bond_atoms = bp
                .bond_array
                .iter()
                .map(|&e| {
                    let g = &self.dist.graph;
                    (part.global_to_local[&g.src[e]], part.global_to_local[&g.dst[e]])
                })
                .collect();
            line_src = bp.line_src.clone();
            line_dst = bp.line_dst.clone();
            for (slot, g) in ebond.iter_mut().zip(&part.edge_global) {
                if let Some(&row) = bp.global_to_local.get(g) {
                    *slot = row;
                }
            }
        }
        Local {
            f,
            k,
            esrc: part.edge_src.clone(),
            edst: part.edge_dst.clone(),
            egid: part.edge_global.clone(),
            ebond,
            basis,
            dbasis,
            fc,
            dfc,
            h,
            z: (0..l).map(|_| Block::zeros(n, f)).collect(),
            cursor: 0,
            energy: Block::zeros(n, 1),
            bond_owned,
            bond_gid,
            bond_atoms,
            line_src,
            line_dst,
            b0: Block::zeros(nb, f),
            b1: Block::zeros(nb, f),
            bz: Block::zeros(nb, f),
            hg: Block::zeros(n, f),
            b1g: Block::zeros(nb, f),
            b0g: Block::zeros(nb, f),
            bvec: Block::zeros(nb, 3),
            dd: vec![0.0; ne],
            gx: Block::zeros(n, 3),
            virial: [[0.0; 3]; 3],
        }
    }

    fn owned_rows(&self, i: usize) -> &[usize] {
        &self.dist.atoms.parts[i].owned_rows
    }

    fn check_finite(&self, i: usize, block: &Block, layer: &str) -> Result<()> {
        for &r in self.owned_rows(i) {
            if block.row(r).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer.to_string(),
                    atom: self.dist.atoms.parts[i].node_array[r],
                });
            }
        }
        Ok(())
    }

    /// `b0 = fc3(d)·Rb g3(d)` on owned bond rows.
    fn bond_input(&self, s: &mut Local) {
        let r3 = self.r3.expect("three-body enabled");
        let k = s.k;
        let mut g = vec![0.0; k];
        let mut dg = vec![0.0; k];
        for &row in &s.bond_owned {
            let (_, d) = self.graph_vector(s.bond_gid[row]);
            gaussian_basis(d, r3, &mut g, &mut dg);
            let (c, _) = cosine_cutoff(d, r3);
            let out = s.b0.row_mut(row);
            mat_vec(&self.params.bond_radial, &g, out);
            for v in out.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Cosine of the angle at the shared atom and its gradients with
    /// respect to both bond vectors.
    fn angle(&self, e: usize, e_next: usize) -> (f64, Vec3, Vec3) {
        let (ra, da) = self.graph_vector(e);
        let (rb, db) = self.graph_vector(e_next);
        let u = geometry::scale(ra, 1.0 / da);
        let v = geometry::scale(rb, -1.0 / db);
        let c = geometry::dot(u, v);
        let dca = geometry::scale(geometry::sub(v, geometry::scale(u, c)), 1.0 / da);
        let dcb = geometry::scale(geometry::sub(u, geometry::scale(v, c)), -1.0 / db);
        (c, dca, dcb)
    }

    /// Angular weights `U ψ(c)` and their derivative in `c`.
    fn angular(&self, c: f64, a: &mut [f64], da: &mut [f64]) {
        let u = &self.params.bond_angular;
        let psi = [1.0, c, c * c, c * c * c];
        let dpsi = [0.0, 1.0, 2.0 * c, 3.0 * c * c];
        for r in 0..a.len() {
            let row = &u[r * 4..r * 4 + 4];
            a[r] = row[0] * psi[0] + row[1] * psi[1] + row[2] * psi[2] + row[3] * psi[3];
            da[r] = row[1] * dpsi[1] + row[2] * dpsi[2] + row[3] * dpsi[3];
        }
    }

    /// One bond update on owned bonds, messages in `(e′, e)` order.
    fn bond_update(&self, s: &mut Local) -> Result<()> {
        let r3 = self.r3.expect("three-body enabled");
        let f = s.f;
        let p = self.params;
        let mut m = vec![0.0; f];
        let mut a = vec![0.0; f];
        let mut da = vec![0.0; f];
        let mut z = vec![0.0; f];
        let mut k = 0;
        let nl = s.line_src.len();
        for idx in 0..s.bond_owned.len() {
            let row = s.bond_owned[idx];
            m.fill(0.0);
            while k < nl && s.line_dst[k] == row {
                let e = s.line_src[k];
                let (c, _, _) = self.angle(s.bond_gid[e], s.bond_gid[row]);
                self.angular(c, &mut a, &mut da);
                let b0 = s.b0.row(e);
                for x in 0..f {
                    m[x] += a[x] * b0[x];
                }
                k += 1;
            }
            mat_vec(&p.bond_weight, &m, &mut z);
            for x in 0..f {
                z[x] += p.bond_bias[x];
            }
            let (_, d) = self.graph_vector(s.bond_gid[row]);
            let (c3, _) = cosine_cutoff(d, r3);
            s.bz.row_mut(row).copy_from_slice(&z);
            for x in 0..f {
                let v = s.b0.row(row)[x] + c3 * (z[x].tanh() - p.bond_bias[x].tanh());
                s.b1.row_mut(row)[x] = v;
            }
            if s.b1.row(row).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: "bond update".into(),
                    atom: self.dist.graph.dst[s.bond_gid[row]],
                });
            }
        }
        debug_assert_eq!(k, nl, "line edges must target owned bonds in global order");
        Ok(())
    }

    /// Filter `φ_e` of layer `l` and (optionally) its derivative in `d`.
    fn filter(&self, s: &Local, l: usize, e: usize, phi: &mut [f64], dphi: Option<&mut [f64]>) {
        let k = s.k;
        let radial = &self.params.radial[l];
        let g = &s.basis[e * k..(e + 1) * k];
        mat_vec(radial, g, phi);
        if let Some(dphi) = dphi {
            let dg = &s.dbasis[e * k..(e + 1) * k];
            mat_vec(radial, dg, dphi);
            for x in 0..phi.len() {
                dphi[x] = s.dfc[e] * phi[x] + s.fc[e] * dphi[x];
            }
        }
        for v in phi.iter_mut() {
            *v *= s.fc[e];
        }
        if l + 1 == self.params.layers && s.ebond[e] != NONE {
            for (v, b) in phi.iter_mut().zip(s.b1.row(s.ebond[e])) {
                *v += b;
            }
        }
    }

    fn atom_layer(&self, i: usize, l: usize, s: &mut Local) -> Result<()> {
        let f = s.f;
        let p = self.params;
        let n = s.h[l].rows;
        let mut m = Block::zeros(n, f);
        let mut phi = vec![0.0; f];
        for e in 0..s.esrc.len() {
            self.filter(s, l, e, &mut phi, None);
            let (src, dst) = (s.esrc[e], s.edst[e]);
            let hs = s.h[l].row(src);
            let out = m.row_mut(dst);
            for x in 0..f {
                out[x] += hs[x] * phi[x];
            }
        }
        let mut z = vec![0.0; f];
        for &r in &self.dist.atoms.parts[i].owned_rows {
            mat_vec(&p.weights[l], m.row(r), &mut z);
            for x in 0..f {
                z[x] += p.biases[l][x];
            }
            s.z[l].row_mut(r).copy_from_slice(&z);
            let (prev, next) = s.h.split_at_mut(l + 1);
            let (hin, hout) = (prev[l].row(r), next[0].row_mut(r));
            for x in 0..f {
                hout[x] = hin[x] + (z[x].tanh() - p.biases[l][x].tanh());
            }
        }
        s.cursor = l + 1;
        self.check_finite(i, &s.h[l + 1], &format!("atom layer {l}"))
    }

    fn readout(&self, i: usize, s: &mut Local) -> Result<()> {
        let p = self.params;
        let top = &s.h[p.layers];
        s.energy.fill(0.0);
        for e in 0..s.esrc.len() {
            let (v, _) = p.pair.eval(self.dist.graph.distance[s.egid[e]]);
            s.energy.data[s.edst[e]] += 0.5 * v * s.fc[e];
        }
        for &r in self.owned_rows(i) {
            let mut acc = 0.0;
            for (a, b) in p.readout.iter().zip(top.row(r)) {
                acc += a * b;
            }
            s.energy.data[r] += acc;
        }
        self.check_finite(i, &s.energy, "readout")
    }

    fn atom_layer_backward(&self, i: usize, l: usize, s: &mut Local) {
        let f = s.f;
        let p = self.params;
        let n = s.hg.rows;
        // Gradient with respect to the message of each owned atom.
        let mut mg = Block::zeros(n, f);
        let mut zg = vec![0.0; f];
        for &r in self.owned_rows(i) {
            let (z, hg) = (s.z[l].row(r), s.hg.row(r));
            for x in 0..f {
                let t = z[x].tanh();
                zg[x] = hg[x] * (1.0 - t * t);
            }
            mat_t_vec(&p.weights[l], &zg, mg.row_mut(r));
        }
        let mut phi = vec![0.0; f];
        let mut dphi = vec![0.0; f];
        let last = l + 1 == p.layers;
        for e in 0..s.esrc.len() {
            self.filter(s, l, e, &mut phi, Some(&mut dphi));
            let (src, dst) = (s.esrc[e], s.edst[e]);
            let mgt = mg.row(dst);
            let mut dd = 0.0;
            for x in 0..f {
                let phig = mgt[x] * s.h[l].row(src)[x];
                dd += phig * dphi[x];
            }
            s.dd[e] += dd;
            if last && s.ebond[e] != NONE {
                let hs = s.h[l].row(src);
                let row = s.ebond[e];
                for x in 0..f {
                    s.b1g.row_mut(row)[x] += mgt[x] * hs[x];
                }
            }
            let hg = s.hg.row_mut(src);
            for x in 0..f {
                hg[x] += mgt[x] * phi[x];
            }
        }
    }

    fn bond_update_backward(&self, s: &mut Local) {
        let r3 = self.r3.expect("three-body enabled");
        let f = s.f;
        let p = self.params;
        let mut zg = vec![0.0; f];
        let mut mg = vec![0.0; f];
        let mut a = vec![0.0; f];
        let mut da = vec![0.0; f];
        let mut k = 0;
        let nl = s.line_src.len();
        for idx in 0..s.bond_owned.len() {
            let row = s.bond_owned[idx];
            let gid = s.bond_gid[row];
            let (r, d) = self.graph_vector(gid);
            let (c3, dc3) = cosine_cutoff(d, r3);
            let mut dd = 0.0;
            for x in 0..f {
                let g = s.b1g.row(row)[x];
                let t = s.bz.row(row)[x].tanh();
                s.b0g.row_mut(row)[x] += g;
                dd += g * (t - p.bond_bias[x].tanh()) * dc3;
                zg[x] = g * c3 * (1.0 - t * t);
            }
            add_row(&mut s.bvec, row, geometry::scale(r, dd / d));
            mat_t_vec(&p.bond_weight, &zg, &mut mg);
            while k < nl && s.line_dst[k] == row {
                let e = s.line_src[k];
                let (c, dca, dcb) = self.angle(s.bond_gid[e], gid);
                self.angular(c, &mut a, &mut da);
                let mut cg = 0.0;
                for x in 0..f {
                    cg += mg[x] * s.b0.row(e)[x] * da[x];
                    s.b0g.row_mut(e)[x] += mg[x] * a[x];
                }
                add_row(&mut s.bvec, e, geometry::scale(dca, cg));
                add_row(&mut s.bvec, row, geometry::scale(dcb, cg));
                k += 1;
            }
        }
    }

    /// Push `b0` gradients of owned bonds into their bond vectors.
    fn bond_input_backward(&self, s: &mut Local) {
        let r3 = self.r3.expect("three-body enabled");
        let k = s.k;
        let mut g = vec![0.0; k];
        let mut dg = vec![0.0; k];
        let mut rg = vec![0.0; s.f];
        let mut rdg = vec![0.0; s.f];
        for idx in 0..s.bond_owned.len() {
            let row = s.bond_owned[idx];
            let (r, d) = self.graph_vector(s.bond_gid[row]);
            gaussian_basis(d, r3, &mut g, &mut dg);
            let (c, dc) = cosine_cutoff(d, r3);
            mat_vec(&self.params.bond_radial, &g, &mut rg);
            mat_vec(&self.params.bond_radial, &dg, &mut rdg);
            let mut dd = 0.0;
            for x in 0..s.f {
                dd += s.b0g.row(row)[x] * (dc * rg[x] + c * rdg[x]);
            }
            add_row(&mut s.bvec, row, geometry::scale(r, dd / d));
        }
    }

    /// Position gradients and virial from owned atom edges and owned bonds.
    fn geometry_backward(&self, s: &mut Local) {
        let p = self.params;
        for e in 0..s.esrc.len() {
            let (r, d) = self.graph_vector(s.egid[e]);
            let (v, dv) = p.pair.eval(d);
            let dd = s.dd[e] + 0.5 * (dv * s.fc[e] + v * s.dfc[e]);
            let g = geometry::scale(r, dd / d);
            let (src, dst) = (s.esrc[e], s.edst[e]);
            apply_edge_gradient(s, src, dst, r, g);
        }
        for idx in 0..s.bond_owned.len() {
            let row = s.bond_owned[idx];
            let (r, _) = self.graph_vector(s.bond_gid[row]);
            let g = [s.bvec.row(row)[0], s.bvec.row(row)[1], s.bvec.row(row)[2]];
            let (src, dst) = s.bond_atoms[row];
            apply_edge_gradient(s, src, dst, r, g);
        }
    }
}

#[inline]
fn add_row(block: &mut Block, row: usize, v: Vec3) {
    let out = block.row_mut(row);
    for x in 0..3 {
        out[x] += v[x];
    }
}

/// `r = x_src − x_dst + offset`, so `∂E/∂x_src += g` and `∂E/∂x_dst −= g`.
fn apply_edge_gradient(s: &mut Local, src: usize, dst: usize, r: Vec3, g: Vec3) {
    add_row(&mut s.gx, src, g);
    add_row(&mut s.gx, dst, geometry::scale(g, -1.0));
    for a in 0..3 {
        for b in 0..3 {
            s.virial[a][b] += r[a] * g[b];
        }
    }
}

/// Energy, forces and stress through the distributed engine.
pub fn forward_distributed(dist: &Distributed, params: &ToyPotentialParams) -> Result<PotentialOutput> {
    forward_distributed_timed(dist, params, &mut Timings::default())
}

pub fn forward_distributed_timed(
    dist: &Distributed,
    params: &ToyPotentialParams,
    timings: &mut Timings,
) -> Result<PotentialOutput> {
    params.validate()?;
    if dist.graph.cutoff != params.cutoff {
        return Err(Error::invalid(format!(
            "graph cutoff {} does not match potential cutoff {}",
            dist.graph.cutoff, params.cutoff
        )));
    }
    let r3 = match (params.threebody_cutoff, &dist.bonds) {
        (None, _) => None,
        (Some(r), Some(lines)) if lines.r == r => Some(r),
        (Some(r), _) => {
            return Err(Error::invalid(format!(
                "potential needs a three-body graph with cutoff {r}"
            )))
        }
    };
    let model = Model { dist, params, r3 };
    let l_count = params.layers;

    let start = Instant::now();
    let mut slots: Vec<Option<Local>> = (0..dist.p()).map(|_| None).collect();
    dist.for_each_partition(&mut slots, &|i, slot| {
        *slot = Some(model.init_local(i));
        Ok(())
    })?;
    let mut states: Vec<Local> = slots.into_iter().map(|s| s.expect("initialized")).collect();
    timings.add(Phase::FeatureCalculation, start.elapsed());

    // Forward.
    let start = Instant::now();
    if r3.is_some() {
        let input = |_: usize, s: &mut Local| {
            model.bond_input(s);
            Ok(())
        };
        let update = |_: usize, s: &mut Local| model.bond_update(s);
        dist.run_layered(
            &mut states,
            &[
                Layer {
                    run: &input,
                    exchanges: vec![ex(Level::Bonds, false, sel_b0)],
                },
                Layer {
                    run: &update,
                    exchanges: vec![ex(Level::Bonds, false, sel_b1)],
                },
            ],
        )?;
    }
    let atom_fns: Vec<_> = (0..l_count)
        .map(|l| move |i: usize, s: &mut Local| model.atom_layer(i, l, s))
        .collect();
    let mut layers: Vec<Layer<Local>> = atom_fns
        .iter()
        .map(|run| Layer {
            run: run as &(dyn Fn(usize, &mut Local) -> Result<()> + Sync),
            exchanges: vec![ex(Level::Atoms, false, current_h)],
        })
        .collect();
    let readout = |i: usize, s: &mut Local| model.readout(i, s);
    layers.push(Layer {
        run: &readout,
        exchanges: vec![],
    });
    dist.run_layered(&mut states, &layers)?;
    timings.add(Phase::ForwardPass, start.elapsed());

    // Reverse.
    let start = Instant::now();
    let seed = |i: usize, s: &mut Local| {
        for &r in model.owned_rows(i) {
            s.hg.row_mut(r).copy_from_slice(&params.readout);
        }
        Ok(())
    };
    dist.for_each_partition(&mut states, &seed)?;
    let back_fns: Vec<_> = (0..l_count)
        .rev()
        .map(|l| {
            move |i: usize, s: &mut Local| {
                model.atom_layer_backward(i, l, s);
                Ok(())
            }
        })
        .collect();
    let mut layers: Vec<Layer<Local>> = Vec::new();
    for (n, run) in back_fns.iter().enumerate() {
        let l = l_count - 1 - n;
        let mut exchanges = Vec::new();
        if l > 0 {
            exchanges.push(ex(Level::Atoms, true, sel_hg));
        }
        if l + 1 == l_count && r3.is_some() {
            exchanges.push(ex(Level::Bonds, true, sel_b1g));
        }
        layers.push(Layer {
            run: run as &(dyn Fn(usize, &mut Local) -> Result<()> + Sync),
            exchanges,
        });
    }
    let bond_back = |_: usize, s: &mut Local| {
        model.bond_update_backward(s);
        Ok(())
    };
    let bond_input_back = |_: usize, s: &mut Local| {
        model.bond_input_backward(s);
        Ok(())
    };
    if r3.is_some() {
        layers.push(Layer {
            run: &bond_back,
            exchanges: vec![ex(Level::Bonds, true, sel_b0g), ex(Level::Bonds, true, sel_bvec)],
        });
        layers.push(Layer {
            run: &bond_input_back,
            exchanges: vec![],
        });
    }
    let geometry_back = |_: usize, s: &mut Local| {
        model.geometry_backward(s);
        Ok(())
    };
    layers.push(Layer {
        run: &geometry_back,
        exchanges: vec![ex(Level::Atoms, true, sel_gx)],
    });
    dist.run_layered(&mut states, &layers)?;

    let n = dist.graph.num_nodes;
    let mut per_atom_energy = vec![0.0; n];
    let mut forces = vec![[0.0; 3]; n];
    let mut virial = [[0.0; 3]; 3];
    for (part, s) in dist.atoms.parts.iter().zip(&states) {
        for &r in &part.owned_rows {
            let g = part.node_array[r];
            per_atom_energy[g] = s.energy.data[r];
            let gx = s.gx.row(r);
            forces[g] = [-gx[0], -gx[1], -gx[2]];
        }
        for a in 0..3 {
            for b in 0..3 {
                virial[a][b] += s.virial[a][b];
            }
        }
    }
    let energy = per_atom_energy.iter().sum();
    let volume = dist.system.volume();
    let mut stress = [[0.0; 3]; 3];
    if dist.system.pbc.iter().any(|&p| p) && volume > 1e-12 {
        for a in 0..3 {
            for b in 0..3 {
                stress[a][b] = 0.5 * (virial[a][b] + virial[b][a]) / volume;
            }
        }
    }
    timings.add(Phase::BackwardPass, start.elapsed());
    Ok(PotentialOutput {
        energy,
        per_atom_energy,
        forces,
        stress,
    })
}

/// Single-partition evaluation.
pub fn forward_serial(system: &AtomicSystem, params: &ToyPotentialParams) -> Result<PotentialOutput> {
    let dist = Distributed::create_distributed(system, params.cutoff, params.threebody_cutoff, 1, 0)?;
    forward_distributed(&dist, params)
}

fn serial_energy(system: &AtomicSystem, params: &ToyPotentialParams) -> Result<f64> {
    Ok(forward_serial(system, params)?.energy)
}

/// Central differences of the serial energy, `F = −∂E/∂x`.
pub fn finite_difference_forces(system: &AtomicSystem, params: &ToyPotentialParams, eps: f64) -> Result<Vec<Vec3>> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-6, 1e-2]")));
    }
    let mut out = vec![[0.0; 3]; system.len()];
    let mut shifted = system.clone();
    for i in 0..system.len() {
        for a in 0..3 {
            let x = system.positions[i][a];
            shifted.positions[i][a] = x + eps;
            let plus = serial_energy(&shifted, params)?;
            shifted.positions[i][a] = x - eps;
            let minus = serial_energy(&shifted, params)?;
            shifted.positions[i][a] = x;
            out[i][a] = -(plus - minus) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Lattice and positions co-deformed by `x ← x (I + ε)`.
pub fn strained(system: &AtomicSystem, strain: &Mat3) -> AtomicSystem {
    let mut m = *strain;
    for (a, row) in m.iter_mut().enumerate() {
        row[a] += 1.0;
    }
    let mut out = system.clone();
    out.lattice = geometry::mat_mul(&system.lattice, &m);
    for x in out.positions.iter_mut() {
        *x = geometry::vec_mat(*x, &m);
    }
    out
}

/// Central differences of the energy under symmetric strain, divided by
/// the cell volume.
pub fn finite_difference_stress(system: &AtomicSystem, params: &ToyPotentialParams, eps: f64) -> Result<Mat3> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("strain step {eps} outside (0, 1e-3]")));
    }
    let volume = system.volume();
    let mut out = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            let mut strain = [[0.0; 3]; 3];
            strain[a][b] = eps;
            strain[b][a] = eps;
            let plus = serial_energy(&strained(system, &strain), params)?;
            strain[a][b] = -eps;
            strain[b][a] = -eps;
            let minus = serial_energy(&strained(system, &strain), params)?;
            // A diagonal entry moves one strain component, an off-diagonal
            // pair moves two.
            let parts = if a == b { 1.0 } else { 2.0 };
            out[a][b] = (plus - minus) / (2.0 * eps * parts * volume);
            out[b][a] = out[a][b];
        }
    }
    Ok(out)
}
