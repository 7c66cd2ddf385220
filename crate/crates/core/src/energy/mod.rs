//! Pairwise placement energies and allocation energy evaluation.
//!
//! The energy of an allocation is the quadratic form `vec(X)ᵀ Q vec(X)` over
//! placement indices `a = t·n + p` (species-major, so `vec` stacks the columns
//! of the `n × (k+1)` allocation matrix). Off-diagonal entries hold half of a
//! pair's interaction, diagonal entries the self energy of a single placement,
//! and every row or column belonging to the void species is zero.

mod potential;

pub use potential::{
    buckingham_image_sum, buckingham_pair, ewald_pair, Buckingham, EwaldKernel, EwaldParams, ForceField,
    PairKernel, ResolvedEwald, COULOMB_EV_A,
};

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Allocation, PositionSet, SpeciesSet};
use crate::par;

/// Largest `n·(k+1)` materialized as a dense table.
pub const DENSE_LIMIT: usize = 4096;

/// Anything that can report `α(p1,t1,p2,t2)`. Void (`t == k`) must give zero.
pub trait EnergySource: Sync {
    fn n_positions(&self) -> usize;
    /// Number of real species `k` (void excluded).
    fn n_species(&self) -> usize;
    fn alpha(&self, p1: usize, t1: usize, p2: usize, t2: usize) -> f64;

    /// `out[p·(k+1) + t] = Σ α(p,t,q,s)·S[q,s]`; the gradient of the soft
    /// energy is twice this.
    fn soft_matvec(&self, s: &SoftAllocation, out: &mut [f64]) {
        let n = self.n_positions();
        let k = self.n_species();
        let w = k + 1;
        par::for_each_chunk_mut(out, w, |p, row| {
            for (t, o) in row.iter_mut().enumerate() {
                *o = 0.0;
                if t == k {
                    continue;
                }
                let mut acc = 0.0;
                for q in 0..n {
                    for u in 0..k {
                        let v = s.get(q, u);
                        if v != 0.0 {
                            acc += self.alpha(p, t, q, u) * v;
                        }
                    }
                }
                *o = acc;
            }
        });
    }
}

impl EnergySource for PairKernel {
    fn n_positions(&self) -> usize {
        self.g().pow(3)
    }

    fn n_species(&self) -> usize {
        self.species()
    }

    fn alpha(&self, p1: usize, t1: usize, p2: usize, t2: usize) -> f64 {
        self.value(p1, t1, p2, t2)
    }
}

/// Dense symmetric `n(k+1) × n(k+1)` table.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n: usize,
    k: usize,
    data: Vec<f64>,
    pub provenance: String,
}

impl QTable {
    pub fn zeros(n: usize, k: usize) -> Self {
        let dim = n * (k + 1);
        QTable { n, k, data: vec![0.0; dim * dim], provenance: "zeros".into() }
    }

    /// Placement index under the species-major `vec` convention.
    #[inline]
    pub fn index(&self, p: usize, t: usize) -> usize {
        t * self.n + p
    }

    pub fn dim(&self) -> usize {
        self.n * (self.k + 1)
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.dim() + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        let d = self.dim();
        &self.data[a * d..(a + 1) * d]
    }

    /// Sets `Q[a,b]` and `Q[b,a]`. Writes into void rows are rejected.
    pub fn set_symmetric(&mut self, a: usize, b: usize, v: f64) -> Result<()> {
        let void = |i: usize| i / self.n == self.k;
        if void(a) || void(b) {
            return Err(Error::InvalidParameters("void placements carry no energy".into()));
        }
        let d = self.dim();
        self.data[a * d + b] = v;
        self.data[b * d + a] = v;
        Ok(())
    }

    /// Expands any energy source into a dense table.
    pub fn from_source<S: EnergySource + ?Sized>(src: &S, provenance: &str) -> Result<Self> {
        let n = src.n_positions();
        let k = src.n_species();
        let dim = n * (k + 1);
        if dim > DENSE_LIMIT {
            return Err(Error::Config(format!(
                "dense table of dimension {dim} exceeds {DENSE_LIMIT}; use the lazy source"
            )));
        }
        let mut data = vec![0.0; dim * dim];
        par::for_each_chunk_mut(&mut data, dim, |a, row| {
            let (t1, p1) = (a / n, a % n);
            if t1 == k {
                return;
            }
            for (b, x) in row.iter_mut().enumerate() {
                let (t2, p2) = (b / n, b % n);
                if t2 < k {
                    *x = src.alpha(p1, t1, p2, t2);
                }
            }
        });
        Ok(QTable { n, k, data, provenance: provenance.into() })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let d = self.dim();
        (0..d).all(|a| (a + 1..d).all(|b| (self.get(a, b) - self.get(b, a)).abs() <= tol))
    }

    pub fn void_is_zero(&self) -> bool {
        let d = self.dim();
        let start = self.k * self.n;
        (start..d).all(|a| self.row(a).iter().all(|&x| x == 0.0))
            && (0..d).all(|a| (start..d).all(|b| self.get(a, b) == 0.0))
    }

    /// SHA-256 over dimensions and entries, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.k as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Binary form: `b"QTBL"`, version, n, k, convention id, then the upper
    /// triangle (`a ≤ b`) row by row as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(QFILE_MAGIC)?;
        w.write_all(&QFILE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.k as u64).to_le_bytes())?;
        w.write_all(&VEC_SPECIES_MAJOR.to_le_bytes())?;
        let d = self.dim();
        let mut buf = Vec::with_capacity(d * 8);
        for a in 0..d {
            buf.clear();
            for b in a..d {
                buf.extend_from_slice(&self.get(a, b).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != QFILE_MAGIC {
            return Err(Error::Format("bad Q-table magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != QFILE_VERSION {
            return Err(Error::Format(format!("unsupported Q-table version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let conv = read_u32(&mut r)?;
        if conv != VEC_SPECIES_MAJOR {
            return Err(Error::Format(format!("unknown vec convention {conv}")));
        }
        let mut q = QTable::zeros(n, k);
        q.provenance = "file".into();
        let d = q.dim();
        let mut b8 = [0u8; 8];
        for a in 0..d {
            for b in a..d {
                r.read_exact(&mut b8)?;
                let v = f64::from_le_bytes(b8);
                q.data[a * d + b] = v;
                q.data[b * d + a] = v;
            }
        }
        if !q.void_is_zero() {
            return Err(Error::Format("void rows must be zero".into()));
        }
        Ok(q)
    }

    /// Full matrix as CSV with a `a\b` header row of placement indices.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|b| b.to_string()).collect();
        writeln!(w, "a\\b,{}", header.join(","))?;
        for a in 0..d {
            let row: Vec<String> = self.row(a).iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(w, "{a},{}", row.join(","))?;
        }
        Ok(())
    }
}

const QFILE_MAGIC: &[u8; 4] = b"QTBL";
const QFILE_VERSION: u32 = 1;
/// `vec` stacks allocation-matrix columns: index `t·n + p`.
const VEC_SPECIES_MAJOR: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl EnergySource for QTable {
    fn n_positions(&self) -> usize {
        self.n
    }

    fn n_species(&self) -> usize {
        self.k
    }

    #[inline]
    fn alpha(&self, p1: usize, t1: usize, p2: usize, t2: usize) -> f64 {
        self.get(self.index(p1, t1), self.index(p2, t2))
    }

    fn soft_matvec(&self, s: &SoftAllocation, out: &mut [f64]) {
        let n = self.n;
        let k = self.k;
        let w = k + 1;
        // v in vec order, skipping void
        let mut v = vec![0.0; n * k];
        for t in 0..k {
            for p in 0..n {
                v[t * n + p] = s.get(p, t);
            }
        }
        let d = self.dim();
        par::for_each_chunk_mut(out, w, |p, row| {
            for (t, o) in row.iter_mut().enumerate() {
                *o = if t == k {
                    0.0
                } else {
                    let a = t * n + p;
                    let qrow = &self.data[a * d..a * d + n * k];
                    qrow.iter().zip(&v).map(|(q, x)| q * x).sum()
                };
            }
        });
    }
}

/// Builds the dense table for a composition on a grid.
pub fn build_q(positions: &PositionSet, species: &SpeciesSet, ff: &ForceField) -> Result<QTable> {
    let kernel = PairKernel::build(positions.g, &positions.cell, species, ff)?;
    QTable::from_source(&kernel, "forcefield")
}

/// Distribution for synthetic tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthDistribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

/// Random symmetric table with zero void rows, deterministic in `seed`.
pub fn synth_q(n: usize, k: usize, seed: u64, dist: SynthDistribution) -> Result<QTable> {
    let dim = n * (k + 1);
    if dim > DENSE_LIMIT {
        return Err(Error::Config(format!("synthetic table of dimension {dim} exceeds {DENSE_LIMIT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = QTable::zeros(n, k);
    let normal = match dist {
        SynthDistribution::Normal { mean, std } => {
            Some(Normal::new(mean, std).map_err(|e| Error::InvalidParameters(e.to_string()))?)
        }
        _ => None,
    };
    let live = n * k;
    for a in 0..live {
        for b in a..live {
            let v = match dist {
                SynthDistribution::Uniform { low, high } => {
                    if high > low {
                        rng.random_range(low..high)
                    } else {
                        low
                    }
                }
                SynthDistribution::Normal { .. } => normal.as_ref().unwrap().sample(&mut rng),
            };
            q.data[a * dim + b] = v;
            q.data[b * dim + a] = v;
        }
    }
    q.provenance = format!("synthetic(seed={seed})");
    Ok(q)
}

/// Relaxed `n × (k+1)` assignment, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAllocation {
    pub n: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SoftAllocation {
    pub fn new(n: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * width {
            return Err(Error::DimensionMismatch { expected: n * width, got: data.len() });
        }
        Ok(SoftAllocation { n, width, data })
    }

    pub fn from_allocation(x: &Allocation) -> Self {
        SoftAllocation { n: x.n(), width: x.k + 1, data: x.one_hot() }
    }

    #[inline]
    pub fn get(&self, p: usize, t: usize) -> f64 {
        self.data[p * self.width + t]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.width).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.width];
        for row in self.data.chunks(self.width) {
            for (ci, x) in c.iter_mut().zip(row) {
                *ci += x;
            }
        }
        c
    }

    /// Max deviations `(‖rows − 1‖∞, ‖cols − c‖∞)`.
    pub fn marginal_errors(&self, counts_with_void: &[usize]) -> (f64, f64) {
        let r = self.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let c = self
            .col_sums()
            .iter()
            .zip(counts_with_void)
            .map(|(s, &c)| (s - c as f64).abs())
            .fold(0.0, f64::max);
        (r, c)
    }
}

fn check_dims<S: EnergySource + ?Sized>(src: &S, n: usize, k: usize) -> Result<()> {
    if src.n_positions() != n {
        return Err(Error::DimensionMismatch { expected: src.n_positions(), got: n });
    }
    if src.n_species() != k {
        return Err(Error::DimensionMismatch { expected: src.n_species(), got: k });
    }
    Ok(())
}

/// `vec(X)ᵀ Q vec(X)` over the occupied placements only.
pub fn energy_hard<S: EnergySource + ?Sized>(x: &Allocation, src: &S) -> Result<f64> {
    check_dims(src, x.n(), x.k)?;
    let occ: Vec<(usize, usize)> = x.placements().collect();
    Ok(placement_energy(src, &occ))
}

/// Quadratic form over an explicit placement list.
pub fn placement_energy<S: EnergySource + ?Sized>(src: &S, occ: &[(usize, usize)]) -> f64 {
    let mut e = 0.0;
    for &(p1, t1) in occ {
        for &(p2, t2) in occ {
            e += src.alpha(p1, t1, p2, t2);
        }
    }
    e
}

/// `vec(S)ᵀ Q vec(S)`.
pub fn energy_soft<S: EnergySource + ?Sized>(s: &SoftAllocation, src: &S) -> Result<f64> {
    check_dims(src, s.n, s.width.saturating_sub(1))?;
    let mut buf = vec![0.0; s.data.len()];
    src.soft_matvec(s, &mut buf);
    Ok(s.data.iter().zip(&buf).map(|(a, b)| a * b).sum())
}

/// Soft energy and its gradient `2·Q·vec(S)` laid out like `S`.
pub fn energy_soft_grad<S: EnergySource + ?Sized>(s: &SoftAllocation, src: &S) -> Result<(f64, Vec<f64>)> {
    check_dims(src, s.n, s.width.saturating_sub(1))?;
    let mut buf = vec![0.0; s.data.len()];
    src.soft_matvec(s, &mut buf);
    let e = s.data.iter().zip(&buf).map(|(a, b)| a * b).sum();
    buf.iter_mut().for_each(|x| *x *= 2.0);
    Ok((e, buf))
}

/// Constraint-preserving move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Move {
    /// Atom at `from` moves to the void position `to`.
    Relocate { from: usize, to: usize },
    /// Atoms at `a` and `b` exchange positions.
    Swap { a: usize, b: usize },
}

/// `(removed, added)` placements for a move on `x`.
fn move_placements(x: &Allocation, mv: Move) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let void = x.void();
    let n = x.n();
    match mv {
        Move::Relocate { from, to } => {
            if from >= n || to >= n {
                return Err(Error::InvalidMove(format!("position out of range ({from}, {to})")));
            }
            let t = x.assign[from];
            if t == void {
                return Err(Error::InvalidMove(format!("source {from} is void")));
            }
            if x.assign[to] != void {
                return Err(Error::InvalidMove(format!("target {to} is occupied")));
            }
            Ok((vec![(from, t)], vec![(to, t)]))
        }
        Move::Swap { a, b } => {
            if a >= n || b >= n {
                return Err(Error::InvalidMove(format!("position out of range ({a}, {b})")));
            }
            let (ta, tb) = (x.assign[a], x.assign[b]);
            if ta == void || tb == void {
                return Err(Error::InvalidMove("swap requires two atoms".into()));
            }
            if ta == tb {
                return Ok((vec![], vec![]));
            }
            Ok((vec![(a, ta), (b, tb)], vec![(a, tb), (b, ta)]))
        }
    }
}

pub fn apply_move(x: &mut Allocation, mv: Move) -> Result<()> {
    let (_, added) = move_placements(x, mv)?;
    match mv {
        Move::Relocate { from, to } => {
            x.assign[to] = x.assign[from];
            x.assign[from] = x.void();
        }
        Move::Swap { .. } => {
            for (p, t) in added {
                x.assign[p] = t;
            }
        }
    }
    Ok(())
}

/// Energy change of replacing `removed` placements (all in `occ`) by `added`
/// ones (none in `occ`). `O(|occ|·(|removed| + |added|))`.
pub fn delta_replace<S: EnergySource + ?Sized>(
    src: &S,
    occ: &[(usize, usize)],
    removed: &[(usize, usize)],
    added: &[(usize, usize)],
) -> f64 {
    let row = |(p, t): (usize, usize)| -> f64 { occ.iter().map(|&(q, s)| src.alpha(p, t, q, s)).sum() };
    let mut d = 0.0;
    for &r in removed {
        d -= 2.0 * row(r);
        for &r2 in removed {
            d += src.alpha(r.0, r.1, r2.0, r2.1);
        }
    }
    for &a in added {
        d += 2.0 * row(a);
        for &r in removed {
            d -= 2.0 * src.alpha(a.0, a.1, r.0, r.1);
        }
        for &a2 in added {
            d += src.alpha(a.0, a.1, a2.0, a2.1);
        }
    }
    d
}

/// `energy_hard(apply(mv, x)) − energy_hard(x)`.
pub fn delta_energy_move<S: EnergySource + ?Sized>(x: &Allocation, src: &S, mv: Move) -> Result<f64> {
    check_dims(src, x.n(), x.k)?;
    let (removed, added) = move_placements(x, mv)?;
    if removed.is_empty() {
        return Ok(0.0);
    }
    let occ: Vec<(usize, usize)> = x.placements().collect();
    Ok(delta_replace(src, &occ, &removed, &added))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid, random_feasible, GridSpec, UnitCell};

    fn uniform() -> SynthDistribution {
        SynthDistribution::Uniform { low: -1.0, high: 1.0 }
    }

    /// Full-matrix quadratic form, independent of the placement path.
    fn naive_quadratic(q: &QTable, v: &[f64]) -> f64 {
        let d = q.dim();
        let mut e = 0.0;
        for a in 0..d {
            for b in 0..d {
                e += v[a] * q.get(a, b) * v[b];
            }
        }
        e
    }

    fn vec_of(s: &SoftAllocation) -> Vec<f64> {
        let mut v = vec![0.0; s.n * s.width];
        for t in 0..s.width {
            for p in 0..s.n {
                v[t * s.n + p] = s.get(p, t);
            }
        }
        v
    }

    #[test]
    fn synth_properties() {
        let a = synth_q(8, 2, 7, uniform()).unwrap();
        let b = synth_q(8, 2, 7, uniform()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_symmetric(0.0));
        assert!(a.void_is_zero());
        assert_eq!(a.dim(), 24);
        let z = synth_q(8, 2, 7, SynthDistribution::Uniform { low: 0.0, high: 0.0 }).unwrap();
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hard_energy_examples() {
        let q = synth_q(8, 2, 1, uniform()).unwrap();
        let all_void = Allocation::new(vec![2; 8], 2);
        assert_eq!(energy_hard(&all_void, &q).unwrap(), 0.0);
        let mut one = vec![2; 8];
        one[3] = 1;
        let x = Allocation::new(one, 2);
        assert_eq!(energy_hard(&x, &q).unwrap(), q.get(q.index(3, 1), q.index(3, 1)));
        let bad = Allocation::new(vec![2; 7], 2);
        assert!(matches!(energy_hard(&bad, &q), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn hard_matches_naive_oracle() {
        let q = synth_q(8, 2, 11, uniform()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = random_feasible(8, &[2, 3], &mut rng).unwrap();
            let v = vec_of(&SoftAllocation::from_allocation(&x));
            let e = energy_hard(&x, &q).unwrap();
            assert!((e - naive_quadratic(&q, &v)).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_matches_hard_and_naive() {
        let q = synth_q(8, 2, 13, uniform()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let x = random_feasible(8, &[1, 4], &mut rng).unwrap();
            let s = SoftAllocation::from_allocation(&x);
            let (eh, es) = (energy_hard(&x, &q).unwrap(), energy_soft(&s, &q).unwrap());
            assert!((eh - es).abs() < 1e-9);
        }
        // uniform feasible point: every row equals c/n
        let counts = [2.0, 3.0, 3.0];
        let row: Vec<f64> = counts.iter().map(|c| c / 8.0).collect();
        let s = SoftAllocation::new(8, 3, row.repeat(8)).unwrap();
        let e = energy_soft(&s, &q).unwrap();
        assert!((e - naive_quadratic(&q, &vec_of(&s))).abs() < 1e-9);
        let z = QTable::zeros(8, 2);
        assert_eq!(energy_soft(&s, &z).unwrap(), 0.0);
    }

    #[test]
    fn soft_gradient_is_twice_matvec() {
        let q = synth_q(5, 2, 2, uniform()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let s = SoftAllocation::new(5, 3, data).unwrap();
        let (e, g) = energy_soft_grad(&s, &q).unwrap();
        let h = 1e-6;
        for i in 0..15 {
            let mut sp = s.clone();
            sp.data[i] += h;
            let mut sm = s.clone();
            sm.data[i] -= h;
            let fd = (energy_soft(&sp, &q).unwrap() - energy_soft(&sm, &q).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
        assert!((e - energy_soft(&s, &q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn move_deltas_match_recompute() {
        let q = synth_q(10, 2, 21, uniform()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut x = random_feasible(10, &[3, 2], &mut rng).unwrap();
        for _ in 0..1000 {
            let mv = if rng.random_bool(0.5) {
                let occ: Vec<usize> = (0..10).filter(|&p| x.assign[p] != 2).collect();
                let voids: Vec<usize> = (0..10).filter(|&p| x.assign[p] == 2).collect();
                Move::Relocate { from: occ[rng.random_range(0..occ.len())], to: voids[rng.random_range(0..voids.len())] }
            } else {
                let occ: Vec<usize> = (0..10).filter(|&p| x.assign[p] != 2).collect();
                Move::Swap { a: occ[rng.random_range(0..occ.len())], b: occ[rng.random_range(0..occ.len())] }
            };
            let before = energy_hard(&x, &q).unwrap();
            let d = delta_energy_move(&x, &q, mv).unwrap();
            apply_move(&mut x, mv).unwrap();
            let after = energy_hard(&x, &q).unwrap();
            assert!((before + d - after).abs() < 1e-9);
        }
    }

    #[test]
    fn move_edge_cases() {
        let q = synth_q(4, 1, 3, uniform()).unwrap();
        let x = Allocation::new(vec![0, 1, 1, 1], 1);
        let d = delta_energy_move(&x, &q, Move::Relocate { from: 0, to: 2 }).unwrap();
        let expect = q.get(q.index(2, 0), q.index(2, 0)) - q.get(q.index(0, 0), q.index(0, 0));
        assert!((d - expect).abs() < 1e-12);
        let two = Allocation::new(vec![0, 0, 1, 1], 1);
        assert_eq!(delta_energy_move(&two, &q, Move::Swap { a: 0, b: 1 }).unwrap(), 0.0);
        assert!(matches!(
            delta_energy_move(&two, &q, Move::Relocate { from: 0, to: 1 }),
            Err(Error::InvalidMove(_))
        ));
    }

    #[test]
    fn incremental_chain_drift() {
        let q = synth_q(10, 2, 4, uniform()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = random_feasible(10, &[2, 3], &mut rng).unwrap();
        let mut e = energy_hard(&x, &q).unwrap();
        for _ in 0..10_000 {
            let occ: Vec<usize> = (0..10).filter(|&p| x.assign[p] != 2).collect();
            let voids: Vec<usize> = (0..10).filter(|&p| x.assign[p] == 2).collect();
            let mv = Move::Relocate {
                from: occ[rng.random_range(0..occ.len())],
                to: voids[rng.random_range(0..voids.len())],
            };
            e += delta_energy_move(&x, &q, mv).unwrap();
            apply_move(&mut x, mv).unwrap();
        }
        assert!((e - energy_hard(&x, &q).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn binary_roundtrip_and_bad_magic() {
        let q = synth_q(4, 2, 9, uniform()).unwrap();
        let mut buf = Vec::new();
        q.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"QTBL");
        let dim = 12;
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 4 + 8 * dim * (dim + 1) / 2);
        let r = QTable::read_binary(&buf[..]).unwrap();
        assert_eq!(r.data, q.data);
        buf[0] = b'X';
        assert!(matches!(QTable::read_binary(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn csv_export_shape() {
        let q = synth_q(2, 1, 1, uniform()).unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("a\\b,0,1,2,3"));
    }

    fn binary_ff() -> (SpeciesSet, ForceField) {
        let s = SpeciesSet::new(vec!["A".into(), "B".into()], vec![1.0, -1.0], vec![2, 2]).unwrap();
        let mut ff = ForceField { buckingham_cutoff: 6.0, ..Default::default() };
        ff.buckingham.insert("A-B".into(), Buckingham { a: 800.0, rho: 0.3, c: 2.0 });
        ff.buckingham.insert("A-A".into(), Buckingham { a: 100.0, rho: 0.25, c: 0.0 });
        ff.buckingham.insert("B-B".into(), Buckingham { a: 300.0, rho: 0.3, c: 5.0 });
        (s, ff)
    }

    #[test]
    fn forcefield_table_structure() {
        let (s, ff) = binary_ff();
        let pos = build_grid(&GridSpec::new(2, UnitCell::cubic(4.0).unwrap())).unwrap();
        let q = build_q(&pos, &s, &ff).unwrap();
        assert_eq!(q.dim(), 8 * 3);
        assert!(q.is_symmetric(1e-12));
        assert!(q.void_is_zero());
        let single = SpeciesSet::new(vec!["A".into()], vec![0.0], vec![1]).unwrap();
        let mut zff = ForceField { buckingham_cutoff: 6.0, ..Default::default() };
        zff.buckingham.insert("A-A".into(), Buckingham { a: 0.0, rho: 1.0, c: 0.0 });
        let z = build_q(&pos, &single, &zff).unwrap();
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    /// Direct double loop over every ordered pair of occupied placements,
    /// calling the scalar potentials without going through any table.
    fn naive_total(x: &Allocation, pos: &PositionSet, s: &SpeciesSet, ff: &ForceField) -> f64 {
        let (charges, pairs) = ff.resolve(s).unwrap();
        let occ: Vec<(usize, usize)> = x.placements().collect();
        let mut e = 0.0;
        for &(p1, t1) in &occ {
            for &(p2, t2) in &occ {
                let same = p1 == p2;
                let f1 = pos.fractional[p1];
                let f2 = pos.fractional[p2];
                let el = ewald_pair(&f1, &f2, charges[t1], charges[t2], &pos.cell, &ff.ewald, same).unwrap();
                let d = [f2[0] - f1[0], f2[1] - f1[1], f2[2] - f1[2]];
                let b = buckingham_image_sum(&d, &pos.cell, &pairs[t1][t2], ff.buckingham_cutoff).unwrap();
                if same {
                    // one ion: self electrostatics plus half its image repulsion
                    e += el + 0.5 * b;
                } else {
                    // ordered pair counts half of the pair interaction
                    e += 0.5 * (el + b);
                }
            }
        }
        e
    }

    #[test]
    fn forcefield_energy_matches_naive_summation() {
        let (s, ff) = binary_ff();
        let pos = build_grid(&GridSpec::new(2, UnitCell::cubic(4.0).unwrap())).unwrap();
        let q = build_q(&pos, &s, &ff).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = random_feasible(8, &[2, 2], &mut rng).unwrap();
            let e = energy_hard(&x, &q).unwrap();
            let naive = naive_total(&x, &pos, &s, &ff);
            assert!((e - naive).abs() < 1e-9, "{e} vs {naive}");
        }
    }

    #[test]
    fn lazy_kernel_matches_dense() {
        let (s, ff) = binary_ff();
        let pos = build_grid(&GridSpec::new(3, UnitCell::cubic(5.0).unwrap())).unwrap();
        let kernel = PairKernel::build(3, &pos.cell, &s, &ff).unwrap();
        let q = QTable::from_source(&kernel, "t").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_feasible(27, &[2, 2], &mut rng).unwrap();
            assert_eq!(energy_hard(&x, &q).unwrap(), energy_hard(&x, &kernel).unwrap());
            let sa = SoftAllocation::from_allocation(&x);
            let (a, b) = (energy_soft(&sa, &q).unwrap(), energy_soft(&sa, &kernel).unwrap());
            assert!((a - b).abs() < 1e-9);
        }
    }
}
