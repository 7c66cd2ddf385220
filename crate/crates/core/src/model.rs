//! Unit cell, position grid, species bookkeeping and hard allocations.
//!
//! Positions are indexed in lexicographic `(i, j, k)` order, `index = (i*g + j)*g + k`.
//! An [`Allocation`] stores one species index per position; the value `k`
//! (one past the last real species) marks a void position.

use std::fmt;
use std::io::Write;
use std::path::Path;

use num_bigint::BigUint;
use num_traits::One;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Periodic cell given by three lattice vectors (rows), in Å.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCell {
    lattice: [Vec3; 3],
}

impl UnitCell {
    pub fn new(lattice: [Vec3; 3]) -> Result<Self> {
        let cell = UnitCell { lattice };
        let v = cell.volume();
        if !v.is_finite() || v <= 1e-12 {
            return Err(Error::InvalidCell(format!("non-positive volume {v}")));
        }
        Ok(cell)
    }

    pub fn cubic(a: f64) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidCell(format!("cell parameter {a} must be positive")));
        }
        UnitCell::new([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]])
    }

    pub fn lattice(&self) -> &[Vec3; 3] {
        &self.lattice
    }

    pub fn volume(&self) -> f64 {
        let [a, b, c] = &self.lattice;
        dot(a, &cross(b, c)).abs()
    }

    /// Fractional (row) vector times lattice matrix.
    pub fn to_cartesian(&self, frac: &Vec3) -> Vec3 {
        let l = &self.lattice;
        let mut out = [0.0; 3];
        for (d, o) in out.iter_mut().enumerate() {
            *o = frac[0] * l[0][d] + frac[1] * l[1][d] + frac[2] * l[2][d];
        }
        out
    }

    /// Reciprocal vectors `b_i` with `a_i · b_j = 2π δ_ij`.
    pub fn reciprocal(&self) -> [Vec3; 3] {
        let [a, b, c] = &self.lattice;
        let v = dot(a, &cross(b, c));
        let s = 2.0 * std::f64::consts::PI / v;
        let scale = |x: Vec3| [x[0] * s, x[1] * s, x[2] * s];
        [scale(cross(b, c)), scale(cross(c, a)), scale(cross(a, b))]
    }

    /// Shortest lattice-vector length, a lower bound on the image spacing.
    pub fn min_width(&self) -> f64 {
        // perpendicular widths: V / |a_j x a_k|
        let [a, b, c] = &self.lattice;
        let v = self.volume();
        [norm(&cross(b, c)), norm(&cross(c, a)), norm(&cross(a, b))]
            .iter()
            .map(|area| v / area)
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub g: usize,
    pub cell: UnitCell,
}

impl GridSpec {
    pub fn new(g: usize, cell: UnitCell) -> Self {
        GridSpec { g, cell }
    }

    pub fn n_positions(&self) -> usize {
        self.g * self.g * self.g
    }
}

/// The `g³` grid positions of a cell.
#[derive(Clone, Debug)]
pub struct PositionSet {
    pub g: usize,
    pub cell: UnitCell,
    pub fractional: Vec<Vec3>,
    pub cartesian: Vec<Vec3>,
}

impl PositionSet {
    pub fn len(&self) -> usize {
        self.fractional.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractional.is_empty()
    }

    /// Integer grid coordinates of a position index.
    pub fn coords(&self, p: usize) -> [usize; 3] {
        grid_coords(self.g, p)
    }
}

pub fn grid_coords(g: usize, p: usize) -> [usize; 3] {
    [p / (g * g), (p / g) % g, p % g]
}

pub fn grid_index(g: usize, c: [usize; 3]) -> usize {
    (c[0] * g + c[1]) * g + c[2]
}

pub fn build_grid(spec: &GridSpec) -> Result<PositionSet> {
    let g = spec.g;
    if g == 0 {
        return Err(Error::InvalidGrid("g must be at least 1".into()));
    }
    let n = g * g * g;
    let mut fractional = Vec::with_capacity(n);
    for i in 0..g {
        for j in 0..g {
            for k in 0..g {
                fractional.push([i as f64 / g as f64, j as f64 / g as f64, k as f64 / g as f64]);
            }
        }
    }
    let cartesian = fractional.iter().map(|f| spec.cell.to_cartesian(f)).collect();
    Ok(PositionSet { g, cell: spec.cell.clone(), fractional, cartesian })
}

/// Minimum-image distance over the 27 nearest periodic images.
pub fn min_image_distance(p1: &Vec3, p2: &Vec3, cell: &UnitCell) -> Result<f64> {
    min_image_distance_shell(p1, p2, cell, 1)
}

/// Minimum-image distance searching `(2*shell + 1)³` images. Elongated or
/// skewed cells may need `shell > 1`.
pub fn min_image_distance_shell(p1: &Vec3, p2: &Vec3, cell: &UnitCell, shell: i32) -> Result<f64> {
    if !(cell.volume() > 1e-12) {
        return Err(Error::InvalidCell("degenerate cell".into()));
    }
    let mut d = [0.0; 3];
    for a in 0..3 {
        let x = p2[a] - p1[a];
        d[a] = x - x.round();
    }
    let mut best = f64::INFINITY;
    for i in -shell..=shell {
        for j in -shell..=shell {
            for k in -shell..=shell {
                let f = [d[0] + i as f64, d[1] + j as f64, d[2] + k as f64];
                let r = norm(&cell.to_cartesian(&f));
                best = best.min(r);
            }
        }
    }
    Ok(best)
}

/// Chemical species with formal charges and target atom counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSet {
    pub labels: Vec<String>,
    pub charges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SpeciesSet {
    pub fn new(labels: Vec<String>, charges: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if labels.len() != charges.len() || labels.len() != counts.len() {
            return Err(Error::Config("labels, charges and counts must have equal length".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate species label {l}")));
            }
        }
        if counts.contains(&0) {
            return Err(Error::Config("stoichiometry entries must be positive".into()));
        }
        Ok(SpeciesSet { labels, charges, counts })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn net_charge(&self) -> f64 {
        self.counts.iter().zip(&self.charges).map(|(&c, &q)| c as f64 * q).sum()
    }

    /// Counts with the void count appended.
    pub fn counts_with_void(&self, n: usize) -> Result<Vec<usize>> {
        counts_with_void(n, &self.counts)
    }
}

pub fn counts_with_void(n: usize, counts: &[usize]) -> Result<Vec<usize>> {
    let total: usize = counts.iter().sum();
    if total > n {
        return Err(Error::InfeasibleStoichiometry { total, positions: n });
    }
    let mut out = counts.to_vec();
    out.push(n - total);
    Ok(out)
}

/// Hard allocation: `assign[p]` is the species at position `p`; `k` is void.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Allocation {
    pub assign: Vec<usize>,
    pub k: usize,
}

impl Allocation {
    pub fn new(assign: Vec<usize>, k: usize) -> Self {
        Allocation { assign, k }
    }

    pub fn n(&self) -> usize {
        self.assign.len()
    }

    pub fn void(&self) -> usize {
        self.k
    }

    /// Occupied `(position, species)` placements in position order.
    pub fn placements(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assign.iter().enumerate().filter(|(_, &t)| t < self.k).map(|(p, &t)| (p, t))
    }

    pub fn species_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k + 1];
        for &t in &self.assign {
            if t <= self.k {
                c[t] += 1;
            }
        }
        c
    }

    /// Row-major `n × (k+1)` one-hot matrix.
    pub fn one_hot(&self) -> Vec<f64> {
        let w = self.k + 1;
        let mut m = vec![0.0; self.n() * w];
        for (p, &t) in self.assign.iter().enumerate() {
            m[p * w + t] = 1.0;
        }
        m
    }

    /// Reads a one-hot (0/1) `n × (k+1)` row-major matrix, checking exclusivity.
    pub fn from_one_hot(m: &[f64], n: usize, k: usize) -> std::result::Result<Self, Verdict> {
        let w = k + 1;
        if m.len() != n * w {
            return Err(Verdict::WrongLength { expected: n * w, got: m.len() });
        }
        let mut assign = Vec::with_capacity(n);
        for p in 0..n {
            let row = &m[p * w..(p + 1) * w];
            let ones: Vec<usize> = (0..w).filter(|&t| row[t] == 1.0).collect();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            if ones.len() != 1 || zeros != w - 1 {
                return Err(Verdict::NotExclusive { position: p, ones: ones.len() });
            }
            assign.push(ones[0]);
        }
        Ok(Allocation { assign, k })
    }
}

/// Outcome of a feasibility check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Ok,
    WrongLength { expected: usize, got: usize },
    InvalidSpecies { position: usize, value: usize },
    NotExclusive { position: usize, ones: usize },
    CountMismatch { species: usize, expected: usize, got: usize },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Ok => write!(f, "ok"),
            Verdict::WrongLength { expected, got } => write!(f, "length {got} != {expected}"),
            Verdict::InvalidSpecies { position, value } => {
                write!(f, "position {position} holds invalid species {value}")
            }
            Verdict::NotExclusive { position, ones } => {
                write!(f, "position {position} has {ones} species assigned")
            }
            Verdict::CountMismatch { species, expected, got } => {
                write!(f, "species {species} count {got} != {expected}")
            }
        }
    }
}

/// Checks per-species counts against `counts` (void count implied by length).
pub fn validate_allocation(x: &Allocation, counts: &[usize], n: usize) -> Verdict {
    if x.assign.len() != n {
        return Verdict::WrongLength { expected: n, got: x.assign.len() };
    }
    let k = counts.len();
    if x.k != k {
        return Verdict::InvalidSpecies { position: 0, value: x.k };
    }
    let mut got = vec![0usize; k + 1];
    for (p, &t) in x.assign.iter().enumerate() {
        if t > k {
            return Verdict::InvalidSpecies { position: p, value: t };
        }
        got[t] += 1;
    }
    for (t, &c) in counts.iter().enumerate() {
        if got[t] != c {
            return Verdict::CountMismatch { species: t, expected: c, got: got[t] };
        }
    }
    Verdict::Ok
}

/// `n! / (c₁!⋯c_k!·(n−Σc)!)`, the number of feasible allocations.
pub fn count_feasible(n: usize, counts: &[usize]) -> Result<BigUint> {
    let full = counts_with_void(n, counts)?;
    // product of binomials: C(n, c1) C(n-c1, c2) ...
    let mut remaining = n;
    let mut total = BigUint::one();
    for &c in &full {
        total *= binomial(remaining, c);
        remaining -= c;
    }
    Ok(total)
}

fn binomial(n: usize, k: usize) -> BigUint {
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= BigUint::from(n - i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

/// Decimal order of magnitude, `floor(log10(x))`.
pub fn order_of_magnitude(x: &BigUint) -> usize {
    x.to_str_radix(10).len() - 1
}

/// Uniformly shuffled allocation with exact species counts.
pub fn random_feasible<R: Rng + ?Sized>(n: usize, counts: &[usize], rng: &mut R) -> Result<Allocation> {
    let full = counts_with_void(n, counts)?;
    let mut assign = Vec::with_capacity(n);
    for (t, &c) in full.iter().enumerate() {
        assign.extend(std::iter::repeat_n(t, c));
    }
    assign.shuffle(rng);
    Ok(Allocation { assign, k: counts.len() })
}

/// Composition input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    #[serde(default)]
    pub name: String,
    /// Cubic cell parameter in Å.
    pub cell_parameter: f64,
    pub g: usize,
    pub species: Vec<String>,
    pub charges: Vec<f64>,
    /// Atoms per formula unit.
    pub stoichiometry: Vec<usize>,
    #[serde(default = "one")]
    pub formula_units: usize,
}

fn one() -> usize {
    1
}

impl Composition {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::new(self.g, UnitCell::cubic(self.cell_parameter)?))
    }

    pub fn species_set(&self) -> Result<SpeciesSet> {
        let counts = self.stoichiometry.iter().map(|c| c * self.formula_units).collect();
        SpeciesSet::new(self.species.clone(), self.charges.clone(), counts)
    }

    pub fn n_positions(&self) -> usize {
        self.g.pow(3)
    }
}

/// Extended-XYZ text: atom count, cell + properties comment, one line per atom.
pub fn write_xyz<W: Write>(
    mut w: W,
    x: &Allocation,
    positions: &PositionSet,
    species: &SpeciesSet,
    energy: Option<f64>,
) -> Result<()> {
    let atoms: Vec<(usize, usize)> = x.placements().collect();
    writeln!(w, "{}", atoms.len())?;
    let l = positions.cell.lattice();
    write!(
        w,
        "Lattice=\"{} {} {} {} {} {} {} {} {}\" Properties=species:S:1:pos:R:3 pbc=\"T T T\"",
        l[0][0], l[0][1], l[0][2], l[1][0], l[1][1], l[1][2], l[2][0], l[2][1], l[2][2]
    )?;
    if let Some(e) = energy {
        write!(w, " energy={e:.10}")?;
    }
    writeln!(w)?;
    for (p, t) in atoms {
        let r = positions.cartesian[p];
        writeln!(w, "{} {:.8} {:.8} {:.8}", species.labels[t], r[0], r[1], r[2])?;
    }
    Ok(())
}

/// JSON form of an allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub assign: Vec<usize>,
    pub species: Vec<String>,
    pub counts: Vec<usize>,
    pub g: usize,
    pub energy: Option<f64>,
}

impl AllocationRecord {
    pub fn new(x: &Allocation, species: &SpeciesSet, g: usize, energy: Option<f64>) -> Self {
        AllocationRecord {
            assign: x.assign.clone(),
            species: species.labels.clone(),
            counts: species.counts.clone(),
            g,
            energy,
        }
    }

    pub fn allocation(&self) -> std::result::Result<Allocation, Verdict> {
        let x = Allocation::new(self.assign.clone(), self.species.len());
        match validate_allocation(&x, &self.counts, self.assign.len()) {
            Verdict::Ok => Ok(x),
            v => Err(v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cubic(a: f64) -> UnitCell {
        UnitCell::cubic(a).unwrap()
    }

    #[test]
    fn grid_sizes() {
        for (g, n) in [(7, 343), (4, 64), (1, 1)] {
            let p = build_grid(&GridSpec::new(g, cubic(4.0))).unwrap();
            assert_eq!(p.len(), n);
        }
        let p = build_grid(&GridSpec::new(1, cubic(4.0))).unwrap();
        assert_eq!(p.fractional[0], [0.0, 0.0, 0.0]);
        assert!(matches!(build_grid(&GridSpec::new(0, cubic(4.0))), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn grid_is_lexicographic() {
        let p = build_grid(&GridSpec::new(3, cubic(3.0))).unwrap();
        assert_eq!(p.fractional[1], [0.0, 0.0, 1.0 / 3.0]);
        assert_eq!(p.fractional[3], [0.0, 1.0 / 3.0, 0.0]);
        assert_eq!(p.cartesian[9], [1.0, 0.0, 0.0]);
        for i in 0..27 {
            assert_eq!(grid_index(3, grid_coords(3, i)), i);
        }
    }

    #[test]
    fn min_image_examples() {
        let c = cubic(4.0);
        let d = min_image_distance(&[0.0; 3], &[0.9, 0.0, 0.0], &c).unwrap();
        assert!((d - 0.4).abs() < 1e-12);
        assert_eq!(min_image_distance(&[0.3, 0.2, 0.1], &[0.3, 0.2, 0.1], &c).unwrap(), 0.0);
        let d = min_image_distance(&[0.0; 3], &[0.5; 3], &cubic(2.0)).unwrap();
        assert!((d - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cell_rejected() {
        assert!(UnitCell::new([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(UnitCell::cubic(0.0).is_err());
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_feasible(64, &[1, 1, 3]).unwrap(), BigUint::from(152_490_240u64));
        assert_eq!(count_feasible(4, &[4]).unwrap(), BigUint::one());
        let big = count_feasible(512, &[1, 1, 3]).unwrap();
        assert_eq!(order_of_magnitude(&big), 12);
        assert!(matches!(count_feasible(3, &[2, 2]), Err(Error::InfeasibleStoichiometry { .. })));
    }

    #[test]
    fn validate_examples() {
        let ok = Allocation::new(vec![0, 1, 2, 2, 2], 3);
        assert_eq!(validate_allocation(&ok, &[1, 1, 3], 5), Verdict::Ok);
        let bad = Allocation::new(vec![0, 0, 2, 2, 2], 3);
        assert_eq!(
            validate_allocation(&bad, &[1, 1, 3], 5),
            Verdict::CountMismatch { species: 0, expected: 1, got: 2 }
        );
        let with_void = Allocation::new(vec![0, 1, 2, 2, 2, 3], 3);
        assert!(validate_allocation(&with_void, &[1, 1, 3], 6).is_ok());
    }

    #[test]
    fn one_hot_roundtrip_and_exclusivity() {
        let x = Allocation::new(vec![0, 2, 1, 2], 2);
        let m = x.one_hot();
        assert_eq!(Allocation::from_one_hot(&m, 4, 2).unwrap(), x);
        let mut bad = m.clone();
        bad[1] = 1.0;
        assert_eq!(
            Allocation::from_one_hot(&bad, 4, 2),
            Err(Verdict::NotExclusive { position: 0, ones: 2 })
        );
    }

    #[test]
    fn random_feasible_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_feasible(5, &[5], &mut rng).unwrap();
        assert_eq!(x.assign, vec![0; 5]);
        let a = random_feasible(64, &[1, 1, 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_feasible(64, &[1, 1, 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(validate_allocation(&a, &[1, 1, 3], 64).is_ok());
        assert!(random_feasible(4, &[3, 2], &mut rng).is_err());
    }

    #[test]
    fn random_feasible_always_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(1..4);
            let mut counts = Vec::new();
            let mut left = n;
            for _ in 0..k {
                if left == 0 {
                    break;
                }
                let c = rng.random_range(1..=left);
                counts.push(c);
                left -= c;
            }
            let x = random_feasible(n, &counts, &mut rng).unwrap();
            assert!(validate_allocation(&x, &counts, n).is_ok());
        }
    }

    #[test]
    fn composition_scales_by_formula_units() {
        let c: Composition = serde_json::from_str(
            r#"{"cell_parameter":7.8,"g":8,"species":["Sr","Ti","O"],"charges":[2,4,-2],
                "stoichiometry":[1,1,3],"formula_units":8}"#,
        )
        .unwrap();
        let s = c.species_set().unwrap();
        assert_eq!(s.counts, vec![8, 8, 24]);
        assert_eq!(s.net_charge(), 0.0);
    }

    #[test]
    fn xyz_export() {
        let pos = build_grid(&GridSpec::new(2, cubic(4.0))).unwrap();
        let s = SpeciesSet::new(vec!["Na".into(), "Cl".into()], vec![1.0, -1.0], vec![1, 1]).unwrap();
        let x = Allocation::new(vec![0, 2, 2, 2, 2, 2, 2, 1], 2);
        let mut buf = Vec::new();
        write_xyz(&mut buf, &x, &pos, &s, Some(-1.5)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "2");
        assert!(lines[1].starts_with("Lattice=\"4 0 0 0 4 0 0 0 4\""));
        assert_eq!(lines[2], "Na 0.00000000 0.00000000 0.00000000");
        assert_eq!(lines[3], "Cl 2.00000000 2.00000000 2.00000000");
    }

    proptest! {
        #[test]
        fn grid_count_is_cube(g in 1usize..=16) {
            let p = build_grid(&GridSpec::new(g, cubic(5.0))).unwrap();
            prop_assert_eq!(p.len(), g * g * g);
        }

        #[test]
        fn min_image_metric(a in 0.5f64..10.0,
                            p in prop::array::uniform3(0.0f64..1.0),
                            q in prop::array::uniform3(0.0f64..1.0)) {
            let c = cubic(a);
            let d1 = min_image_distance(&p, &q, &c).unwrap();
            let d2 = min_image_distance(&q, &p, &c).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
            prop_assert!(d1 >= 0.0);
            prop_assert!(d1 <= 3f64.sqrt() / 2.0 * a + 1e-12);
            if p != q { prop_assert!(d1 > 0.0); }
        }
    }
}
