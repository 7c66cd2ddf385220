//! Pair potentials: Buckingham repulsion/dispersion and Ewald electrostatics.
//!
//! Everything here is expressed per grid displacement. On a periodic grid the
//! interaction of two placements depends only on `(c2 - c1) mod g`, so one
//! table of `g³` values per species pair covers every position pair.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::model::{dot, grid_coords, norm, SpeciesSet, UnitCell, Vec3};
use crate::par;

/// Coulomb constant e²/(4πε₀) in eV·Å.
pub const COULOMB_EV_A: f64 = 14.399645;

/// `A·exp(−r/ρ) − C/r⁶` in eV.
pub fn buckingham_pair(r: f64, a: f64, rho: f64, c: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::SingularSeparation(r));
    }
    let rep = if a == 0.0 {
        0.0
    } else {
        if !(rho > 0.0) {
            return Err(Error::InvalidParameters(format!("rho must be positive, got {rho}")));
        }
        a * (-r / rho).exp()
    };
    Ok(rep - c / r.powi(6))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buckingham {
    #[serde(rename = "A")]
    pub a: f64,
    pub rho: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

/// Ewald controls. Unset fields are derived from the cell by [`EwaldParams::resolve`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EwaldParams {
    /// Splitting parameter in Å⁻¹.
    pub alpha: Option<f64>,
    /// Real-space cutoff in Å.
    pub real_cutoff: Option<f64>,
    /// Reciprocal-space cutoff in Å⁻¹.
    pub recip_cutoff: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedEwald {
    pub alpha: f64,
    pub real_cutoff: f64,
    pub recip_cutoff: f64,
}

impl EwaldParams {
    /// `alpha = 5/L`, `real_cutoff = 4.5/alpha`, `recip_cutoff = 9·alpha`, where
    /// `L` is the cube root of the cell volume. Both truncations then sit below
    /// ~1e-9 relative.
    pub fn resolve(&self, cell: &UnitCell) -> Result<ResolvedEwald> {
        let l = cell.volume().cbrt();
        let alpha = self.alpha.unwrap_or(5.0 / l);
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameters(format!("ewald alpha must be positive, got {alpha}")));
        }
        let real_cutoff = self.real_cutoff.unwrap_or(4.5 / alpha);
        let recip_cutoff = self.recip_cutoff.unwrap_or(9.0 * alpha);
        if !(real_cutoff > 0.0) || !(recip_cutoff > 0.0) {
            return Err(Error::InvalidParameters("ewald cutoffs must be positive".into()));
        }
        Ok(ResolvedEwald { alpha, real_cutoff, recip_cutoff })
    }
}

/// Force-field file: charges, Buckingham pairs keyed `"X-Y"`, and Ewald controls.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceField {
    /// Overrides the composition's formal charges when present.
    #[serde(default)]
    pub charges: BTreeMap<String, f64>,
    #[serde(default)]
    pub buckingham: BTreeMap<String, Buckingham>,
    #[serde(default = "default_buck_cutoff")]
    pub buckingham_cutoff: f64,
    #[serde(default)]
    pub ewald: EwaldParams,
}

fn default_buck_cutoff() -> f64 {
    10.0
}

impl ForceField {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<Buckingham> {
        self.buckingham
            .get(&format!("{a}-{b}"))
            .or_else(|| self.buckingham.get(&format!("{b}-{a}")))
            .copied()
    }

    /// Charges and pair table for `species`, checking coverage and parameters.
    pub fn resolve(&self, species: &SpeciesSet) -> Result<(Vec<f64>, Vec<Vec<Buckingham>>)> {
        let k = species.k();
        let charges: Vec<f64> = species
            .labels
            .iter()
            .zip(&species.charges)
            .map(|(l, &q)| self.charges.get(l).copied().unwrap_or(q))
            .collect();
        let mut table = vec![vec![Buckingham { a: 0.0, rho: 1.0, c: 0.0 }; k]; k];
        for i in 0..k {
            for j in 0..k {
                let (a, b) = (&species.labels[i], &species.labels[j]);
                let p = self
                    .pair(a, b)
                    .ok_or_else(|| Error::Config(format!("missing Buckingham parameters for {a}-{b}")))?;
                if p.a != 0.0 && !(p.rho > 0.0) {
                    return Err(Error::InvalidParameters(format!("rho must be positive for {a}-{b}")));
                }
                table[i][j] = p;
            }
        }
        if !(self.buckingham_cutoff > 0.0) {
            return Err(Error::InvalidParameters("buckingham_cutoff must be positive".into()));
        }
        Ok((charges, table))
    }
}

/// Number of image shells needed so every image within `cutoff` is visited.
fn shells_for(cell: &UnitCell, cutoff: f64) -> i32 {
    (cutoff / cell.min_width()).ceil() as i32 + 1
}

/// Periodic Coulomb potential (per unit charge product, in e/Å) at fractional
/// displacement `d`, including the neutralizing-background term. For `d = 0`
/// the direct term is excluded and the self-interaction correction added, so
/// `½·q²·φ(0)` is the energy of one ion with its own images.
#[derive(Clone, Debug)]
pub struct EwaldKernel {
    cell: UnitCell,
    params: ResolvedEwald,
    kvecs: Vec<(Vec3, f64)>,
    real_shell: i32,
}

impl EwaldKernel {
    pub fn new(cell: &UnitCell, params: &EwaldParams) -> Result<Self> {
        let params = params.resolve(cell)?;
        let alpha = params.alpha;
        let recip = cell.reciprocal();
        let lat = cell.lattice();
        let vol = cell.volume();
        let mut kvecs = Vec::new();
        let m: Vec<i32> =
            (0..3).map(|i| (params.recip_cutoff * norm(&lat[i]) / (2.0 * PI)).ceil() as i32).collect();
        let kc2 = params.recip_cutoff * params.recip_cutoff;
        for i in -m[0]..=m[0] {
            for j in -m[1]..=m[1] {
                for l in -m[2]..=m[2] {
                    if i == 0 && j == 0 && l == 0 {
                        continue;
                    }
                    let mut kv = [0.0; 3];
                    for (d, x) in kv.iter_mut().enumerate() {
                        *x = i as f64 * recip[0][d] + j as f64 * recip[1][d] + l as f64 * recip[2][d];
                    }
                    let k2 = dot(&kv, &kv);
                    if k2 > kc2 {
                        continue;
                    }
                    let pref = 4.0 * PI / vol * (-k2 / (4.0 * alpha * alpha)).exp() / k2;
                    kvecs.push((kv, pref));
                }
            }
        }
        let real_shell = shells_for(cell, params.real_cutoff);
        Ok(EwaldKernel { cell: cell.clone(), params, kvecs, real_shell })
    }

    pub fn params(&self) -> ResolvedEwald {
        self.params
    }

    pub fn potential(&self, frac: &Vec3) -> f64 {
        let alpha = self.params.alpha;
        let rc = self.params.real_cutoff;
        let d = [frac[0] - frac[0].round(), frac[1] - frac[1].round(), frac[2] - frac[2].round()];
        let zero = d.iter().all(|x| x.abs() < 1e-12);
        let s = self.real_shell;
        let mut real = 0.0;
        for i in -s..=s {
            for j in -s..=s {
                for l in -s..=s {
                    let f = [d[0] + i as f64, d[1] + j as f64, d[2] + l as f64];
                    let r = norm(&self.cell.to_cartesian(&f));
                    if r < 1e-10 || r > rc {
                        continue;
                    }
                    real += erfc(alpha * r) / r;
                }
            }
        }
        let rc_vec = self.cell.to_cartesian(&d);
        let mut recip = 0.0;
        for (kv, pref) in &self.kvecs {
            recip += pref * dot(kv, &rc_vec).cos();
        }
        let background = -PI / (self.cell.volume() * alpha * alpha);
        let selfterm = if zero { -2.0 * alpha / PI.sqrt() } else { 0.0 };
        real + recip + background + selfterm
    }
}

/// Electrostatic energy in eV of one placement pair: `q1·q2·k·φ(p2 − p1)` for
/// distinct placements, `½·q1²·k·φ(0)` when `same_placement` is set.
pub fn ewald_pair(
    p1: &Vec3,
    p2: &Vec3,
    q1: f64,
    q2: f64,
    cell: &UnitCell,
    params: &EwaldParams,
    same_placement: bool,
) -> Result<f64> {
    if q1 == 0.0 || q2 == 0.0 {
        // still validate parameters
        params.resolve(cell)?;
        return Ok(0.0);
    }
    let kernel = EwaldKernel::new(cell, params)?;
    let d = [p2[0] - p1[0], p2[1] - p1[1], p2[2] - p1[2]];
    let phi = kernel.potential(&d);
    let scale = if same_placement { 0.5 } else { 1.0 };
    Ok(scale * q1 * q2 * COULOMB_EV_A * phi)
}

/// Sum of the Buckingham pair over all images of displacement `frac` within
/// `cutoff`, skipping the zero-distance term.
pub fn buckingham_image_sum(frac: &Vec3, cell: &UnitCell, p: &Buckingham, cutoff: f64) -> Result<f64> {
    if p.a == 0.0 && p.c == 0.0 {
        return Ok(0.0);
    }
    let d = [frac[0] - frac[0].round(), frac[1] - frac[1].round(), frac[2] - frac[2].round()];
    let s = shells_for(cell, cutoff);
    let mut total = 0.0;
    for i in -s..=s {
        for j in -s..=s {
            for l in -s..=s {
                let f = [d[0] + i as f64, d[1] + j as f64, d[2] + l as f64];
                let r = norm(&cell.to_cartesian(&f));
                if r < 1e-10 || r > cutoff {
                    continue;
                }
                total += buckingham_pair(r, p.a, p.rho, p.c)?;
            }
        }
    }
    Ok(total)
}

/// Displacement-indexed interaction table for a grid:
/// `α(p1,t1,p2,t2) = ½·[q_t1·q_t2·k·φ(d) + B_t1t2(d)]`, `d = (c2 − c1) mod g`.
///
/// This is the lazy energy source; a dense [`super::QTable`] is its expansion.
#[derive(Clone, Debug)]
pub struct PairKernel {
    g: usize,
    k: usize,
    /// `[(t1*k + t2) * g³ + disp]`
    table: Vec<f64>,
}

impl PairKernel {
    pub fn build(g: usize, cell: &UnitCell, species: &SpeciesSet, ff: &ForceField) -> Result<Self> {
        if g == 0 {
            return Err(Error::InvalidGrid("g must be at least 1".into()));
        }
        let (charges, pairs) = ff.resolve(species)?;
        let net: f64 = charges.iter().zip(&species.counts).map(|(q, &c)| q * c as f64).sum();
        if net.abs() > 1e-9 {
            return Err(Error::ChargedCell(net));
        }
        let ewald = EwaldKernel::new(cell, &ff.ewald)?;
        let k = species.k();
        let n = g * g * g;
        let disp_frac = |disp: usize| -> Vec3 {
            let c = grid_coords(g, disp);
            [c[0] as f64 / g as f64, c[1] as f64 / g as f64, c[2] as f64 / g as f64]
        };
        let phi: Vec<f64> = par::map_range(n, |disp| ewald.potential(&disp_frac(disp)));
        let mut table = vec![0.0; k * k * n];
        for t1 in 0..k {
            for t2 in t1..k {
                let p = pairs[t1][t2];
                let buck: Vec<Result<f64>> = par::map_range(n, |disp| {
                    buckingham_image_sum(&disp_frac(disp), cell, &p, ff.buckingham_cutoff)
                });
                let qq = charges[t1] * charges[t2] * COULOMB_EV_A;
                for (disp, b) in buck.into_iter().enumerate() {
                    let v = 0.5 * (qq * phi[disp] + b?);
                    table[(t1 * k + t2) * n + disp] = v;
                    table[(t2 * k + t1) * n + disp] = v;
                }
            }
        }
        Ok(PairKernel { g, k, table })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    #[inline]
    pub fn displacement(&self, p1: usize, p2: usize) -> usize {
        let g = self.g;
        let a = grid_coords(g, p1);
        let b = grid_coords(g, p2);
        let d = |i: usize| (b[i] + g - a[i]) % g;
        (d(0) * g + d(1)) * g + d(2)
    }

    #[inline]
    pub fn value(&self, p1: usize, t1: usize, p2: usize, t2: usize) -> f64 {
        if t1 >= self.k || t2 >= self.k {
            return 0.0;
        }
        let n = self.g * self.g * self.g;
        self.table[(t1 * self.k + t2) * n + self.displacement(p1, p2)]
    }

    pub fn species(&self) -> usize {
        self.k
    }
}
