//! Exhaustive reference solvers for small instances.
//!
//! Feasible allocations are the distinct permutations of the multiset
//! `{0^c₀, 1^c₁, …, void^c_void}`. They are visited in lexicographic order;
//! each step rewrites only a suffix, so the energy is updated from the atoms
//! that left and entered that suffix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{delta_replace, placement_energy, EnergySource};
use crate::error::{Error, Result};
use crate::model::{count_feasible, counts_with_void, Allocation};
use crate::par;

pub const DEFAULT_BUDGET: u64 = 1_000_000_000;
pub const VERTEX_BUDGET: u64 = 1_000_000;

/// Lexicographic walk over the distinct permutations of `assign[start..]`.
#[derive(Clone, Debug)]
pub struct EnumCursor {
    assign: Vec<usize>,
    start: usize,
}

impl EnumCursor {
    /// First feasible allocation in lexicographic order.
    pub fn new(counts_with_void: &[usize]) -> Self {
        Self::with_prefix(&[], counts_with_void)
    }

    /// Walks all completions of `prefix` using the multiset left over from
    /// `counts_with_void`.
    pub fn with_prefix(prefix: &[usize], counts_with_void: &[usize]) -> Self {
        let mut left = counts_with_void.to_vec();
        for &t in prefix {
            left[t] -= 1;
        }
        let mut assign = prefix.to_vec();
        for (t, &c) in left.iter().enumerate() {
            assign.extend(std::iter::repeat_n(t, c));
        }
        EnumCursor { assign, start: prefix.len() }
    }

    pub fn current(&self) -> &[usize] {
        &self.assign
    }

    /// Steps to the next permutation and returns the first changed index,
    /// or `None` once the walk is exhausted.
    pub fn advance(&mut self) -> Option<usize> {
        let a = &mut self.assign[self.start..];
        let len = a.len();
        if len < 2 {
            return None;
        }
        let mut i = len - 1;
        while i > 0 && a[i - 1] >= a[i] {
            i -= 1;
        }
        if i == 0 {
            return None;
        }
        let pivot = i - 1;
        let mut j = len - 1;
        while a[j] <= a[pivot] {
            j -= 1;
        }
        a.swap(pivot, j);
        a[i..].reverse();
        Some(self.start + pivot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub energy: f64,
    pub allocation: Allocation,
    pub visited: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOptions {
    pub budget: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { budget: DEFAULT_BUDGET }
    }
}

fn checked_size(n: usize, counts: &[usize], budget: u64) -> Result<u64> {
    let total = count_feasible(n, counts)?;
    match total.to_u64() {
        Some(t) if t <= budget => Ok(t),
        _ => Err(Error::BudgetExceeded { size: total.to_string(), budget }),
    }
}

/// Multinomial of a multiset, saturating at `u64::MAX`.
fn multiset_size(left: &[usize]) -> u64 {
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for &c in left {
        for i in 1..=c as u128 {
            placed += 1;
            total = total * placed / i;
            if total > u64::MAX as u128 {
                return u64::MAX;
            }
        }
    }
    total as u64
}

/// Splits the walk into disjoint prefix blocks, refining the largest until
/// each holds at most `target` states. Returned in enumeration order.
fn partition(counts_with_void: &[usize], target: u64) -> Vec<Vec<usize>> {
    let n: usize = counts_with_void.iter().sum();
    let size = |prefix: &[usize]| {
        let mut left = counts_with_void.to_vec();
        for &t in prefix {
            left[t] -= 1;
        }
        multiset_size(&left)
    };
    let mut done = Vec::new();
    let mut todo = vec![Vec::new()];
    while let Some(prefix) = todo.pop() {
        if prefix.len() + 1 >= n || size(&prefix) <= target {
            done.push(prefix);
            continue;
        }
        let mut left = counts_with_void.to_vec();
        for &t in &prefix {
            left[t] -= 1;
        }
        for (t, &c) in left.iter().enumerate() {
            if c > 0 {
                let mut child = prefix.clone();
                child.push(t);
                todo.push(child);
            }
        }
    }
    done.sort();
    done
}

fn better(e: f64, best: f64) -> bool {
    e < best - 1e-9 * best.abs().max(1.0)
}

/// Minimum of one prefix block; the earliest state wins near-ties.
fn scan_block<S: EnergySource + ?Sized>(src: &S, prefix: &[usize], cwv: &[usize]) -> (f64, Vec<usize>, u64) {
    let void = cwv.len() - 1;
    let mut cur = EnumCursor::with_prefix(prefix, cwv);
    let mut occ: Vec<(usize, usize)> =
        cur.current().iter().enumerate().filter(|(_, &t)| t != void).map(|(p, &t)| (p, t)).collect();
    let mut e = placement_energy(src, &occ);
    let mut best = (e, cur.current().to_vec());
    let mut visited = 1u64;
    let mut added = Vec::new();
    while let Some(i) = cur.advance() {
        visited += 1;
        let split = occ.partition_point(|&(p, _)| p < i);
        added.clear();
        added.extend(cur.current()[i..].iter().enumerate().filter(|(_, &t)| t != void).map(|(o, &t)| (i + o, t)));
        e += delta_replace(src, &occ, &occ[split..], &added);
        occ.truncate(split);
        occ.extend_from_slice(&added);
        if better(e, best.0) {
            best = (e, cur.current().to_vec());
        }
    }
    (best.0, best.1, visited)
}

/// Exact global minimum by enumeration. Among equal energies the
/// lexicographically smallest allocation is returned.
pub fn brute_force_min<S: EnergySource + ?Sized>(src: &S, counts: &[usize], opts: &OracleOptions) -> Result<OracleResult> {
    let n = src.n_positions();
    if counts.len() != src.n_species() {
        return Err(Error::DimensionMismatch { expected: src.n_species(), got: counts.len() });
    }
    let total = checked_size(n, counts, opts.budget)?;
    let cwv = counts_with_void(n, counts)?;
    let blocks = (8 * par::threads()).max(1) as u64;
    let prefixes = partition(&cwv, (total / blocks).max(10_000));
    let parts = par::map_slice(&prefixes, |p| scan_block(src, p, &cwv));
    let mut visited = 0;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for (e, a, v) in parts {
        visited += v;
        if best.as_ref().is_none_or(|b| better(e, b.0)) {
            best = Some((e, a));
        }
    }
    let (_, assign) = best.expect("at least one feasible allocation");
    let allocation = Allocation::new(assign, counts.len());
    let occ: Vec<_> = allocation.placements().collect();
    Ok(OracleResult { energy: placement_energy(src, &occ), allocation, visited })
}

/// Vertex `B` of the transportation polytope with unit rows and column sums
/// `counts_with_void` maximizing `⟨B, H⟩`, for `H` row-major `n × w`.
/// Ties go to the lexicographically first allocation.
pub fn vertex_argmax(h: &[f64], n: usize, counts_with_void: &[usize], budget: u64) -> Result<Allocation> {
    let w = counts_with_void.len();
    if w == 0 || h.len() != n * w {
        return Err(Error::DimensionMismatch { expected: n * w, got: h.len() });
    }
    if counts_with_void.iter().sum::<usize>() != n {
        return Err(Error::InfeasibleStoichiometry { total: counts_with_void.iter().sum(), positions: n });
    }
    let k = w - 1;
    checked_size(n, &counts_with_void[..k], budget)?;
    let mut cur = EnumCursor::new(counts_with_void);
    let score = |a: &[usize], from: usize| -> f64 { (from..n).map(|p| h[p * w + a[p]]).sum() };
    let mut s = score(cur.current(), 0);
    let mut best = (s, cur.current().to_vec());
    let mut prev = cur.current().to_vec();
    while let Some(i) = cur.advance() {
        s += score(cur.current(), i) - score(&prev, i);
        if s > best.0 + 1e-12 * best.0.abs().max(1.0) {
            best = (s, cur.current().to_vec());
        }
        prev[i..].copy_from_slice(&cur.current()[i..]);
    }
    Ok(Allocation::new(best.1, k))
}

/// SHA-256 of every non-void `α` value, hex encoded.
pub fn source_hash<S: EnergySource + ?Sized>(src: &S) -> String {
    let n = src.n_positions();
    let k = src.n_species();
    let mut h = Sha256::new();
    h.update((n as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    for p1 in 0..n {
        for t1 in 0..k {
            for p2 in 0..n {
                for t2 in 0..k {
                    h.update(src.alpha(p1, t1, p2, t2).to_le_bytes());
                }
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cache_key(hash: &str, counts: &[usize]) -> String {
    let c: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
    format!("{hash}:{}", c.join(","))
}

/// JSON file of oracle results keyed by table hash and stoichiometry.
#[derive(Debug)]
pub struct OracleCache {
    path: PathBuf,
    entries: BTreeMap<String, OracleResult>,
}

impl OracleCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            BTreeMap::new()
        };
        Ok(OracleCache { path, entries })
    }

    pub fn get(&self, key: &str) -> Option<&OracleResult> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, r: OracleResult) -> Result<()> {
        self.entries.insert(key, r);
        std::fs::write(&self.path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }

    /// Cached result, or a fresh enumeration that is then stored.
    pub fn brute_force_min<S: EnergySource + ?Sized>(
        &mut self,
        src: &S,
        counts: &[usize],
        opts: &OracleOptions,
    ) -> Result<OracleResult> {
        let key = cache_key(&source_hash(src), counts);
        if let Some(r) = self.get(&key) {
            return Ok(r.clone());
        }
        let r = brute_force_min(src, counts, opts)?;
        self.insert(key, r.clone())?;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{energy_hard, synth_q, QTable, SynthDistribution};
    use crate::model::validate_allocation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize, k: usize, seed: u64) -> QTable {
        synth_q(n, k, seed, SynthDistribution::Uniform { low: -1.0, high: 1.0 }).unwrap()
    }

    /// Every vector in `{0..=k}^n` with the right counts, full recompute each.
    fn naive_min(q: &QTable, counts: &[usize]) -> (f64, Vec<usize>, u64) {
        let n = q.n_positions();
        let k = counts.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut seen = 0;
        let total = (k + 1).pow(n as u32);
        for code in 0..total {
            let mut a = vec![0; n];
            let mut c = code;
            for p in (0..n).rev() {
                a[p] = c % (k + 1);
                c /= k + 1;
            }
            let x = Allocation::new(a.clone(), k);
            if !validate_allocation(&x, counts, n).is_ok() {
                continue;
            }
            seen += 1;
            let e = energy_hard(&x, q).unwrap();
            if best.as_ref().is_none_or(|b| e < b.0) {
                best = Some((e, a));
            }
        }
        let b = best.unwrap();
        (b.0, b.1, seen)
    }

    #[test]
    fn cursor_visits_each_once() {
        let mut cur = EnumCursor::new(&[1, 2, 1]);
        let mut all = vec![cur.current().to_vec()];
        while cur.advance().is_some() {
            all.push(cur.current().to_vec());
        }
        assert_eq!(all.len(), 12);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn visited_equals_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(2..=8);
            let k = rng.random_range(1..=2);
            let mut counts = vec![];
            let mut left = n;
            for _ in 0..k {
                let c = rng.random_range(1..=left.max(1)).min(left);
                if c == 0 {
                    break;
                }
                counts.push(c);
                left -= c;
            }
            let k = counts.len();
            let q = uniform(n, k, rng.random());
            let r = brute_force_min(&q, &counts, &OracleOptions::default()).unwrap();
            let expect = count_feasible(n, &counts).unwrap().to_u64().unwrap();
            assert_eq!(r.visited, expect);
        }
    }

    #[test]
    fn unique_diagonal_minimum() {
        let mut q = QTable::zeros(3, 1);
        q.set_symmetric(0, 0, 1.0).unwrap();
        q.set_symmetric(1, 1, 2.0).unwrap();
        q.set_symmetric(2, 2, -1.0).unwrap();
        let r = brute_force_min(&q, &[1], &OracleOptions::default()).unwrap();
        assert_eq!(r.allocation.assign, vec![1, 1, 0]);
        assert_eq!(r.energy, -1.0);
    }

    #[test]
    fn matches_naive_enumeration() {
        for seed in 0..10 {
            let q = uniform(6, 2, seed);
            let r = brute_force_min(&q, &[2, 2], &OracleOptions::default()).unwrap();
            let (e, _, seen) = naive_min(&q, &[2, 2]);
            assert!((r.energy - e).abs() < 1e-12);
            assert_eq!(r.visited, seen);
        }
    }

    #[test]
    fn partitions_cover_in_order() {
        let cwv = [2, 1, 5];
        let parts = partition(&cwv, 3);
        assert!(parts.len() > 1);
        let mut all = Vec::new();
        for p in &parts {
            let mut c = EnumCursor::with_prefix(p, &cwv);
            all.push(c.current().to_vec());
            while c.advance().is_some() {
                all.push(c.current().to_vec());
            }
        }
        assert_eq!(all.len(), 168);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn budget_is_enforced() {
        let q = uniform(10, 2, 1);
        let err = brute_force_min(&q, &[3, 3], &OracleOptions { budget: 10 }).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { ref size, budget: 10 } if size == "4200"));
    }

    #[test]
    fn ties_resolve_to_lexicographic_first() {
        let q = QTable::zeros(4, 1);
        let r = brute_force_min(&q, &[2], &OracleOptions::default()).unwrap();
        assert_eq!(r.allocation.assign, vec![0, 0, 1, 1]);
        let h = vec![0.0; 4 * 2];
        assert_eq!(vertex_argmax(&h, 4, &[2, 2], VERTEX_BUDGET).unwrap().assign, vec![0, 0, 1, 1]);
    }

    #[test]
    fn vertex_argmax_cases() {
        // dominant entries consistent with c
        let h = vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0];
        assert_eq!(vertex_argmax(&h, 4, &[1, 2, 1], VERTEX_BUDGET).unwrap().assign, vec![0, 1, 1, 2]);
        // permutation case against all 6 permutations
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms
                .iter()
                .max_by(|a, b| {
                    let s = |p: &[usize; 3]| (0..3).map(|i| h[i * 3 + p[i]]).sum::<f64>();
                    s(a).total_cmp(&s(b))
                })
                .unwrap();
            assert_eq!(vertex_argmax(&h, 3, &[1, 1, 1], VERTEX_BUDGET).unwrap().assign, best.to_vec());
        }
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.json");
        let q = uniform(6, 1, 4);
        let mut c = OracleCache::open(&path).unwrap();
        let a = c.brute_force_min(&q, &[2], &OracleOptions::default()).unwrap();
        let c2 = OracleCache::open(&path).unwrap();
        let key = cache_key(&source_hash(&q), &[2]);
        assert_eq!(c2.get(&key), Some(&a));
    }
}
