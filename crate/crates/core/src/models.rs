//! Local spin-chain Hamiltonians and their sparse sector matrices.
//!
//! Spin operators are `S = σ/2`, so a nearest-neighbour XY term contributes
//! `J_xy/2` to the flip matrix element and an Ising term `±J_z/4` to the
//! diagonal. A uniform field enters as `-h Σ S^z_i`.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::hilbert::Basis;
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BondKind {
    Heisenberg,
    Xxz,
}

/// `J_xy (S^x_a S^x_b + S^y_a S^y_b) + J_z S^z_a S^z_b` with `b - a ∈ {1, 2}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BondTerm {
    pub site_a: usize,
    pub site_b: usize,
    pub j_xy: f64,
    pub j_z: f64,
}

impl BondTerm {
    pub fn heisenberg(site_a: usize, site_b: usize, j: f64) -> Self {
        Self::xxz(site_a, site_b, j, j)
    }

    pub fn xxz(site_a: usize, site_b: usize, j_xy: f64, j_z: f64) -> Self {
        Self {
            site_a,
            site_b,
            j_xy,
            j_z,
        }
    }

    pub fn kind(&self) -> BondKind {
        if self.j_xy == self.j_z {
            BondKind::Heisenberg
        } else {
            BondKind::Xxz
        }
    }

    pub fn is_nearest(&self) -> bool {
        self.site_b == self.site_a + 1
    }

    pub(crate) fn shifted(&self, by: isize) -> Self {
        Self {
            site_a: (self.site_a as isize + by) as usize,
            site_b: (self.site_b as isize + by) as usize,
            ..*self
        }
    }
}

/// A chain Hamiltonian built from [`BondTerm`]s plus an optional uniform field.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHamiltonian {
    n_sites: usize,
    terms: Vec<BondTerm>,
    field: f64,
    dimer_field: f64,
}

impl LocalHamiltonian {
    pub fn new(n_sites: usize, terms: Vec<BondTerm>) -> Result<Self> {
        for t in &terms {
            if t.site_b >= n_sites || !(t.site_b == t.site_a + 1 || t.site_b == t.site_a + 2) {
                return Err(arg(format!(
                    "bond ({}, {}) invalid on {n_sites} sites",
                    t.site_a, t.site_b
                )));
            }
            if !t.j_xy.is_finite() || !t.j_z.is_finite() {
                return Err(arg("coupling must be finite"));
            }
        }
        Ok(Self {
            n_sites,
            terms,
            field: 0.0,
            dimer_field: 0.0,
        })
    }

    /// A Hamiltonian with no terms.
    pub fn empty(n_sites: usize) -> Self {
        Self {
            n_sites,
            terms: Vec::new(),
            field: 0.0,
            dimer_field: 0.0,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn terms(&self) -> &[BondTerm] {
        &self.terms
    }

    pub fn field(&self) -> f64 {
        self.field
    }

    pub fn dimer_field(&self) -> f64 {
        self.dimer_field
    }

    /// Uniform Zeeman term `-h Σ S^z`.
    pub fn with_field(mut self, h: f64) -> Self {
        self.field = h;
        self
    }

    /// Adds `λ Σ_i (-1)^i S_i·S_{i+1}` over every nearest bond `i` of the
    /// chain. Site parity is absolute, so apply this before restricting.
    pub fn with_dimer_field(mut self, lambda: f64) -> Self {
        for i in 0..self.n_sites.saturating_sub(1) {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let delta = sign * lambda;
            match self
                .terms
                .iter_mut()
                .find(|t| t.site_a == i && t.site_b == i + 1)
            {
                Some(t) => {
                    t.j_xy += delta;
                    t.j_z += delta;
                }
                None => self.terms.push(BondTerm::heisenberg(i, i + 1, delta)),
            }
        }
        self.dimer_field += lambda;
        self
    }

    /// Keep the terms fully inside `window`, with sites re-based to 0.
    pub fn restrict(&self, window: Range<usize>) -> Result<LocalHamiltonian> {
        if window.is_empty() {
            return Err(arg("empty restriction window"));
        }
        if window.end > self.n_sites {
            return Err(arg(format!(
                "window {window:?} exceeds {} sites",
                self.n_sites
            )));
        }
        let terms = self
            .terms
            .iter()
            .filter(|t| t.site_a >= window.start && t.site_b < window.end)
            .map(|t| t.shifted(-(window.start as isize)))
            .collect();
        Ok(Self {
            n_sites: window.end - window.start,
            terms,
            field: self.field,
            dimer_field: self.dimer_field,
        })
    }

    /// Place this Hamiltonian at `offset` inside a larger chain of `n_sites`.
    pub fn embed(&self, n_sites: usize, offset: usize) -> Result<LocalHamiltonian> {
        if offset + self.n_sites > n_sites {
            return Err(arg("embedding exceeds the target chain"));
        }
        Ok(Self {
            n_sites,
            terms: self.terms.iter().map(|t| t.shifted(offset as isize)).collect(),
            field: self.field,
            dimer_field: self.dimer_field,
        })
    }

    /// Nearest-neighbour couplings `J_xy` in bond order (absent bonds are 0).
    pub fn nearest_couplings(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_sites.saturating_sub(1)];
        for t in self.terms.iter().filter(|t| t.is_nearest()) {
            out[t.site_a] += t.j_xy;
        }
        out
    }

    /// `<s|H|s>` for a computational state.
    #[inline]
    pub fn diagonal(&self, bits: u64) -> f64 {
        let mut e = 0.0;
        for t in &self.terms {
            let same = (bits >> t.site_a ^ bits >> t.site_b) & 1 == 0;
            e += if same { 0.25 } else { -0.25 } * t.j_z;
        }
        if self.field != 0.0 {
            let up = (bits & crate::hilbert::low_mask(self.n_sites)).count_ones() as f64;
            e -= self.field * (up - self.n_sites as f64 / 2.0);
        }
        e
    }
}

/// Open XXZ chain `Σ S^x S^x + S^y S^y + Δ S^z S^z`.
pub fn build_xxz(n_sites: usize, delta: f64) -> Result<LocalHamiltonian> {
    if n_sites < 2 {
        return Err(arg("xxz chain needs at least two sites"));
    }
    let terms = (0..n_sites - 1)
        .map(|i| BondTerm::xxz(i, i + 1, 1.0, delta))
        .collect();
    LocalHamiltonian::new(n_sites, terms)
}

/// Inter-dimer couplings of the ferro/antiferro dimer chain: `j_f` with
/// probability `p`, else `j_a`. One value per inter-dimer bond.
pub fn faf_couplings<R: Rng + ?Sized>(
    n_sites: usize,
    j_f: f64,
    j_a: f64,
    p: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_sites % 2 != 0 || n_sites < 2 {
        return Err(arg(format!("dimer chain needs an even length, got {n_sites}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(arg(format!("probability {p} outside [0, 1]")));
    }
    if !(j_f < 0.0 && j_a > 0.0) {
        return Err(arg("dimer chain needs J_F < 0 < J_A"));
    }
    Ok((0..n_sites / 2 - 1)
        .map(|_| if rng.random::<f64>() < p { j_f } else { j_a })
        .collect())
}

/// Dimer chain with intra-dimer coupling `j` on bonds `(2i, 2i+1)` and the
/// given inter-dimer couplings on `(2i+1, 2i+2)`.
pub fn faf_from_couplings(n_sites: usize, j: f64, inter: &[f64]) -> Result<LocalHamiltonian> {
    if n_sites % 2 != 0 {
        return Err(arg(format!("dimer chain needs an even length, got {n_sites}")));
    }
    if inter.len() != n_sites / 2 - 1 {
        return Err(arg(format!(
            "expected {} inter-dimer couplings, got {}",
            n_sites / 2 - 1,
            inter.len()
        )));
    }
    let mut terms = Vec::with_capacity(n_sites);
    for i in 0..n_sites - 1 {
        let jb = if i % 2 == 0 { j } else { inter[i / 2] };
        terms.push(BondTerm::heisenberg(i, i + 1, jb));
    }
    LocalHamiltonian::new(n_sites, terms)
}

pub fn build_faf<R: Rng + ?Sized>(
    n_sites: usize,
    j: f64,
    j_f: f64,
    j_a: f64,
    p: f64,
    rng: &mut R,
) -> Result<LocalHamiltonian> {
    let inter = faf_couplings(n_sites, j_f, j_a, p, rng)?;
    faf_from_couplings(n_sites, j, &inter)
}

/// Nearest couplings of the frustrated chain: either all 1 or drawn with
/// equal probability from `choices`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Frustration {
    Pure,
    Disordered { choices: [f64; 2] },
}

pub fn frustrated_couplings<R: Rng + ?Sized>(
    n_sites: usize,
    mode: Frustration,
    rng: &mut R,
) -> Vec<f64> {
    let n_bonds = n_sites.saturating_sub(1);
    match mode {
        Frustration::Pure => vec![1.0; n_bonds],
        Frustration::Disordered { choices } => (0..n_bonds)
            .map(|_| choices[rng.random_range(0..2)])
            .collect(),
    }
}

/// `Σ J_i S_i·S_{i+1} + Σ K_i S_i·S_{i+2}` with `K_i = J_i J_{i+1} / 2`.
pub fn frustrated_from_couplings(n_sites: usize, j: &[f64]) -> Result<LocalHamiltonian> {
    if n_sites < 3 {
        return Err(arg("frustrated chain needs at least three sites"));
    }
    if j.len() != n_sites - 1 {
        return Err(arg(format!(
            "expected {} couplings, got {}",
            n_sites - 1,
            j.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * n_sites);
    for i in 0..n_sites - 1 {
        terms.push(BondTerm::heisenberg(i, i + 1, j[i]));
        if i + 2 < n_sites {
            terms.push(BondTerm::heisenberg(i, i + 2, 0.5 * j[i] * j[i + 1]));
        }
    }
    LocalHamiltonian::new(n_sites, terms)
}

pub fn build_frustrated<R: Rng + ?Sized>(
    n_sites: usize,
    mode: Frustration,
    rng: &mut R,
) -> Result<LocalHamiltonian> {
    let j = frustrated_couplings(n_sites, mode, rng);
    frustrated_from_couplings(n_sites, &j)
}

/// Write couplings one per line; the output parses back bit-exactly.
pub fn write_couplings(couplings: &[f64]) -> String {
    let mut s = String::with_capacity(couplings.len() * 6);
    for c in couplings {
        s.push_str(&format!("{c}\n"));
    }
    s
}

pub fn parse_couplings(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::Parse {
            line: i + 1,
            column: line.find(t).unwrap_or(0) + 1,
            message: format!("not a number: {t:?}"),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Spin-wave velocity `(π/2) sin θ / θ` with `cos θ = Δ`.
pub fn spin_wave_velocity(delta: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&delta) {
        return Err(Error::Domain(format!(
            "spin-wave velocity needs |Δ| <= 1, got {delta}"
        )));
    }
    let theta = delta.acos();
    let sinc = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        theta.sin() / theta
    };
    Ok(std::f64::consts::FRAC_PI_2 * sinc)
}

/// Row-compressed complex matrix.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<C64>,
}

impl SparseMatrix {
    /// Assemble from per-row `(column, value)` lists; duplicates are summed.
    pub fn from_rows(rows: Vec<Vec<(u32, C64)>>) -> Self {
        let dim = rows.len();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<u32> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.vals[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `y = A x`.
    #[inline]
    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for (r, out) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = C64::new(0.0, 0.0);
            for k in lo..hi {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *out = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// Largest `|A_rc - conj(A_cr)|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                let back = self
                    .row(c)
                    .find(|&(cc, _)| cc == r)
                    .map(|(_, w)| w)
                    .unwrap_or(C64::new(0.0, 0.0));
                worst = worst.max((v - back.conj()).norm());
            }
        }
        worst
    }

    /// Gershgorin bound on the spectral radius.
    pub fn norm_bound(&self) -> f64 {
        (0..self.dim)
            .map(|r| self.row(r).map(|(_, v)| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Matrix elements `<s'|H|s>` of `h` in `basis`.
pub fn assemble_sparse(h: &LocalHamiltonian, basis: &Basis) -> Result<SparseMatrix> {
    if h.n_sites() != basis.n_sites() {
        return Err(arg(format!(
            "hamiltonian has {} sites but basis has {}",
            h.n_sites(),
            basis.n_sites()
        )));
    }
    let rows: Vec<Vec<(u32, C64)>> = (0..basis.dim())
        .into_par_iter()
        .map(|k| {
            let s = basis.state(k);
            let mut row = Vec::with_capacity(h.terms().len() + 1);
            let d = h.diagonal(s);
            if d != 0.0 {
                row.push((k as u32, C64::new(d, 0.0)));
            }
            for t in h.terms() {
                if t.j_xy == 0.0 {
                    continue;
                }
                if (s >> t.site_a ^ s >> t.site_b) & 1 == 1 {
                    let flipped = s ^ (1 << t.site_a | 1 << t.site_b);
                    let c = basis
                        .index(flipped)
                        .expect("flip terms conserve total Sz");
                    row.push((c as u32, C64::new(0.5 * t.j_xy, 0.0)));
                }
            }
            row
        })
        .collect();
    Ok(SparseMatrix::from_rows(rows))
}

/// Dense matrix of `h` on the full `2^n` space.
pub fn dense_hamiltonian(h: &LocalHamiltonian) -> Result<DMatrix<C64>> {
    Ok(assemble_sparse(h, &Basis::full(h.n_sites()))?.to_dense())
}
