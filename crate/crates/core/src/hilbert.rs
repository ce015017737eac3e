//! Computational basis, total-Sz sectors and state vectors.
//!
//! Site `i` of a chain is bit `i` of a `u64`; a set bit is spin up. A
//! [`SectorBasis`] lists every bitstring with a fixed number of up spins in
//! increasing order and inverts that list with the combinatorial number
//! system, so lookups need no hash map.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg, Error, Result};
use crate::C64;

/// Largest chain handled by the bit encoding.
pub const MAX_SITES: usize = 40;

/// Amplitudes below this squared magnitude are dropped by
/// [`conditional_decompose`].
pub const BRANCH_CUTOFF: f64 = 1e-14;

const FACTOR_TOL: f64 = 1e-10;

#[inline]
pub(crate) fn low_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// A computational basis state of a spin-1/2 chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisState {
    bits: u64,
    n_sites: usize,
}

impl BasisState {
    pub fn new(bits: u64, n_sites: usize) -> Result<Self> {
        if n_sites > MAX_SITES {
            return Err(arg(format!("n_sites {n_sites} exceeds {MAX_SITES}")));
        }
        if bits & !low_mask(n_sites) != 0 {
            return Err(arg(format!("bits {bits:#b} set beyond site {n_sites}")));
        }
        Ok(Self { bits, n_sites })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn is_up(&self, site: usize) -> bool {
        self.bits >> site & 1 == 1
    }

    pub fn n_up(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn total_sz(&self) -> f64 {
        self.n_up() as f64 - self.n_sites as f64 / 2.0
    }
}

/// Binomial coefficients up to `MAX_SITES`, used for ranking.
fn binomial_table() -> &'static [[u64; MAX_SITES + 1]; MAX_SITES + 1] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[[u64; MAX_SITES + 1]; MAX_SITES + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0u64; MAX_SITES + 1]; MAX_SITES + 1];
        for n in 0..=MAX_SITES {
            t[n][0] = 1;
            for k in 1..=n {
                t[n][k] = t[n - 1][k - 1] + if k <= n - 1 { t[n - 1][k] } else { 0 };
            }
        }
        t
    })
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n || n > MAX_SITES {
        0
    } else {
        binomial_table()[n][k]
    }
}

/// All basis states of `n_sites` spins with exactly `n_up` up spins.
#[derive(Clone, Debug)]
pub struct SectorBasis {
    n_sites: usize,
    n_up: usize,
    states: Vec<u64>,
}

impl SectorBasis {
    pub fn new(n_sites: usize, n_up: usize) -> Result<Self> {
        enumerate_sector(n_sites, n_up)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_up(&self) -> usize {
        self.n_up
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, k: usize) -> u64 {
        self.states[k]
    }

    pub fn total_sz(&self) -> f64 {
        self.n_up as f64 - self.n_sites as f64 / 2.0
    }

    /// Position of `bits` in the sector, or `None` if it lies outside.
    #[inline]
    pub fn index(&self, bits: u64) -> Option<usize> {
        if bits & !low_mask(self.n_sites) != 0 || bits.count_ones() as usize != self.n_up {
            return None;
        }
        Some(self.rank(bits))
    }

    /// Rank of a bitstring among those with the same popcount
    /// (combinatorial number system). Caller guarantees membership.
    #[inline]
    pub fn rank(&self, mut bits: u64) -> usize {
        let table = binomial_table();
        let mut r = 0u64;
        let mut j = 1;
        while bits != 0 {
            let p = bits.trailing_zeros() as usize;
            r += table[p][j];
            j += 1;
            bits &= bits - 1;
        }
        r as usize
    }
}

/// Enumerate the sector with `n_up` up spins on `n_sites` sites in increasing
/// bit order.
pub fn enumerate_sector(n_sites: usize, n_up: usize) -> Result<SectorBasis> {
    if n_sites > MAX_SITES {
        return Err(arg(format!("n_sites {n_sites} exceeds {MAX_SITES}")));
    }
    if n_up > n_sites {
        return Err(arg(format!("n_up {n_up} exceeds n_sites {n_sites}")));
    }
    let count = binomial(n_sites, n_up) as usize;
    let mut states = Vec::with_capacity(count);
    if n_up == 0 {
        states.push(0);
    } else {
        // Gosper's hack: next larger integer with the same popcount.
        let mut x: u64 = low_mask(n_up);
        let limit = 1u64 << n_sites;
        while x < limit {
            states.push(x);
            let c = x & x.wrapping_neg();
            let r = x + c;
            x = (((r ^ x) >> 2) / c) | r;
        }
    }
    debug_assert_eq!(states.len(), count);
    Ok(SectorBasis {
        n_sites,
        n_up,
        states,
    })
}

/// Either the full `2^n` space or one total-Sz sector.
#[derive(Clone, Debug)]
pub enum Basis {
    Full { n_sites: usize },
    Sector(Arc<SectorBasis>),
}

impl Basis {
    pub fn full(n_sites: usize) -> Self {
        Basis::Full { n_sites }
    }

    pub fn sector(n_sites: usize, n_up: usize) -> Result<Self> {
        Ok(Basis::Sector(Arc::new(enumerate_sector(n_sites, n_up)?)))
    }

    pub fn n_sites(&self) -> usize {
        match self {
            Basis::Full { n_sites } => *n_sites,
            Basis::Sector(s) => s.n_sites(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Basis::Full { n_sites } => 1usize << n_sites,
            Basis::Sector(s) => s.len(),
        }
    }

    pub fn n_up(&self) -> Option<usize> {
        match self {
            Basis::Full { .. } => None,
            Basis::Sector(s) => Some(s.n_up()),
        }
    }

    #[inline]
    pub fn state(&self, k: usize) -> u64 {
        match self {
            Basis::Full { .. } => k as u64,
            Basis::Sector(s) => s.state(k),
        }
    }

    #[inline]
    pub fn index(&self, bits: u64) -> Option<usize> {
        match self {
            Basis::Full { n_sites } => {
                if bits & !low_mask(*n_sites) == 0 {
                    Some(bits as usize)
                } else {
                    None
                }
            }
            Basis::Sector(s) => s.index(bits),
        }
    }

    /// True when both bases describe the same space.
    pub fn same_space(&self, other: &Basis) -> bool {
        match (self, other) {
            (Basis::Full { n_sites: a }, Basis::Full { n_sites: b }) => a == b,
            (Basis::Sector(a), Basis::Sector(b)) => {
                a.n_sites() == b.n_sites() && a.n_up() == b.n_up()
            }
            _ => false,
        }
    }
}

/// Complex amplitudes over a [`Basis`].
#[derive(Clone, Debug)]
pub struct StateVector {
    basis: Basis,
    amps: Vec<C64>,
}

impl StateVector {
    pub fn new(basis: Basis, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != basis.dim() {
            return Err(arg(format!(
                "amplitude length {} does not match basis dimension {}",
                amps.len(),
                basis.dim()
            )));
        }
        Ok(Self { basis, amps })
    }

    pub fn zeros(basis: Basis) -> Self {
        let dim = basis.dim();
        Self {
            basis,
            amps: vec![C64::new(0.0, 0.0); dim],
        }
    }

    /// A single computational basis state in `basis`.
    pub fn basis_state(basis: Basis, bits: u64) -> Result<Self> {
        let k = basis
            .index(bits)
            .ok_or_else(|| arg(format!("bits {bits:#b} not in basis")))?;
        let mut s = Self::zeros(basis);
        s.amps[k] = C64::new(1.0, 0.0);
        Ok(s)
    }

    /// Normalized vector with i.i.d. complex Gaussian amplitudes.
    pub fn random<R: Rng + ?Sized>(basis: Basis, rng: &mut R) -> Self {
        let amps = (0..basis.dim())
            .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let mut s = Self { basis, amps };
        s.normalize();
        s
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn n_sites(&self) -> usize {
        self.basis.n_sites()
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amps(self) -> Vec<C64> {
        self.amps
    }

    /// Amplitude of the computational state `bits` (zero outside the basis).
    pub fn amplitude(&self, bits: u64) -> C64 {
        self.basis
            .index(bits)
            .map(|k| self.amps[k])
            .unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.amps)
    }

    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            let inv = 1.0 / n;
            self.amps.iter_mut().for_each(|a| *a *= inv);
        }
        n
    }

    /// `<self|other>`; both vectors must share a basis.
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if !self.basis.same_space(&other.basis) {
            return Err(arg("inner product between different bases"));
        }
        Ok(inner(&self.amps, &other.amps))
    }

    /// `<S^z_site>`.
    pub fn sz(&self, site: usize) -> f64 {
        sz_expectation(&self.basis, &self.amps, site)
    }

    /// Express the vector in the full `2^n` basis.
    pub fn to_full(&self) -> StateVector {
        match &self.basis {
            Basis::Full { .. } => self.clone(),
            Basis::Sector(s) => {
                let mut out = StateVector::zeros(Basis::full(s.n_sites()));
                for (k, &b) in s.states().iter().enumerate() {
                    out.amps[b as usize] = self.amps[k];
                }
                out
            }
        }
    }

    /// Total up-spin count if every nonzero amplitude shares it.
    pub fn definite_n_up(&self) -> Option<usize> {
        if let Some(n) = self.basis.n_up() {
            return Some(n);
        }
        let mut found = None;
        for (k, a) in self.amps.iter().enumerate() {
            if a.norm_sqr() > 0.0 {
                let n = self.basis.state(k).count_ones() as usize;
                match found {
                    None => found = Some(n),
                    Some(m) if m != n => return None,
                    _ => {}
                }
            }
        }
        found
    }

    /// Move into the total-Sz sector containing the state, if it has one.
    pub fn into_sector(self) -> Result<StateVector> {
        if matches!(self.basis, Basis::Sector(_)) {
            return Ok(self);
        }
        let n_up = self
            .definite_n_up()
            .ok_or_else(|| arg("state is not a total-Sz eigenstate"))?;
        let basis = Basis::sector(self.n_sites(), n_up)?;
        let mut out = StateVector::zeros(basis.clone());
        for (b, a) in self.amps.iter().enumerate() {
            if let Some(k) = basis.index(b as u64) {
                out.amps[k] = *a;
            }
        }
        Ok(out)
    }

    /// `self ⊗ high`, with `self` on the low sites.
    pub fn kron(&self, high: &StateVector) -> Result<StateVector> {
        let n_low = self.n_sites();
        let n = n_low + high.n_sites();
        let basis = match (self.basis.n_up(), high.basis.n_up()) {
            (Some(a), Some(b)) => Basis::sector(n, a + b)?,
            _ => Basis::full(n),
        };
        let mut out = StateVector::zeros(basis);
        for (i, a) in self.amps.iter().enumerate() {
            if *a == C64::new(0.0, 0.0) {
                continue;
            }
            let lo = self.basis.state(i);
            for (j, b) in high.amps.iter().enumerate() {
                let bits = lo | high.basis.state(j) << n_low;
                let k = out.basis.index(bits).expect("product lies in sector");
                out.amps[k] = a * b;
            }
        }
        Ok(out)
    }
}

pub(crate) fn norm(v: &[C64]) -> f64 {
    v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
}

pub(crate) fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn sz_expectation(basis: &Basis, amps: &[C64], site: usize) -> f64 {
    amps.iter()
        .enumerate()
        .map(|(k, a)| {
            let s = if basis.state(k) >> site & 1 == 1 { 0.5 } else { -0.5 };
            s * a.norm_sqr()
        })
        .sum()
}

/// Bits of the Neel pattern on `n_sites` sites.
pub fn neel_bits(n_sites: usize, up_first: bool) -> u64 {
    let even = (0..n_sites).step_by(2).fold(0u64, |acc, i| acc | 1 << i);
    if up_first {
        even
    } else {
        !even & low_mask(n_sites)
    }
}

/// Largest sector [`neel_state`] will materialize.
pub const MAX_SECTOR_DIM: u64 = 1 << 26;

pub fn neel_basis_state(n_sites: usize, up_first: bool) -> Result<BasisState> {
    BasisState::new(neel_bits(n_sites, up_first), n_sites)
}

/// Product state with alternating spins, stored in its total-Sz sector.
pub fn neel_state(n_sites: usize, up_first: bool) -> Result<StateVector> {
    if n_sites == 0 {
        return Err(arg("neel state needs at least one site"));
    }
    let b = neel_basis_state(n_sites, up_first)?;
    let dim = binomial(n_sites, b.n_up());
    if dim > MAX_SECTOR_DIM {
        return Err(Error::Resource(format!(
            "sector of dimension {dim} exceeds {MAX_SECTOR_DIM}"
        )));
    }
    let basis = Basis::sector(n_sites, b.n_up())?;
    StateVector::basis_state(basis, b.bits())
}

fn check_cuts(n: usize, cuts: &[Range<usize>; 3]) -> Result<()> {
    if cuts[0].start != 0 || cuts[0].end != cuts[1].start || cuts[1].end != cuts[2].start || cuts[2].end != n {
        return Err(arg(format!(
            "cuts {cuts:?} must be contiguous and cover 0..{n}"
        )));
    }
    if cuts.iter().any(|r| r.is_empty()) {
        return Err(arg("cut ranges must be non-empty"));
    }
    Ok(())
}

#[inline]
fn field(bits: u64, r: &Range<usize>) -> u64 {
    bits >> r.start & low_mask(r.end - r.start)
}

/// Split a product state `Ψ = Ψ_0 ⊗ Ψ_1 ⊗ Ψ_2` over three contiguous ranges.
///
/// Each factor is normalized and returned on its own (re-based) sites, in a
/// total-Sz sector when it has definite magnetization. The global phase is
/// carried by the first factor.
pub fn factorize_split(
    psi: &StateVector,
    cuts: [Range<usize>; 3],
) -> Result<(StateVector, StateVector, StateVector)> {
    let n = psi.n_sites();
    check_cuts(n, &cuts)?;
    let norm = psi.norm();
    if norm == 0.0 {
        return Err(arg("cannot factorize the zero vector"));
    }
    let (kmax, _) = psi
        .amps()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .expect("non-empty state");
    let pivot = psi.basis().state(kmax);
    let pivot_fields: Vec<u64> = cuts.iter().map(|r| field(pivot, r)).collect();

    let mut factors: Vec<Vec<C64>> = cuts
        .iter()
        .map(|r| vec![C64::new(0.0, 0.0); 1usize << (r.end - r.start)])
        .collect();
    for (k, a) in psi.amps().iter().enumerate() {
        let bits = psi.basis().state(k);
        let f: Vec<u64> = cuts.iter().map(|r| field(bits, r)).collect();
        for p in 0..3 {
            if (0..3).all(|q| q == p || f[q] == pivot_fields[q]) {
                factors[p][f[p] as usize] = *a;
            }
        }
    }
    for f in factors.iter_mut() {
        let nf = norm_of(f);
        f.iter_mut().for_each(|a| *a /= nf);
    }
    let prod_pivot = factors[0][pivot_fields[0] as usize]
        * factors[1][pivot_fields[1] as usize]
        * factors[2][pivot_fields[2] as usize];
    let phase = psi.amps()[kmax] / norm / prod_pivot;
    let phase = phase / phase.norm();
    factors[0].iter_mut().for_each(|a| *a *= phase);

    // ‖ψ̂ − P‖² = 2 − 2 Re<ψ̂|P> for unit vectors.
    let overlap: C64 = psi
        .amps()
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let bits = psi.basis().state(k);
            let p = factors[0][field(bits, &cuts[0]) as usize]
                * factors[1][field(bits, &cuts[1]) as usize]
                * factors[2][field(bits, &cuts[2]) as usize];
            (a / norm).conj() * p
        })
        .sum();
    let residual = (2.0 - 2.0 * overlap.re).max(0.0).sqrt();
    if residual > FACTOR_TOL {
        return Err(Error::Structure { residual });
    }

    let mut out = factors.into_iter().zip(cuts.iter()).map(|(f, r)| {
        StateVector::new(Basis::full(r.end - r.start), f).and_then(|s| {
            if s.definite_n_up().is_some() {
                s.into_sector()
            } else {
                Ok(s)
            }
        })
    });
    let a = out.next().unwrap()?;
    let b = out.next().unwrap()?;
    let c = out.next().unwrap()?;
    Ok((a, b, c))
}

fn norm_of(v: &[C64]) -> f64 {
    norm(v)
}

/// One term `A(α) φ(α) ⊗ ξ(α)` of [`conditional_decompose`].
#[derive(Clone, Debug)]
pub struct Branch {
    /// Outer-site configuration, re-based so the first outer site is bit 0.
    pub alpha: u64,
    /// Marginal amplitude; the phase is kept inside `xi`, so this is real and
    /// non-negative.
    pub amplitude: f64,
    /// Normalized state on the inner sites, in their original order.
    pub xi: StateVector,
}

impl Branch {
    pub fn weight(&self) -> f64 {
        self.amplitude * self.amplitude
    }
}

/// Expand `Ψ = Σ_α A(α) φ(α) ⊗ ξ(α)` with `φ(α)` the computational basis on
/// the contiguous `outer` sites. Branches come out sorted by `alpha`.
///
/// The `ξ(α)` are not orthogonal in general; this is a conditional, not a
/// Schmidt, decomposition.
pub fn conditional_decompose(psi: &StateVector, outer: Range<usize>) -> Result<Vec<Branch>> {
    let n = psi.n_sites();
    if outer.is_empty() || outer.end > n {
        return Err(arg(format!("outer range {outer:?} invalid for {n} sites")));
    }
    let width = outer.end - outer.start;
    let n_inner = n - width;
    let low = low_mask(outer.start);
    let mut groups: BTreeMap<u64, Vec<(u64, C64)>> = BTreeMap::new();
    for (k, a) in psi.amps().iter().enumerate() {
        if *a == C64::new(0.0, 0.0) {
            continue;
        }
        let bits = psi.basis().state(k);
        let alpha = field(bits, &outer);
        let inner_bits = (bits & low) | (bits >> outer.end) << outer.start;
        groups.entry(alpha).or_default().push((inner_bits, *a));
    }
    let mut sectors: HashMap<usize, Basis> = HashMap::new();
    let mut out = Vec::with_capacity(groups.len());
    for (alpha, entries) in groups {
        let w: f64 = entries.iter().map(|(_, a)| a.norm_sqr()).sum();
        if w < BRANCH_CUTOFF {
            continue;
        }
        let amp = w.sqrt();
        let basis = match psi.basis().n_up() {
            Some(total) => {
                let n_up = total - alpha.count_ones() as usize;
                match sectors.get(&n_up) {
                    Some(b) => b.clone(),
                    None => {
                        let b = Basis::sector(n_inner, n_up)?;
                        sectors.insert(n_up, b.clone());
                        b
                    }
                }
            }
            None => Basis::full(n_inner),
        };
        let mut xi = StateVector::zeros(basis);
        for (bits, a) in entries {
            let k = xi.basis.index(bits).expect("inner state lies in sector");
            xi.amps[k] = a / amp;
        }
        out.push(Branch {
            alpha,
            amplitude: amp,
            xi,
        });
    }
    Ok(out)
}

/// Rebuild `Σ_α A(α) φ(α) ⊗ ξ(α)` in `basis`, inverting
/// [`conditional_decompose`].
pub fn reconstruct(branches: &[Branch], outer: Range<usize>, basis: Basis) -> StateVector {
    let mut out = StateVector::zeros(basis);
    let low = low_mask(outer.start);
    for b in branches {
        for (k, a) in b.xi.amps().iter().enumerate() {
            let inner_bits = b.xi.basis().state(k);
            let bits = (inner_bits & low) | b.alpha << outer.start | (inner_bits >> outer.start) << outer.end;
            if let Some(idx) = out.basis.index(bits) {
                out.amps[idx] += a * b.amplitude;
            }
        }
    }
    out
}
