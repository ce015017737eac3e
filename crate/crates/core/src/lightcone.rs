//! Light-cone sampling of a local observable at the centre of a chain.
//!
//! The subchain has `2l + 1` sites labelled `-l..=l`; site `s` is stored at
//! index `s + l`. The two halves are pre-evolved for `t_f / 2`, their outer
//! quarters are measured in the computational basis, and the sampled
//! middle window is evolved exactly, then swept back to `t_f / 2` in steps of
//! `δt`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::hilbert::{conditional_decompose, sz_expectation, Basis, BasisState, Branch, StateVector};
use crate::models::{assemble_sparse, build_xxz, BondTerm, LocalHamiltonian, SparseMatrix};
use crate::propagation::{evolve_in_place, PropagatorConfig, Workspace};
use crate::C64;

/// Largest subchain the exact reference will evolve.
pub const EXACT_MAX_SITES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub enum LightconeModel {
    Xxz { delta: f64 },
    /// Any field-free chain on exactly `2l + 1` sites.
    Custom(LocalHamiltonian),
}

impl LightconeModel {
    pub fn build(&self, n_sites: usize) -> Result<LocalHamiltonian> {
        match self {
            Self::Xxz { delta } => build_xxz(n_sites, *delta),
            Self::Custom(h) => {
                if h.n_sites() != n_sites {
                    return Err(arg(format!(
                        "custom model has {} sites, subchain needs {n_sites}",
                        h.n_sites()
                    )));
                }
                Ok(h.clone())
            }
        }
    }

    pub fn delta(&self) -> Option<f64> {
        match self {
            Self::Xxz { delta } => Some(*delta),
            Self::Custom(_) => None,
        }
    }
}

/// Site-local observable; `Sz(k)` acts on subchain site `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observable {
    Sz(isize),
    Identity,
}

impl Observable {
    pub fn norm(&self) -> f64 {
        match self {
            Self::Sz(_) => 0.5,
            Self::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightconeConfig {
    pub l: usize,
    pub model: LightconeModel,
    pub t_f: f64,
    pub delta_t: f64,
    pub n_it: usize,
    pub seed: u64,
    pub observable: Observable,
    /// Orientation of the central spin in the initial Neel state.
    pub center_up: bool,
    pub propagator: PropagatorConfig,
}

impl LightconeConfig {
    pub fn new(l: usize, model: LightconeModel, t_f: f64) -> Self {
        Self {
            l,
            model,
            t_f,
            delta_t: 0.25,
            n_it: 1000,
            seed: 0,
            observable: Observable::Sz(0),
            center_up: false,
            propagator: PropagatorConfig::adaptive(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 || self.l % 2 == 1 {
            return Err(arg(format!("l must be even and at least 2, got {}", self.l)));
        }
        if !(self.t_f > 0.0 && self.t_f.is_finite()) {
            return Err(arg("t_f must be positive"));
        }
        if !(self.delta_t > 0.0) {
            return Err(arg("δt must be positive"));
        }
        let k = 0.5 * self.t_f / self.delta_t;
        if (k - k.round()).abs() > 1e-9 {
            return Err(arg(format!(
                "δt = {} does not divide t_f/2 = {}",
                self.delta_t,
                0.5 * self.t_f
            )));
        }
        if self.n_it == 0 {
            return Err(arg("N_it must be at least 1"));
        }
        if let Observable::Sz(k) = self.observable {
            if k.unsigned_abs() > self.l / 2 {
                return Err(arg(format!("observable site {k} outside the middle window")));
            }
        }
        self.propagator.validate()
    }

    pub fn n_sweep(&self) -> usize {
        (0.5 * self.t_f / self.delta_t).round() as usize
    }

    /// Swept times in recording order: `t_f, t_f - δt, …, t_f / 2`.
    pub fn sweep_times(&self) -> Vec<f64> {
        (0..=self.n_sweep())
            .map(|k| self.t_f - k as f64 * self.delta_t)
            .collect()
    }
}

/// Pieces of the subchain Hamiltonian, all on the full `2l + 1` sites.
#[derive(Clone, Debug)]
pub struct Splits {
    pub l: usize,
    pub full: LocalHamiltonian,
    pub h_l: LocalHamiltonian,
    pub h_r: LocalHamiltonian,
    pub h_b: LocalHamiltonian,
    pub h_m: LocalHamiltonian,
    pub h_lp: LocalHamiltonian,
    pub h_rp: LocalHamiltonian,
}

fn within(t: &BondTerm, r: &Range<usize>) -> bool {
    t.site_a >= r.start && t.site_b < r.end
}

fn select(h: &LocalHamiltonian, keep: impl Fn(&BondTerm) -> bool) -> Result<LocalHamiltonian> {
    LocalHamiltonian::new(h.n_sites(), h.terms().iter().filter(|t| keep(t)).copied().collect())
}

impl Splits {
    /// Index ranges of the supports of `H_L, H_R, H_M, H_L', H_R'`.
    pub fn supports(l: usize) -> [Range<usize>; 5] {
        let h = l / 2;
        [0..l, l + 1..2 * l + 1, l - h..l + h + 1, l - h..l, l + 1..l + h + 1]
    }

    /// `H_L` on the left half alone, as an `l`-site chain.
    pub fn left_local(&self) -> Result<(LocalHamiltonian, LocalHamiltonian)> {
        let [sl, _, _, slp, _] = Self::supports(self.l);
        let hl = self.h_l.restrict(sl)?;
        let hlp = self.h_lp.restrict(slp)?.embed(self.l, self.l / 2)?;
        Ok((hl, hlp))
    }

    pub fn right_local(&self) -> Result<(LocalHamiltonian, LocalHamiltonian)> {
        let [_, sr, _, _, srp] = Self::supports(self.l);
        let hr = self.h_r.restrict(sr)?;
        let hrp = self.h_rp.restrict(srp)?.embed(self.l, 0)?;
        Ok((hr, hrp))
    }

    pub fn middle_local(&self) -> Result<LocalHamiltonian> {
        let [_, _, sm, _, _] = Self::supports(self.l);
        self.h_m.restrict(sm)
    }
}

/// Split `H'` into `H_L + H_R + H_B` and extract `H_M, H_L', H_R'`.
pub fn split_hamiltonians(h: &LocalHamiltonian) -> Result<Splits> {
    let n = h.n_sites();
    if n < 5 || n % 2 == 0 || (n - 1) / 2 % 2 == 1 {
        return Err(arg(format!(
            "subchain must have 2l+1 sites with l even, got {n} sites"
        )));
    }
    if h.field() != 0.0 || h.dimer_field() != 0.0 {
        return Err(arg("light-cone splitting needs a field-free Hamiltonian"));
    }
    let l = (n - 1) / 2;
    let [sl, sr, sm, slp, srp] = Splits::supports(l);
    let h_l = select(h, |t| within(t, &sl))?;
    let h_r = select(h, |t| within(t, &sr))?;
    let h_b = select(h, |t| !within(t, &sl) && !within(t, &sr))?;
    let h_m = select(h, |t| within(t, &sm))?;
    let h_lp = select(h, |t| within(t, &slp))?;
    let h_rp = select(h, |t| within(t, &srp))?;
    // H_M - H_B = H_L' + H_R' term by term
    let mut rest: Vec<BondTerm> = h_m.terms().to_vec();
    for t in h_b.terms() {
        match rest.iter().position(|x| x == t) {
            Some(i) => {
                rest.remove(i);
            }
            None => {
                return Err(Error::Invariant(format!(
                    "boundary term ({}, {}) lies outside the middle window",
                    t.site_a, t.site_b
                )))
            }
        }
    }
    let mut primes: Vec<BondTerm> = h_lp.terms().iter().chain(h_rp.terms()).copied().collect();
    let key = |t: &BondTerm| (t.site_a, t.site_b);
    rest.sort_by_key(key);
    primes.sort_by_key(key);
    if rest != primes {
        return Err(Error::Invariant("H_M - H_B differs from H_L' + H_R'".into()));
    }
    Ok(Splits {
        l,
        full: h.clone(),
        h_l,
        h_r,
        h_b,
        h_m,
        h_lp,
        h_rp,
    })
}

/// Neel pattern on `n` sites with site `center` pointing up or down.
pub fn neel_bits_centered(n: usize, center: usize, center_up: bool) -> u64 {
    (0..n)
        .filter(|&i| ((i + center) % 2 == 0) == center_up)
        .fold(0, |b, i| b | 1 << i)
}

fn evolve_sector(h: &LocalHamiltonian, psi: &mut StateVector, t: f64, cfg: &PropagatorConfig) -> Result<()> {
    if t == 0.0 || h.terms().is_empty() {
        return Ok(());
    }
    let hs = assemble_sparse(h, psi.basis())?;
    evolve_in_place(&hs, psi.amps_mut(), t, cfg, &mut Workspace::new())?;
    Ok(())
}

/// `Ψ' = exp(+iH' t_f/2) exp(-iH t_f/2) Ψ` on each half.
pub fn prepare_half_states(
    splits: &Splits,
    psi_l: &StateVector,
    psi_r: &StateVector,
    t_f: f64,
    cfg: &PropagatorConfig,
) -> Result<(StateVector, StateVector)> {
    if psi_l.n_sites() != splits.l || psi_r.n_sites() != splits.l {
        return Err(arg("half states must live on l sites"));
    }
    let half = 0.5 * t_f;
    let (hl, hlp) = splits.left_local()?;
    let (hr, hrp) = splits.right_local()?;
    let mut left = psi_l.clone();
    evolve_sector(&hl, &mut left, half, cfg)?;
    evolve_sector(&hlp, &mut left, -half, cfg)?;
    let mut right = psi_r.clone();
    evolve_sector(&hr, &mut right, half, cfg)?;
    evolve_sector(&hrp, &mut right, -half, cfg)?;
    Ok((left, right))
}

/// One sampled pair and its observable along the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub alpha_l: BasisState,
    pub alpha_r: BasisState,
    /// Indexed like [`LightconeConfig::sweep_times`].
    pub values: Vec<f64>,
    pub rng_stream_id: u64,
}

/// Per-time sample statistics, times ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub rms: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_it: usize,
}

impl Estimate {
    /// Welford accumulation in the given order.
    pub fn from_samples(times: Vec<f64>, samples: &[Vec<f64>]) -> Self {
        let m = times.len();
        let mut mean = vec![0.0; m];
        let mut m2 = vec![0.0; m];
        for (k, s) in samples.iter().enumerate() {
            let n = (k + 1) as f64;
            for j in 0..m {
                let d = s[j] - mean[j];
                mean[j] += d / n;
                m2[j] += d * (s[j] - mean[j]);
            }
        }
        let n = samples.len();
        let rms: Vec<f64> = m2.iter().map(|v| (v / n as f64).max(0.0).sqrt()).collect();
        let stderr = rms.iter().map(|r| r / (n as f64).sqrt()).collect();
        Self {
            times,
            mean,
            rms,
            stderr,
            n_it: n,
        }
    }

    pub fn value_at(&self, t: f64) -> Option<(f64, f64)> {
        self.times
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| (self.mean[i], self.stderr[i]))
    }
}

struct Half {
    branches: Vec<Branch>,
    cdf: Vec<f64>,
}

impl Half {
    fn new(psi: &StateVector, outer: Range<usize>) -> Result<Self> {
        let branches = conditional_decompose(psi, outer)?;
        let mut acc = 0.0;
        let cdf = branches
            .iter()
            .map(|b| {
                acc += b.weight();
                acc
            })
            .collect();
        Ok(Self { branches, cdf })
    }

    fn total(&self) -> f64 {
        *self.cdf.last().unwrap_or(&0.0)
    }

    fn draw(&self, u: f64) -> usize {
        let x = u * self.total();
        self.cdf
            .partition_point(|&c| c <= x)
            .min(self.branches.len() - 1)
    }
}

/// Precomputed sampling tables and middle-window sector matrices.
pub struct Sampler {
    cfg: LightconeConfig,
    left: Half,
    right: Half,
    center_up: bool,
    sectors: BTreeMap<usize, (Basis, SparseMatrix)>,
}

impl Sampler {
    pub fn new(cfg: &LightconeConfig) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.l;
        let n = 2 * l + 1;
        let h = cfg.model.build(n)?;
        let splits = split_hamiltonians(&h)?;
        let bits = neel_bits_centered(n, l, cfg.center_up);
        let mask = crate::hilbert::low_mask(l);
        let left_bits = bits & mask;
        let right_bits = (bits >> (l + 1)) & mask;
        let psi_l = StateVector::basis_state(Basis::sector(l, left_bits.count_ones() as usize)?, left_bits)?;
        let psi_r = StateVector::basis_state(Basis::sector(l, right_bits.count_ones() as usize)?, right_bits)?;
        let (pl, pr) = prepare_half_states(&splits, &psi_l, &psi_r, cfg.t_f, &cfg.propagator)?;
        let left = Half::new(&pl, 0..l / 2)?;
        let right = Half::new(&pr, l / 2..l)?;
        if left.branches.is_empty() || right.branches.is_empty() {
            return Err(Error::Invariant("no branch carries weight".into()));
        }
        let hm = splits.middle_local()?;
        let c = cfg.center_up as usize;
        let mut sectors = BTreeMap::new();
        for a in &left.branches {
            for b in &right.branches {
                let n_up = a.xi.definite_n_up().zip(b.xi.definite_n_up()).map(|(x, y)| x + y + c);
                let n_up = n_up.ok_or_else(|| Error::Invariant("branch state left its sector".into()))?;
                if let std::collections::btree_map::Entry::Vacant(e) = sectors.entry(n_up) {
                    let basis = Basis::sector(l + 1, n_up)?;
                    let m = assemble_sparse(&hm, &basis)?;
                    e.insert((basis, m));
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            left,
            right,
            center_up: cfg.center_up,
            sectors,
        })
    }

    pub fn config(&self) -> &LightconeConfig {
        &self.cfg
    }

    /// `(α, |A(α)|²)` on the left and right outer quarters.
    pub fn weights(&self) -> (Vec<(u64, f64)>, Vec<(u64, f64)>) {
        let f = |h: &Half| h.branches.iter().map(|b| (b.alpha, b.weight())).collect();
        (f(&self.left), f(&self.right))
    }

    /// `ξ_L ⊗ Ψ_C ⊗ ξ_R` on the middle window, in its sector basis.
    fn middle_state(&self, il: usize, ir: usize) -> Result<(usize, Vec<C64>)> {
        let h = self.cfg.l / 2;
        let (xl, xr) = (&self.left.branches[il].xi, &self.right.branches[ir].xi);
        let n_up = xl.definite_n_up().unwrap() + xr.definite_n_up().unwrap() + self.center_up as usize;
        let (basis, _) = self
            .sectors
            .get(&n_up)
            .ok_or_else(|| Error::Invariant(format!("sector {n_up} not prepared")))?;
        let mut amps = vec![C64::new(0.0, 0.0); basis.dim()];
        let c = (self.center_up as u64) << h;
        for (i, a) in xl.amps().iter().enumerate() {
            let lo = xl.basis().state(i) | c;
            for (j, b) in xr.amps().iter().enumerate() {
                let bits = lo | xr.basis().state(j) << (h + 1);
                let k = basis
                    .index(bits)
                    .ok_or_else(|| Error::Invariant("product state outside its sector".into()))?;
                amps[k] = a * b;
            }
        }
        Ok((n_up, amps))
    }

    fn measure(&self, basis: &Basis, amps: &[C64]) -> f64 {
        match self.cfg.observable {
            Observable::Sz(k) => sz_expectation(basis, amps, (self.cfg.l as isize / 2 + k) as usize),
            Observable::Identity => amps.iter().map(|a| a.norm_sqr()).sum(),
        }
    }

    /// `E(O, α_L, α_R)` at every swept time.
    pub fn evaluate(&self, il: usize, ir: usize, ws: &mut Workspace) -> Result<Vec<f64>> {
        let (n_up, mut amps) = self.middle_state(il, ir)?;
        let (basis, hm) = &self.sectors[&n_up];
        let p = &self.cfg.propagator;
        let mut out = Vec::with_capacity(self.cfg.n_sweep() + 1);
        evolve_in_place(hm, &mut amps, self.cfg.t_f, p, ws)?;
        out.push(self.measure(basis, &amps));
        for _ in 0..self.cfg.n_sweep() {
            evolve_in_place(hm, &mut amps, -self.cfg.delta_t, p, ws)?;
            out.push(self.measure(basis, &amps));
        }
        Ok(out)
    }

    pub fn sample(&self, iteration: u64, ws: &mut Workspace) -> Result<SampleRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(iteration);
        let il = self.left.draw(rng.random());
        let ir = self.right.draw(rng.random());
        let values = self.evaluate(il, ir, ws)?;
        let h = self.cfg.l / 2;
        Ok(SampleRecord {
            alpha_l: BasisState::new(self.left.branches[il].alpha, h)?,
            alpha_r: BasisState::new(self.right.branches[ir].alpha, h)?,
            values,
            rng_stream_id: iteration,
        })
    }

    /// All `N_it` samples, in iteration order.
    pub fn run(&self) -> Result<Vec<SampleRecord>> {
        (0..self.cfg.n_it as u64)
            .into_par_iter()
            .map_init(Workspace::new, |ws, it| self.sample(it, ws))
            .collect()
    }

    /// `Σ |A(α_L)|² |A(α_R)|² E(O, α_L, α_R)` over every pair, per swept time.
    pub fn exhaustive(&self) -> Result<Vec<f64>> {
        let pairs: Vec<(usize, usize)> = (0..self.left.branches.len())
            .flat_map(|i| (0..self.right.branches.len()).map(move |j| (i, j)))
            .collect();
        let per: Vec<Vec<f64>> = pairs
            .par_iter()
            .map_init(Workspace::new, |ws, &(i, j)| {
                let w = self.left.branches[i].weight() * self.right.branches[j].weight();
                Ok(self.evaluate(i, j, ws)?.into_iter().map(|e| w * e).collect())
            })
            .collect::<Result<_>>()?;
        let mut sum = vec![0.0; self.cfg.n_sweep() + 1];
        for v in per {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        Ok(sum)
    }
}

fn ascending(cfg: &LightconeConfig, records: &[SampleRecord]) -> Estimate {
    let mut times = cfg.sweep_times();
    times.reverse();
    let samples: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.values.iter().rev().copied().collect())
        .collect();
    Estimate::from_samples(times, &samples)
}

/// Sample `N_it` pairs and aggregate per swept time.
pub fn run_sampling(cfg: &LightconeConfig) -> Result<Estimate> {
    Ok(run_sampling_with_records(cfg)?.0)
}

pub fn run_sampling_with_records(cfg: &LightconeConfig) -> Result<(Estimate, Vec<SampleRecord>)> {
    let sampler = Sampler::new(cfg)?;
    let records = sampler.run()?;
    Ok((ascending(cfg, &records), records))
}

/// Sample fluctuation of `E` at each swept time, times ascending.
pub fn rms_vs_time(cfg: &LightconeConfig) -> Result<Vec<(f64, f64)>> {
    let est = run_sampling(cfg)?;
    Ok(est.times.into_iter().zip(est.rms).collect())
}

/// Final times for a full curve on `[0, t_max]`: doublings of `2δt` below 1,
/// then every integer up to `t_max`.
pub fn curve_schedule(t_max: f64, delta_t: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 2.0 * delta_t;
    while t < 1.0 - 1e-12 && t <= t_max + 1e-12 {
        out.push(t);
        t *= 2.0;
    }
    let mut k = 1.0;
    while k <= t_max + 1e-12 {
        out.push(k);
        k += 1.0;
    }
    out
}

/// Stitch runs over [`curve_schedule`]; each run reports its swept times
/// later than the previous final time. Time 0 is the initial state.
pub fn run_curve(cfg: &LightconeConfig, t_max: f64) -> Result<Estimate> {
    let schedule = curve_schedule(t_max, cfg.delta_t);
    let mut est = Estimate {
        times: vec![0.0],
        mean: vec![initial_value(cfg)],
        rms: vec![0.0],
        stderr: vec![0.0],
        n_it: cfg.n_it,
    };
    let mut prev = 0.0;
    for &t_f in &schedule {
        let run = run_sampling(&LightconeConfig {
            t_f,
            ..cfg.clone()
        })?;
        for i in 0..run.times.len() {
            if run.times[i] > prev + 1e-9 {
                est.times.push(run.times[i]);
                est.mean.push(run.mean[i]);
                est.rms.push(run.rms[i]);
                est.stderr.push(run.stderr[i]);
            }
        }
        prev = t_f;
    }
    Ok(est)
}

fn initial_value(cfg: &LightconeConfig) -> f64 {
    match cfg.observable {
        Observable::Identity => 1.0,
        Observable::Sz(k) => {
            let up = ((k.unsigned_abs() % 2 == 0) == cfg.center_up) as u8 as f64;
            up - 0.5
        }
    }
}

/// `<O(t)>` on a whole chain by direct evolution, starting from `bits`.
pub fn exact_chain_curve(
    h: &LocalHamiltonian,
    bits: u64,
    site: usize,
    times: &[f64],
    cfg: &PropagatorConfig,
) -> Result<Vec<f64>> {
    let n = h.n_sites();
    if n > EXACT_MAX_SITES {
        return Err(Error::Resource(format!(
            "exact evolution limited to {EXACT_MAX_SITES} sites, asked for {n}"
        )));
    }
    if site >= n {
        return Err(arg(format!("site {site} outside chain of {n}")));
    }
    let basis = Basis::sector(n, (bits & crate::hilbert::low_mask(n)).count_ones() as usize)?;
    let hs = assemble_sparse(h, &basis)?;
    let mut psi = StateVector::basis_state(basis, bits)?;
    let mut ws = Workspace::new();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t < now {
            return Err(arg("times must be ascending"));
        }
        evolve_in_place(&hs, psi.amps_mut(), t - now, cfg, &mut ws)?;
        now = t;
        out.push(psi.sz(site));
    }
    Ok(out)
}

/// Direct evolution of the Neel state on the full `2l + 1`-site subchain.
pub fn exact_subchain_reference(
    l: usize,
    model: &LightconeModel,
    times: &[f64],
    center_up: bool,
    cfg: &PropagatorConfig,
) -> Result<Vec<f64>> {
    let n = 2 * l + 1;
    if n > EXACT_MAX_SITES {
        return Err(Error::Resource(format!(
            "exact subchain of {n} sites exceeds {EXACT_MAX_SITES}"
        )));
    }
    let h = model.build(n)?;
    exact_chain_curve(&h, neel_bits_centered(n, l, center_up), l, times, cfg)
}

/// CSV with columns `t,mean,rms,stderr,N_it,l,Delta,seed`.
pub fn estimate_csv(est: &Estimate, cfg: &LightconeConfig) -> String {
    let delta = cfg.model.delta().map(|d| d.to_string()).unwrap_or_else(|| "custom".into());
    let mut out = String::from("t,mean,rms,stderr,N_it,l,Delta,seed\n");
    for i in 0..est.times.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            est.times[i], est.mean[i], est.rms[i], est.stderr[i], est.n_it, cfg.l, delta, cfg.seed
        ));
    }
    out
}

/// Sampled times whose value lies inside `range`.
pub fn window(est: &Estimate, range: Range<f64>) -> Vec<usize> {
    (0..est.times.len())
        .filter(|&i| range.contains(&est.times[i]))
        .collect()
}
