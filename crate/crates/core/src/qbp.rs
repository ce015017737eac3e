//! Quantum belief propagation for thermal states of open chains.
//!
//! The Gibbs state is grown one site at a time: with `G` the Hamiltonian
//! built so far, adding `A` uses `exp(-β(G+A)) ≈ O exp(-βG) Oᵀ` where
//! `O = exp(-β(G+A)/2) exp(βG/2)` is evaluated on an `l0`-site window.
//! Terms are grouped by their rightmost site `m`; the term group `T_m`
//! enters half when site `m` is added and half one step later, so each
//! step adds `A = ½T_{s-1} + ½T_s`. A final tail step completes `T_{N-1}`.
//! All matrices are real and kept as blocks of fixed window `S^z`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::models::{BondTerm, LocalHamiltonian};

/// Canonical encoding of the weighted terms inside one window.
pub type BondConfigurationKey = Vec<u64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QbpConfig {
    pub l0: usize,
    pub beta: f64,
    /// Full eigenvalue positivity check every this many steps (0 disables).
    pub check_every: usize,
}

impl QbpConfig {
    pub fn new(l0: usize, beta: f64) -> Self {
        Self {
            l0,
            beta,
            check_every: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l0 < 3 || self.l0 % 2 == 0 {
            return Err(arg(format!("window length must be odd and at least 3, got {}", self.l0)));
        }
        if self.l0 > 14 {
            return Err(Error::Resource(format!("window length {} exceeds 14", self.l0)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(arg(format!("β must be finite and non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Basis states of a window grouped by number of up spins.
#[derive(Clone, Debug)]
pub struct SectorLayout {
    pub n_sites: usize,
    pub states: Vec<Vec<u32>>,
    pos: Vec<u32>,
}

impl SectorLayout {
    pub fn new(n_sites: usize) -> Self {
        let mut states = vec![Vec::new(); n_sites + 1];
        let mut pos = vec![0u32; 1 << n_sites];
        for s in 0..1u32 << n_sites {
            let k = s.count_ones() as usize;
            pos[s as usize] = states[k].len() as u32;
            states[k].push(s);
        }
        Self {
            n_sites,
            states,
            pos,
        }
    }

    fn pos(&self, s: u32) -> usize {
        self.pos[s as usize] as usize
    }
}

/// Weighted window Hamiltonian: terms re-based to the window, site fields.
#[derive(Clone, Debug, PartialEq)]
struct WindowTerms {
    bonds: Vec<(usize, usize, f64, f64)>,
    fields: Vec<f64>,
}

impl WindowTerms {
    fn key(&self) -> BondConfigurationKey {
        let mut k = Vec::with_capacity(4 * self.bonds.len() + self.fields.len() + 1);
        k.push(self.fields.len() as u64);
        for &(a, b, jxy, jz) in &self.bonds {
            k.extend([(a as u64) << 32 | b as u64, jxy.to_bits(), jz.to_bits()]);
        }
        k.extend(self.fields.iter().map(|h| h.to_bits()));
        k
    }

    fn sector_matrix(&self, layout: &SectorLayout, k: usize) -> DMatrix<f64> {
        let states = &layout.states[k];
        let d = states.len();
        let mut m = DMatrix::zeros(d, d);
        for (i, &s) in states.iter().enumerate() {
            let mut diag = 0.0;
            for &(a, b, jxy, jz) in &self.bonds {
                let same = (s >> a ^ s >> b) & 1 == 0;
                diag += if same { 0.25 } else { -0.25 } * jz;
                if !same && jxy != 0.0 {
                    let t = s ^ (1 << a | 1 << b);
                    m[(layout.pos(t), i)] += 0.5 * jxy;
                }
            }
            for (site, h) in self.fields.iter().enumerate() {
                diag -= h * if s >> site & 1 == 1 { 0.5 } else { -0.5 };
            }
            m[(i, i)] += diag;
        }
        m
    }
}

/// Chain terms grouped by rightmost site, plus the uniform field.
struct ChainIndex {
    n: usize,
    by_top: Vec<Vec<BondTerm>>,
    field: f64,
}

impl ChainIndex {
    fn new(h: &LocalHamiltonian) -> Self {
        let n = h.n_sites();
        let mut by_top = vec![Vec::new(); n];
        for t in h.terms() {
            by_top[t.site_b].push(*t);
        }
        Self {
            n,
            by_top,
            field: h.field(),
        }
    }

    /// Terms inside `[w0, w0 + width)` whose rightmost site is at most `top`;
    /// those ending exactly at `top` carry weight one half.
    fn window(&self, w0: usize, width: usize, top: usize) -> WindowTerms {
        let mut bonds = Vec::new();
        let mut fields = vec![0.0; width];
        for m in w0..(w0 + width).min(self.n) {
            if m > top {
                break;
            }
            let w = if m == top { 0.5 } else { 1.0 };
            for t in &self.by_top[m] {
                if t.site_a >= w0 {
                    bonds.push((t.site_a - w0, t.site_b - w0, w * t.j_xy, w * t.j_z));
                }
            }
            fields[m - w0] = w * self.field;
        }
        bonds.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        WindowTerms { bonds, fields }
    }
}

/// `O = exp(-β G_new / 2) exp(β G_prev / 2)` on one window, by sector.
#[derive(Clone, Debug)]
pub struct TransferOperator {
    pub key: BondConfigurationKey,
    pub beta: f64,
    pub blocks: Vec<DMatrix<f64>>,
    blocks_t: Vec<DMatrix<f64>>,
}

fn sym_exp(m: DMatrix<f64>, c: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    let arg_max = eig
        .eigenvalues
        .iter()
        .map(|&e| c * e)
        .fold(f64::NEG_INFINITY, f64::max);
    if arg_max > 700.0 {
        return Err(Error::Range(format!("exponent {arg_max:.1} overflows")));
    }
    let v = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
        v[(i, j)] * (c * eig.eigenvalues[j]).exp()
    });
    Ok(scaled * v.transpose())
}

impl TransferOperator {
    pub fn identity(layout: &SectorLayout) -> Self {
        let blocks: Vec<DMatrix<f64>> = layout
            .states
            .iter()
            .map(|s| DMatrix::identity(s.len(), s.len()))
            .collect();
        Self {
            key: Vec::new(),
            beta: 0.0,
            blocks_t: blocks.clone(),
            blocks,
        }
    }

    /// Build from the window Hamiltonian before (`prev`) and after (`new`)
    /// adding the perturbation `A = new - prev`.
    pub fn build(
        layout: &SectorLayout,
        prev: &LocalHamiltonian,
        new: &LocalHamiltonian,
        beta: f64,
    ) -> Result<Self> {
        if prev.n_sites() != layout.n_sites || new.n_sites() != layout.n_sites {
            return Err(arg("window Hamiltonians must match the layout"));
        }
        let p = ChainIndex::new(prev).window(0, layout.n_sites, usize::MAX);
        let n = ChainIndex::new(new).window(0, layout.n_sites, usize::MAX);
        Self::from_terms(layout, &p, &n, beta)
    }

    fn from_terms(
        layout: &SectorLayout,
        prev: &WindowTerms,
        new: &WindowTerms,
        beta: f64,
    ) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(arg(format!("β must be non-negative, got {beta}")));
        }
        let mut blocks = Vec::with_capacity(layout.n_sites + 1);
        for k in 0..=layout.n_sites {
            let a = sym_exp(new.sector_matrix(layout, k), -0.5 * beta)?;
            let b = sym_exp(prev.sector_matrix(layout, k), 0.5 * beta)?;
            blocks.push(a * b);
        }
        let mut key = prev.key();
        key.push(u64::MAX);
        key.extend(new.key());
        Ok(Self {
            key,
            beta,
            blocks_t: blocks.iter().map(|b| b.transpose()).collect(),
            blocks,
        })
    }

    pub fn to_dense(&self, layout: &SectorLayout) -> DMatrix<f64> {
        blocks_to_dense(layout, &self.blocks)
    }
}

fn blocks_to_dense(layout: &SectorLayout, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = 1 << layout.n_sites;
    let mut m = DMatrix::zeros(d, d);
    for (k, states) in layout.states.iter().enumerate() {
        for (i, &a) in states.iter().enumerate() {
            for (j, &b) in states.iter().enumerate() {
                m[(a as usize, b as usize)] = blocks[k][(i, j)];
            }
        }
    }
    m
}

/// Normalized window density matrix with the stripped log normalizations.
#[derive(Clone, Debug)]
pub struct WindowDensityMatrix {
    pub l0: usize,
    pub blocks: Vec<DMatrix<f64>>,
    pub log_weight: f64,
}

impl WindowDensityMatrix {
    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.nrows() > 0)
            .map(|b| SymmetricEigen::new(b.clone()).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_dense(&self, layout: &SectorLayout) -> DMatrix<f64> {
        blocks_to_dense(layout, &self.blocks)
    }

    fn normalize(&mut self, site: usize) -> Result<()> {
        let tr = self.trace();
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::Breakdown {
                site,
                reason: format!("window trace {tr} is not positive"),
            });
        }
        for b in &mut self.blocks {
            *b /= tr;
        }
        self.log_weight += tr.ln();
        Ok(())
    }

    fn check_positive(&self, site: usize, full: bool) -> Result<()> {
        let scale = self
            .blocks
            .iter()
            .flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let tol = -1e-10 * scale.max(f64::MIN_POSITIVE);
        let worst = if full {
            self.min_eigenvalue()
        } else {
            self.blocks
                .iter()
                .flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())
                .fold(f64::INFINITY, f64::min)
        };
        if worst < tol {
            return Err(Error::Breakdown {
                site,
                reason: format!("density matrix eigenvalue {worst:.3e} below zero; window too short for this β"),
            });
        }
        Ok(())
    }

    /// Trace out the first window site and append a fresh one with identity.
    fn shift(&mut self, layout: &SectorLayout) {
        let top = layout.n_sites - 1;
        let mut out: Vec<DMatrix<f64>> = layout
            .states
            .iter()
            .map(|s| DMatrix::zeros(s.len(), s.len()))
            .collect();
        for (k, states) in layout.states.iter().enumerate() {
            for (i, &a) in states.iter().enumerate() {
                for (j, &b) in states.iter().enumerate() {
                    if a >> top != b >> top {
                        continue;
                    }
                    let mask = (1u32 << top) - 1;
                    let (al, bl) = ((a & mask) << 1, (b & mask) << 1);
                    let mut v = 0.0;
                    for x in 0..2u32 {
                        let (oa, ob) = (al | x, bl | x);
                        let ko = oa.count_ones() as usize;
                        v += self.blocks[ko][(layout.pos(oa), layout.pos(ob))];
                    }
                    out[k][(i, j)] = v;
                }
            }
        }
        self.blocks = out;
    }

    fn conjugate(&mut self, op: &TransferOperator) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            if b.nrows() == 0 {
                continue;
            }
            let tmp = &op.blocks[k] * &*b;
            *b = tmp * &op.blocks_t[k];
        }
    }
}

pub type OpTable = HashMap<BondConfigurationKey, Arc<TransferOperator>>;

fn effective_window(n: usize, l0: usize) -> usize {
    l0.min(n).max(1)
}

/// Window terms `(prev, new)` for every step, the last entry being the tail.
fn step_windows(h: &LocalHamiltonian, l0: usize) -> Vec<(WindowTerms, WindowTerms)> {
    let idx = ChainIndex::new(h);
    let n = h.n_sites();
    let w = effective_window(n, l0);
    let mut out = Vec::with_capacity(n - w + 1);
    for s in w..n {
        let w0 = s + 1 - w;
        out.push((idx.window(w0, w, s - 1), idx.window(w0, w, s)));
    }
    out.push((idx.window(n - w, w, n - 1), idx.window(n - w, w, n)));
    out
}

fn step_key(prev: &WindowTerms, new: &WindowTerms) -> BondConfigurationKey {
    let mut key = prev.key();
    key.push(u64::MAX);
    key.extend(new.key());
    key
}

/// Distinct window signatures reached by the interior steps of `h`.
pub fn window_keys(h: &LocalHamiltonian, l0: usize) -> Vec<BondConfigurationKey> {
    let steps = step_windows(h, l0);
    let mut keys: Vec<BondConfigurationKey> = steps[..steps.len() - 1]
        .iter()
        .map(|(p, n)| step_key(p, n))
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

/// One operator per distinct window signature over all the given chains.
pub fn precompute_ops(hs: &[&LocalHamiltonian], l0: usize, beta: f64) -> Result<OpTable> {
    let mut todo: HashMap<BondConfigurationKey, (WindowTerms, WindowTerms, usize)> = HashMap::new();
    for h in hs {
        let w = effective_window(h.n_sites(), l0);
        for (p, n) in step_windows(h, l0) {
            todo.entry(step_key(&p, &n)).or_insert((p, n, w));
        }
    }
    let mut layouts: HashMap<usize, SectorLayout> = HashMap::new();
    for (_, _, w) in todo.values() {
        layouts.entry(*w).or_insert_with(|| SectorLayout::new(*w));
    }
    let built: Vec<Result<(BondConfigurationKey, Arc<TransferOperator>)>> = todo
        .into_par_iter()
        .map(|(key, (p, n, w))| {
            let op = TransferOperator::from_terms(&layouts[&w], &p, &n, beta)?;
            Ok((key, Arc::new(op)))
        })
        .collect();
    built.into_iter().collect()
}

/// Exact normalized Gibbs state of the first window, last term group at half weight.
fn initial_state(h: &LocalHamiltonian, layout: &SectorLayout, beta: f64) -> Result<WindowDensityMatrix> {
    let w = layout.n_sites;
    let terms = ChainIndex::new(h).window(0, w, w - 1);
    let mut blocks = Vec::with_capacity(w + 1);
    let mut e_min = f64::INFINITY;
    let mut eigs = Vec::with_capacity(w + 1);
    for k in 0..=w {
        let eig = SymmetricEigen::new(terms.sector_matrix(layout, k));
        e_min = e_min.min(eig.eigenvalues.min());
        eigs.push(eig);
    }
    for eig in eigs {
        let v = &eig.eigenvectors;
        let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
            v[(i, j)] * (-beta * (eig.eigenvalues[j] - e_min)).exp()
        });
        blocks.push(scaled * v.transpose());
    }
    let mut rho = WindowDensityMatrix {
        l0: w,
        blocks,
        log_weight: -beta * e_min,
    };
    rho.normalize(w - 1)?;
    Ok(rho)
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub ln_z: f64,
    /// Final normalized window state, covering the last sites of the chain.
    pub rho: WindowDensityMatrix,
    pub layout: SectorLayout,
}

/// Sweep the chain and return `ln Z`. Missing operators are built on demand.
pub fn sweep(h: &LocalHamiltonian, cfg: &QbpConfig, ops: &OpTable) -> Result<SweepResult> {
    cfg.validate()?;
    let n = h.n_sites();
    if n == 0 {
        return Err(arg("empty chain"));
    }
    let w = effective_window(n, cfg.l0);
    let layout = SectorLayout::new(w);
    let mut rho = initial_state(h, &layout, cfg.beta)?;
    rho.check_positive(w - 1, true)?;
    let steps = step_windows(h, cfg.l0);
    let last = steps.len() - 1;
    for (i, (p, nw)) in steps.iter().enumerate() {
        let site = w + i;
        let key = step_key(p, nw);
        let op = match ops.get(&key) {
            Some(op) => op.clone(),
            None => Arc::new(TransferOperator::from_terms(&layout, p, nw, cfg.beta)?),
        };
        if i < last {
            rho.shift(&layout);
        }
        rho.conjugate(&op);
        rho.normalize(site.min(n - 1))?;
        let full = cfg.check_every > 0 && (i % cfg.check_every == 0 || i == last);
        rho.check_positive(site.min(n - 1), full)?;
    }
    Ok(SweepResult {
        ln_z: rho.log_weight,
        rho,
        layout,
    })
}

/// `ln Z` with operators built for this chain alone.
pub fn ln_partition(h: &LocalHamiltonian, cfg: &QbpConfig) -> Result<f64> {
    cfg.validate()?;
    let ops = precompute_ops(&[h], cfg.l0, cfg.beta)?;
    Ok(sweep(h, cfg, &ops)?.ln_z)
}

/// A finite-difference observable with its cancellation flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivative {
    pub value: f64,
    /// The second difference fell below `1e3 ε |ln Z|`.
    pub cancellation: bool,
}

fn second_difference(lm: f64, l0: f64, lp: f64) -> (f64, bool) {
    let d2 = lp - 2.0 * l0 + lm;
    let flag = d2.abs() < 1e3 * f64::EPSILON * l0.abs();
    (d2, flag)
}

fn ln_z_many(hs: &[LocalHamiltonian], l0: usize, beta: f64) -> Result<Vec<f64>> {
    let refs: Vec<&LocalHamiltonian> = hs.iter().collect();
    let ops = precompute_ops(&refs, l0, beta)?;
    let cfg = QbpConfig::new(l0, beta);
    hs.par_iter()
        .map(|h| sweep(h, &cfg, &ops).map(|r| r.ln_z))
        .collect()
}

/// `χ = β⁻¹ ∂²_h ln Z / N` for the Zeeman term `-h Σ S^z`.
pub fn uniform_susceptibility(h: &LocalHamiltonian, l0: usize, beta: f64, h_step: f64) -> Result<Derivative> {
    if !(h_step > 0.0) {
        return Err(arg("field step must be positive"));
    }
    if beta == 0.0 {
        return Ok(Derivative { value: 0.0, cancellation: false });
    }
    let f = h.field();
    let hs = [
        h.clone().with_field(f - h_step),
        h.clone(),
        h.clone().with_field(f + h_step),
    ];
    let l = ln_z_many(&hs, l0, beta)?;
    let (d2, cancellation) = second_difference(l[0], l[1], l[2]);
    Ok(Derivative {
        value: d2 / (h_step * h_step * beta * h.n_sites() as f64),
        cancellation,
    })
}

/// `C = β² ∂²_β ln Z / N` by central differences of step `min(β_step, β)`.
pub fn specific_heat(h: &LocalHamiltonian, l0: usize, beta: f64, beta_step: f64) -> Result<Derivative> {
    if !(beta_step > 0.0) {
        return Err(arg("β step must be positive"));
    }
    if beta == 0.0 {
        return Ok(Derivative { value: 0.0, cancellation: false });
    }
    let d = beta_step.min(beta);
    let l: Vec<f64> = [beta - d, beta, beta + d]
        .par_iter()
        .map(|&b| ln_partition(h, &QbpConfig::new(l0, b)))
        .collect::<Result<_>>()?;
    Ok(specific_heat_from(l[0], l[1], l[2], beta, d, h.n_sites()))
}

/// `C` from `ln Z` at `β - d`, `β`, `β + d`.
pub fn specific_heat_from(lm: f64, l0: f64, lp: f64, beta: f64, d: f64, n: usize) -> Derivative {
    let (d2, cancellation) = second_difference(lm, l0, lp);
    Derivative {
        value: beta * beta * d2 / (d * d * n as f64),
        cancellation,
    }
}

/// `χ_dimer / β = β⁻² ∂²_λ ln Z / N` for `λ Σ (-1)^i S_i·S_{i+1}`.
pub fn dimer_susceptibility(h: &LocalHamiltonian, l0: usize, beta: f64, lambda_step: f64) -> Result<Derivative> {
    if !(lambda_step > 0.0) {
        return Err(arg("λ step must be positive"));
    }
    if beta == 0.0 {
        // each nearest bond contributes tr((S·S)²)/4 = 3/16, cross terms vanish
        let n = h.n_sites();
        return Ok(Derivative {
            value: 3.0 / 16.0 * n.saturating_sub(1) as f64 / n as f64,
            cancellation: false,
        });
    }
    let hs = [
        h.clone().with_dimer_field(-lambda_step),
        h.clone(),
        h.clone().with_dimer_field(lambda_step),
    ];
    let l = ln_z_many(&hs, l0, beta)?;
    let (d2, cancellation) = second_difference(l[0], l[1], l[2]);
    Ok(Derivative {
        value: d2 / (lambda_step * lambda_step * beta * beta * h.n_sites() as f64),
        cancellation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThermoRow {
    pub beta: f64,
    pub observable: String,
    pub value: f64,
    pub l0: usize,
    pub model: String,
    pub tag: String,
}

/// CSV with columns `beta,T,observable,value,l0,model,tag`.
pub fn thermo_csv(rows: &[ThermoRow]) -> String {
    let mut s = String::from("beta,T,observable,value,l0,model,tag\n");
    for r in rows {
        let t = if r.beta > 0.0 { 1.0 / r.beta } else { f64::INFINITY };
        s.push_str(&format!(
            "{},{},{},{:.12e},{},{},{}\n",
            r.beta, t, r.observable, r.value, r.l0, r.model, r.tag
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::Basis;
    use crate::models::{
        assemble_sparse, build_faf, build_frustrated, build_xxz, frustrated_from_couplings, Frustration,
    };
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_real(h: &LocalHamiltonian) -> DMatrix<f64> {
        assemble_sparse(h, &Basis::full(h.n_sites())).unwrap().to_dense().map(|z| z.re)
    }

    /// Per-sector spectrum with each eigenvalue's total `S^z`.
    fn spectrum(h: &LocalHamiltonian) -> Vec<(f64, f64)> {
        let n = h.n_sites();
        let mut out = Vec::new();
        for k in 0..=n {
            let m = assemble_sparse(h, &Basis::sector(n, k).unwrap()).unwrap().to_dense().map(|z| z.re);
            let sz = k as f64 - n as f64 / 2.0;
            out.extend(SymmetricEigen::new(m).eigenvalues.iter().map(|&e| (e, sz)));
        }
        out
    }

    fn dense_ln_z(h: &LocalHamiltonian, beta: f64) -> f64 {
        let sp = spectrum(h);
        let e0 = sp.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        -beta * e0 + sp.iter().map(|p| (-beta * (p.0 - e0)).exp()).sum::<f64>().ln()
    }

    /// Thermal variance of `f(E, S^z)` per site.
    fn dense_variance(h: &LocalHamiltonian, beta: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        let sp = spectrum(h);
        let e0 = sp.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = sp.iter().map(|p| (-beta * (p.0 - e0)).exp()).collect();
        let z: f64 = w.iter().sum();
        let m1: f64 = sp.iter().zip(&w).map(|(p, w)| w * f(p.0, p.1)).sum::<f64>() / z;
        let m2: f64 = sp.iter().zip(&w).map(|(p, w)| w * f(p.0, p.1).powi(2)).sum::<f64>() / z;
        (m2 - m1 * m1) / h.n_sites() as f64
    }

    fn ising(n: usize, j: f64) -> LocalHamiltonian {
        let terms = (0..n - 1).map(|i| BondTerm::xxz(i, i + 1, 0.0, j)).collect();
        LocalHamiltonian::new(n, terms).unwrap()
    }

    /// 2×2 transfer matrix for `Σ J s_i s_{i+1} - h Σ s_i`, `s = ±1/2`.
    fn ising_transfer_ln_z(n: usize, j: f64, h: f64, beta: f64) -> f64 {
        let s = [0.5, -0.5];
        let t = nalgebra::Matrix2::from_fn(|a, b| {
            (-beta * (j * s[a] * s[b] - 0.5 * h * (s[a] + s[b]))).exp()
        });
        let mut v = nalgebra::Vector2::from_fn(|a, _| (0.5 * beta * h * s[a]).exp());
        let mut log = 0.0;
        for _ in 0..n - 1 {
            v = t * v;
            let norm = v.sum();
            log += norm.ln();
            v /= norm;
        }
        let end = nalgebra::Vector2::from_fn(|a, _| (0.5 * beta * h * s[a]).exp());
        log + end.dot(&v).ln()
    }

    #[test]
    fn transfer_operator_trivial_cases() {
        let layout = SectorLayout::new(5);
        let h = build_xxz(5, 1.0).unwrap();
        let op = TransferOperator::build(&layout, &h, &h, 3.0).unwrap();
        let id = DMatrix::<f64>::identity(32, 32);
        assert!((op.to_dense(&layout) - &id).abs().max() < 1e-12);
        let g = build_xxz(5, 0.3).unwrap();
        let op = TransferOperator::build(&layout, &g, &h, 0.0).unwrap();
        assert!((op.to_dense(&layout) - &id).abs().max() < 1e-14);
        assert!(TransferOperator::build(&layout, &g, &h, -1.0).is_err());
        assert!(matches!(
            TransferOperator::build(&layout, &g, &h.clone().with_field(1e4), 1.0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn transfer_identity_exact_for_window() {
        // O exp(-βG) Oᵀ = exp(-β(G+A))
        let layout = SectorLayout::new(5);
        let g = build_xxz(5, 0.7).unwrap();
        let mut terms = g.terms().to_vec();
        terms.push(BondTerm::heisenberg(2, 4, 0.4));
        let gn = LocalHamiltonian::new(5, terms).unwrap();
        let beta = 1.7;
        let o = TransferOperator::build(&layout, &g, &gn, beta).unwrap().to_dense(&layout);
        let lhs = &o * crate::dense::symmetric_expm(&dense_real(&g), -beta) * o.transpose();
        let rhs = crate::dense::symmetric_expm(&dense_real(&gn), -beta);
        assert!((lhs - rhs).abs().max() < 1e-10);
    }

    #[test]
    fn key_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let faf = build_faf(400, 1.0, -2.0, 2.0, 0.5, &mut rng).unwrap();
        assert_eq!(window_keys(&faf, 5).len(), 2 * 4);
        assert_eq!(window_keys(&faf, 7).len(), 2 * 8);
        let fr = build_frustrated(2000, Frustration::Disordered { choices: [0.9, 1.1] }, &mut rng).unwrap();
        assert_eq!(window_keys(&fr, 5).len(), 16);
        let pure = build_frustrated(300, Frustration::Pure, &mut rng).unwrap();
        assert_eq!(window_keys(&pure, 7).len(), 1);
    }

    #[test]
    fn infinite_temperature() {
        let h = build_xxz(40, 1.0).unwrap();
        let l = ln_partition(&h, &QbpConfig::new(5, 0.0)).unwrap();
        assert!((l - 40.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn ising_chain_matches_transfer_matrix() {
        for beta in [0.5, 2.0, 8.0] {
            let h = ising(1000, 1.0).with_field(0.3);
            let l = ln_partition(&h, &QbpConfig::new(5, beta)).unwrap();
            let r = ising_transfer_ln_z(1000, 1.0, 0.3, beta);
            assert!((l - r).abs() < 1e-10 * r.abs().max(1.0), "{beta}: {l} {r}");
        }
    }

    #[test]
    fn whole_chain_window_is_gibbs() {
        let h = build_xxz(7, 1.0).unwrap();
        let beta = 2.0;
        let r = sweep(&h, &QbpConfig::new(7, beta), &OpTable::new()).unwrap();
        let rho = r.rho.to_dense(&r.layout);
        let gibbs = crate::dense::symmetric_expm(&dense_real(&h), -beta);
        let gibbs = &gibbs / gibbs.trace();
        let diff = SymmetricEigen::new(rho - gibbs).eigenvalues;
        let td = 0.5 * diff.iter().map(|x| x.abs()).sum::<f64>();
        assert!(td < 1e-10, "{td}");
        assert!((r.ln_z - dense_ln_z(&h, beta)).abs() < 1e-10);
    }

    #[test]
    fn nearly_covering_window() {
        // window one site short of the chain: one approximate step
        let h = build_xxz(10, 1.0).unwrap();
        let l = ln_partition(&h, &QbpConfig::new(9, 1.0)).unwrap();
        let exact = dense_ln_z(&h, 1.0);
        assert!((l - exact).abs() < 1e-4, "{}", l - exact);
    }

    /// `1 ⊗ m ⊗ 1` with `m` on sites `[lo, lo + w)` of `n`.
    fn embed(m: &DMatrix<f64>, lo: usize, n: usize) -> DMatrix<f64> {
        let w = (m.nrows() as f64).log2() as usize;
        let d = 1 << n;
        let low = (1 << lo) - 1;
        DMatrix::from_fn(d, d, |r, c| {
            let (rl, cl) = (r & low, c & low);
            let (rh, ch) = (r >> (lo + w), c >> (lo + w));
            if rl != cl || rh != ch {
                0.0
            } else {
                m[((r >> lo) & ((1 << w) - 1), (c >> lo) & ((1 << w) - 1))]
            }
        })
    }

    #[test]
    fn multi_step_sweep_matches_dense_product() {
        // Z = tr(O_3 O_2 O_1 (ρ0 ⊗ 1 ⊗ 1) O_1ᵀ O_2ᵀ O_3ᵀ) built on all 7 sites
        let h = frustrated_from_couplings(7, &[1.0, 0.8, 1.2, 0.9, 1.1, 0.7]).unwrap();
        let (n, w, beta) = (7, 5, 1.3);
        let layout = SectorLayout::new(w);
        let weighted = |w0: usize, top: usize| {
            let t = ChainIndex::new(&h).window(w0, w, top);
            let terms = t.bonds.iter().map(|&(a, b, jxy, jz)| BondTerm::xxz(a, b, jxy, jz)).collect();
            LocalHamiltonian::new(w, terms).unwrap()
        };
        let g0 = dense_real(&weighted(0, 4));
        let mut rho = embed(&crate::dense::symmetric_expm(&g0, -beta), 0, n);
        for (w0, top) in [(1, 5), (2, 6), (2, 7)] {
            let op = TransferOperator::build(&layout, &weighted(w0, top - 1), &weighted(w0, top), beta).unwrap();
            let o = embed(&op.to_dense(&layout), w0, n);
            rho = &o * rho * o.transpose();
        }
        let l = ln_partition(&h, &QbpConfig::new(w, beta)).unwrap();
        assert!((l - rho.trace().ln()).abs() < 1e-11, "{l} {}", rho.trace().ln());
    }

    #[test]
    fn free_spin_curie_law() {
        let h = LocalHamiltonian::empty(1);
        for beta in [0.5, 2.0] {
            let chi = uniform_susceptibility(&h, 5, beta, 1e-3).unwrap();
            assert!((chi.value - beta / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn susceptibility_and_heat_match_dense() {
        let h = build_xxz(8, 1.0).unwrap();
        for beta in [1.0, 2.5, 4.0] {
            let chi = uniform_susceptibility(&h, 9, beta, 1e-3).unwrap().value;
            let exact = beta * dense_variance(&h, beta, |_, sz| sz);
            assert!(((chi - exact) / exact).abs() < 1e-6, "{beta}: {chi} {exact}");
            let c = specific_heat(&h, 9, beta, 0.25).unwrap().value;
            let exact = beta * beta * dense_variance(&h, beta, |e, _| e);
            assert!(((c - exact) / exact).abs() < 0.02, "{beta}: {c} {exact}");
        }
        assert_eq!(specific_heat(&h, 9, 0.0, 0.25).unwrap().value, 0.0);
        assert!(specific_heat(&h, 9, 0.01, 0.25).unwrap().value < 1e-3);
    }

    #[test]
    fn dimer_susceptibility_high_temperature() {
        let h = frustrated_from_couplings(6, &[1.0; 5]).unwrap();
        // infinite-temperature variance of D over all 64 states
        let d = LocalHamiltonian::empty(6).with_dimer_field(1.0);
        let m = dense_real(&d);
        let var = ((&m * &m).trace() / 64.0 - (m.trace() / 64.0).powi(2)) / 6.0;
        let limit = dimer_susceptibility(&h, 7, 0.0, 1e-3).unwrap().value;
        assert!((limit - var).abs() < 1e-8, "{limit} {var}");
        let small = dimer_susceptibility(&h, 7, 0.05, 1e-3).unwrap().value;
        assert!((small - var).abs() < 0.05 * var, "{small} {var}");
    }

    #[test]
    fn dimer_susceptibility_matches_dense() {
        let h = frustrated_from_couplings(6, &[1.0; 5]).unwrap();
        let beta = 1.5;
        let got = dimer_susceptibility(&h, 7, beta, 1e-3).unwrap().value;
        let ln = |l: f64| dense_ln_z(&h.clone().with_dimer_field(l), beta);
        let s = 1e-3;
        let exact = (ln(s) - 2.0 * ln(0.0) + ln(-s)) / (s * s * beta * beta * 6.0);
        assert!((got - exact).abs() < 1e-6 * exact.abs().max(1.0), "{got} {exact}");
    }

    #[test]
    fn positivity_maintained() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = build_frustrated(120, Frustration::Disordered { choices: [0.9, 1.1] }, &mut rng).unwrap();
        let mut cfg = QbpConfig::new(5, 3.0);
        cfg.check_every = 1;
        let r = sweep(&h, &cfg, &OpTable::new()).unwrap();
        assert!((r.rho.trace() - 1.0).abs() < 1e-12);
        assert!(r.rho.min_eigenvalue() > -1e-10);
    }

    #[test]
    fn extensive_ln_z() {
        let mut prev = None;
        for n in [100, 200, 400] {
            let h = build_xxz(n, 1.0).unwrap();
            let a = ln_partition(&h, &QbpConfig::new(5, 1.0)).unwrap();
            let h2 = build_xxz(2 * n, 1.0).unwrap();
            let b = ln_partition(&h2, &QbpConfig::new(5, 1.0)).unwrap();
            let boundary = b / 2.0 - a;
            if let Some(p) = prev {
                assert!((boundary - p as f64).abs() < 1e-8, "{boundary} {p}");
            }
            prev = Some(boundary);
        }
    }

    #[test]
    fn disorder_determinism() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            build_faf(200, 1.0, -2.0, 2.0, 0.4, &mut rng).unwrap()
        };
        let cfg = QbpConfig::new(5, 2.0);
        let a = ln_partition(&make(), &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| ln_partition(&make(), &cfg).unwrap());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn argument_errors() {
        let h = build_xxz(10, 1.0).unwrap();
        assert!(ln_partition(&h, &QbpConfig::new(4, 1.0)).is_err());
        assert!(ln_partition(&h, &QbpConfig::new(5, -1.0)).is_err());
        assert!(uniform_susceptibility(&h, 5, 1.0, 0.0).is_err());
    }

    #[test]
    fn csv_columns() {
        let rows = vec![ThermoRow {
            beta: 2.0,
            observable: "chi".into(),
            value: 0.1,
            l0: 7,
            model: "faf".into(),
            tag: "p=0".into(),
        }];
        let s = thermo_csv(&rows);
        assert!(s.starts_with("beta,T,observable,value,l0,model,tag\n2,0.5,chi,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn commuting_chains_exact(j in proptest::collection::vec(-2.0f64..2.0, 11), beta in 0.1f64..6.0) {
            let terms = j.iter().enumerate().map(|(i, &c)| BondTerm::xxz(i, i + 1, 0.0, c)).collect();
            let h = LocalHamiltonian::new(12, terms).unwrap();
            let l = ln_partition(&h, &QbpConfig::new(3, beta)).unwrap();
            let exact = dense_ln_z(&h, beta);
            prop_assert!((l - exact).abs() < 1e-10 * exact.abs().max(1.0));
        }
    }
}
