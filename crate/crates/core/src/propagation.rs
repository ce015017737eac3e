//! Real-time evolution `exp(-iHt)ψ` by short-step Taylor series or Lanczos.

use nalgebra::{DMatrix, DVector};

use crate::error::{arg, Error, Result};
use crate::hilbert::{inner, norm, StateVector};
use crate::models::SparseMatrix;
use crate::C64;

/// Anything that can apply a Hermitian operator to a vector.
pub trait Operator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64], y: &mut [C64]);
}

impl Operator for SparseMatrix {
    fn dim(&self) -> usize {
        SparseMatrix::dim(self)
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.matvec(x, y)
    }
}

impl Operator for DMatrix<C64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        crate::dense::mat_vec(self, x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SeriesOrder {
    Fixed(usize),
    /// Add terms until one falls below the tail tolerance, up to a cap.
    Adaptive { max_order: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Taylor,
    Krylov,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagatorConfig {
    pub t0: f64,
    pub series_order: SeriesOrder,
    pub tail_tol: f64,
    pub krylov_dim: usize,
    pub method: Method,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self {
            t0: 1.0,
            series_order: SeriesOrder::Fixed(40),
            tail_tol: 1e-13,
            krylov_dim: 30,
            method: Method::Taylor,
        }
    }
}

impl PropagatorConfig {
    pub fn adaptive() -> Self {
        Self {
            series_order: SeriesOrder::Adaptive { max_order: 200 },
            ..Self::default()
        }
    }

    pub fn krylov() -> Self {
        Self {
            method: Method::Krylov,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(arg(format!("t0 must be positive, got {}", self.t0)));
        }
        let order = match self.series_order {
            SeriesOrder::Fixed(k) => k,
            SeriesOrder::Adaptive { max_order } => max_order,
        };
        if order < 1 {
            return Err(arg("series order must be at least 1"));
        }
        if self.krylov_dim < 2 {
            return Err(arg("krylov dimension must be at least 2"));
        }
        if !(self.tail_tol > 0.0) {
            return Err(arg("tail tolerance must be positive"));
        }
        Ok(())
    }
}

/// Diagnostics from one evolution.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvolveReport {
    pub substeps: usize,
    /// Largest final-term norm seen (Taylor) or residual estimate (Krylov).
    pub max_tail: f64,
    pub max_order: usize,
    /// Relative change of the norm before any correction.
    pub norm_drift: f64,
    pub renormalized: bool,
}

/// Reusable scratch space for in-place evolution.
#[derive(Default)]
pub struct Workspace {
    term: Vec<C64>,
    next: Vec<C64>,
    basis: Vec<Vec<C64>>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, dim: usize) {
        if self.term.len() != dim {
            self.term = vec![C64::new(0.0, 0.0); dim];
            self.next = vec![C64::new(0.0, 0.0); dim];
            self.basis.clear();
        }
    }
}

fn substeps(t: f64, t0: f64) -> (usize, f64) {
    if t == 0.0 {
        return (0, 0.0);
    }
    let n = (t.abs() / t0 - 1e-12).ceil().max(1.0) as usize;
    (n, t / n as f64)
}

fn finish_norm(psi: &mut [C64], before: f64, tol: f64, report: &mut EvolveReport) {
    let after = norm(psi);
    if before == 0.0 {
        return;
    }
    report.norm_drift = (after - before).abs() / before;
    if report.norm_drift > tol {
        let s = before / after;
        psi.iter_mut().for_each(|x| *x *= s);
        report.renormalized = true;
    }
}

/// One substep of `exp(-iHτ)` by Taylor series, in place.
fn taylor_step<H: Operator + ?Sized>(
    h: &H,
    psi: &mut [C64],
    tau: f64,
    cfg: &PropagatorConfig,
    ws: &mut Workspace,
) -> Result<(f64, usize)> {
    let scale = norm(psi).max(f64::MIN_POSITIVE);
    ws.term.copy_from_slice(psi);
    let (limit, adaptive) = match cfg.series_order {
        SeriesOrder::Fixed(k) => (k, false),
        SeriesOrder::Adaptive { max_order } => (max_order, true),
    };
    let mut tail = 0.0;
    for k in 1..=limit {
        h.apply(&ws.term, &mut ws.next);
        let c = C64::new(0.0, -tau / k as f64);
        for (t, n) in ws.term.iter_mut().zip(&ws.next) {
            *t = n * c;
        }
        for (p, t) in psi.iter_mut().zip(&ws.term) {
            *p += t;
        }
        tail = norm(&ws.term) / scale;
        if adaptive && tail < cfg.tail_tol {
            return Ok((tail, k));
        }
    }
    if tail > cfg.tail_tol {
        return Err(Error::Precision {
            tail,
            tol: cfg.tail_tol,
            order: limit,
        });
    }
    Ok((tail, limit))
}

/// `exp(-iHt)ψ` by truncated Taylor series over substeps of length at most `t0`.
pub fn taylor_in_place<H: Operator + ?Sized>(
    h: &H,
    psi: &mut [C64],
    t: f64,
    cfg: &PropagatorConfig,
    ws: &mut Workspace,
) -> Result<EvolveReport> {
    cfg.validate()?;
    check_dim(h.dim(), psi.len())?;
    ws.ensure(psi.len());
    let before = norm(psi);
    let (n, tau) = substeps(t, cfg.t0);
    let mut report = EvolveReport {
        substeps: n,
        ..Default::default()
    };
    for _ in 0..n {
        let (tail, order) = taylor_step(h, psi, tau, cfg, ws)?;
        report.max_tail = report.max_tail.max(tail);
        report.max_order = report.max_order.max(order);
    }
    finish_norm(psi, before, cfg.tail_tol, &mut report);
    Ok(report)
}

/// One Lanczos substep; returns the residual estimate.
fn krylov_step<H: Operator + ?Sized>(
    h: &H,
    psi: &mut [C64],
    tau: f64,
    m_max: usize,
    ws: &mut Workspace,
) -> f64 {
    let beta0 = norm(psi);
    if beta0 == 0.0 {
        return 0.0;
    }
    let dim = psi.len();
    let m_max = m_max.min(dim);
    ws.basis.clear();
    ws.basis.push(psi.iter().map(|x| x / beta0).collect());
    let mut alpha = Vec::with_capacity(m_max);
    let mut beta: Vec<f64> = Vec::with_capacity(m_max);
    let mut w = vec![C64::new(0.0, 0.0); dim];
    let mut residual = 0.0;
    for j in 0..m_max {
        h.apply(&ws.basis[j], &mut w);
        let a = inner(&ws.basis[j], &w).re;
        alpha.push(a);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for v in &ws.basis {
                let c = inner(v, &w);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        let b = norm(&w);
        if j + 1 == m_max {
            residual = b;
            break;
        }
        if b < 1e-14 {
            break;
        }
        beta.push(b);
        ws.basis.push(w.iter().map(|x| x / b).collect());
    }
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = t.symmetric_eigen();
    // c = exp(-iTτ) e_0
    let mut coef = DVector::<C64>::zeros(m);
    for k in 0..m {
        let phase = C64::new(0.0, -tau * eig.eigenvalues[k]).exp() * eig.eigenvectors[(0, k)];
        for i in 0..m {
            coef[i] += eig.eigenvectors[(i, k)] * phase;
        }
    }
    psi.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
    for (v, c) in ws.basis.iter().zip(coef.iter()) {
        let c = c * beta0;
        for (p, vi) in psi.iter_mut().zip(v) {
            *p += c * vi;
        }
    }
    residual * tau.abs() * coef[m - 1].norm()
}

/// `exp(-iHt)ψ` by restarted Lanczos over substeps of length at most `t0`.
pub fn krylov_in_place<H: Operator + ?Sized>(
    h: &H,
    psi: &mut [C64],
    t: f64,
    cfg: &PropagatorConfig,
    ws: &mut Workspace,
) -> Result<EvolveReport> {
    cfg.validate()?;
    check_dim(h.dim(), psi.len())?;
    ws.ensure(psi.len());
    let before = norm(psi);
    let (n, tau) = substeps(t, cfg.t0);
    let mut report = EvolveReport {
        substeps: n,
        max_order: cfg.krylov_dim,
        ..Default::default()
    };
    for _ in 0..n {
        let r = krylov_step(h, psi, tau, cfg.krylov_dim, ws);
        report.max_tail = report.max_tail.max(r);
    }
    finish_norm(psi, before, cfg.tail_tol, &mut report);
    Ok(report)
}

/// Dispatch on `cfg.method`.
pub fn evolve_in_place<H: Operator + ?Sized>(
    h: &H,
    psi: &mut [C64],
    t: f64,
    cfg: &PropagatorConfig,
    ws: &mut Workspace,
) -> Result<EvolveReport> {
    match cfg.method {
        Method::Taylor => taylor_in_place(h, psi, t, cfg, ws),
        Method::Krylov => krylov_in_place(h, psi, t, cfg, ws),
    }
}

fn check_dim(h: usize, v: usize) -> Result<()> {
    if h != v {
        return Err(arg(format!(
            "operator dimension {h} does not match state length {v}"
        )));
    }
    Ok(())
}

pub fn evolve_taylor(
    hs: &SparseMatrix,
    psi: &StateVector,
    t: f64,
    cfg: &PropagatorConfig,
) -> Result<StateVector> {
    let mut out = psi.clone();
    taylor_in_place(hs, out.amps_mut(), t, cfg, &mut Workspace::new())?;
    Ok(out)
}

pub fn evolve_krylov(
    hs: &SparseMatrix,
    psi: &StateVector,
    t: f64,
    cfg: &PropagatorConfig,
) -> Result<StateVector> {
    let mut out = psi.clone();
    krylov_in_place(hs, out.amps_mut(), t, cfg, &mut Workspace::new())?;
    Ok(out)
}

pub fn evolve(
    hs: &SparseMatrix,
    psi: &StateVector,
    t: f64,
    cfg: &PropagatorConfig,
) -> Result<StateVector> {
    match cfg.method {
        Method::Taylor => evolve_taylor(hs, psi, t, cfg),
        Method::Krylov => evolve_krylov(hs, psi, t, cfg),
    }
}

/// `<ψ|H|ψ>` (real part).
pub fn expectation<H: Operator + ?Sized>(h: &H, psi: &[C64]) -> f64 {
    let mut y = vec![C64::new(0.0, 0.0); psi.len()];
    h.apply(psi, &mut y);
    inner(psi, &y).re
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{hermitian_expm, mat_vec};
    use crate::hilbert::{Basis, BasisState};
    use crate::models::{assemble_sparse, build_xxz, LocalHamiltonian};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
    }

    fn sector_problem(n: usize, delta: f64, seed: u64) -> (SparseMatrix, StateVector) {
        let h = build_xxz(n, delta).unwrap();
        let basis = Basis::sector(n, n / 2).unwrap();
        let hs = assemble_sparse(&h, &basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut psi = StateVector::random(basis, &mut rng);
        psi.normalize();
        (hs, psi)
    }

    #[test]
    fn zero_time_is_identity() {
        let (hs, psi) = sector_problem(6, 1.0, 1);
        let out = evolve_taylor(&hs, &psi, 0.0, &PropagatorConfig::default()).unwrap();
        assert_eq!(out.amps(), psi.amps());
        let out = evolve_krylov(&hs, &psi, 0.0, &PropagatorConfig::default()).unwrap();
        assert_eq!(out.amps(), psi.amps());
    }

    #[test]
    fn two_site_flip_flop() {
        let h = build_xxz(2, 0.0).unwrap();
        let basis = Basis::sector(2, 1).unwrap();
        let hs = assemble_sparse(&h, &basis).unwrap();
        // site 0 up, site 1 down
        let psi = StateVector::basis_state(basis, 0b01).unwrap();
        for &t in &[0.3, 1.7, std::f64::consts::PI, 5.2] {
            let out = evolve_taylor(&hs, &psi, t, &PropagatorConfig::default()).unwrap();
            assert!((out.sz(0) - 0.5 * t.cos()).abs() < 1e-12, "t = {t}");
            let out = evolve_krylov(&hs, &psi, t, &PropagatorConfig::krylov()).unwrap();
            assert!((out.sz(0) - 0.5 * t.cos()).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn matches_dense_expm_twelve_sites() {
        let n = 12;
        let h = build_xxz(n, 1.0).unwrap();
        let basis = Basis::full(n);
        let hs = assemble_sparse(&h, &basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut psi = StateVector::random(basis, &mut rng);
        psi.normalize();
        // dense exponential applied block by block over the Sz sectors
        let mut want = vec![C64::new(0.0, 0.0); psi.dim()];
        for n_up in 0..=n {
            let sb = Basis::sector(n, n_up).unwrap();
            let u = hermitian_expm(&assemble_sparse(&h, &sb).unwrap().to_dense(), C64::new(0.0, -3.0));
            let proj: Vec<C64> = (0..sb.dim()).map(|k| psi.amplitude(sb.state(k))).collect();
            let mut out = vec![C64::new(0.0, 0.0); sb.dim()];
            mat_vec(&u, &proj, &mut out);
            for (k, a) in out.into_iter().enumerate() {
                want[sb.state(k) as usize] = a;
            }
        }
        let got = evolve_taylor(&hs, &psi, 3.0, &PropagatorConfig::default()).unwrap();
        assert!(diff(got.amps(), &want) < 1e-9);
        let got = evolve_krylov(&hs, &psi, 3.0, &PropagatorConfig::krylov()).unwrap();
        assert!(diff(got.amps(), &want) < 1e-9);
    }

    #[test]
    fn krylov_eigenvector_gains_phase() {
        let h = build_xxz(8, 0.5).unwrap();
        let basis = Basis::sector(8, 4).unwrap();
        let hs = assemble_sparse(&h, &basis).unwrap();
        let eig = hs.to_dense().symmetric_eigen();
        let v: Vec<C64> = eig.eigenvectors.column(3).iter().copied().collect();
        let psi = StateVector::new(basis, v).unwrap();
        let out = evolve_krylov(&hs, &psi, 2.5, &PropagatorConfig::krylov()).unwrap();
        let fid = psi.inner(&out).unwrap();
        assert!((fid.norm() - 1.0).abs() < 1e-12);
        let phase = C64::new(0.0, -2.5 * eig.eigenvalues[3]).exp();
        assert!((fid - phase).norm() < 1e-10);
    }

    #[test]
    fn krylov_dimension_two_sector_exact() {
        let h = build_xxz(2, 0.7).unwrap();
        let basis = Basis::sector(2, 1).unwrap();
        let hs = assemble_sparse(&h, &basis).unwrap();
        let psi = StateVector::basis_state(basis, 0b10).unwrap();
        let u = hermitian_expm(&hs.to_dense(), C64::new(0.0, -4.0));
        let mut want = vec![C64::new(0.0, 0.0); 2];
        mat_vec(&u, psi.amps(), &mut want);
        for m in [2, 3, 30] {
            let cfg = PropagatorConfig {
                krylov_dim: m,
                ..PropagatorConfig::krylov()
            };
            let got = evolve_krylov(&hs, &psi, 4.0, &cfg).unwrap();
            assert!(diff(got.amps(), &want) < 1e-13);
        }
    }

    #[test]
    fn krylov_agrees_with_taylor_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let n = rng.random_range(4..=14usize);
            let delta = rng.random_range(-1.5..2.5);
            let t = rng.random_range(0.0..5.0);
            let (hs, psi) = sector_problem(n, delta, rng.random());
            let a = evolve_taylor(&hs, &psi, t, &PropagatorConfig::default()).unwrap();
            let b = evolve_krylov(&hs, &psi, t, &PropagatorConfig::krylov()).unwrap();
            assert!(diff(a.amps(), b.amps()) < 1e-8, "n={n} Δ={delta} t={t}");
        }
    }

    #[test]
    fn low_order_reports_precision_error() {
        let (hs, psi) = sector_problem(8, 1.0, 3);
        let cfg = PropagatorConfig {
            series_order: SeriesOrder::Fixed(5),
            ..Default::default()
        };
        match evolve_taylor(&hs, &psi, 1.0, &cfg) {
            Err(Error::Precision { tail, order, .. }) => {
                assert_eq!(order, 5);
                assert!(tail > 1e-13);
            }
            other => panic!("expected precision error, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_order_stops_early_for_small_steps() {
        let (hs, psi) = sector_problem(8, 2.0, 4);
        let cfg = PropagatorConfig {
            t0: 0.1,
            ..PropagatorConfig::adaptive()
        };
        let mut v = psi.amps().to_vec();
        let rep = taylor_in_place(&hs, &mut v, 1.0, &cfg, &mut Workspace::new()).unwrap();
        assert_eq!(rep.substeps, 10);
        assert!(rep.max_order < 40);
        assert!(rep.max_tail < 1e-13);
    }

    #[test]
    fn invalid_config_rejected() {
        let (hs, psi) = sector_problem(4, 1.0, 5);
        for cfg in [
            PropagatorConfig { t0: 0.0, ..Default::default() },
            PropagatorConfig { series_order: SeriesOrder::Fixed(0), ..Default::default() },
            PropagatorConfig { krylov_dim: 1, ..Default::default() },
        ] {
            assert!(matches!(evolve(&hs, &psi, 1.0, &cfg), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn long_time_norm_preserved() {
        let (hs, psi) = sector_problem(12, 1.0, 6);
        let mut v = psi.amps().to_vec();
        let rep = taylor_in_place(&hs, &mut v, 30.0, &PropagatorConfig::default(), &mut Workspace::new())
            .unwrap();
        assert!(rep.norm_drift < 1e-9);
        assert!((norm(&v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dense_operator_matches_sparse() {
        let (hs, psi) = sector_problem(6, 0.3, 8);
        let d = hs.to_dense();
        let mut a = psi.amps().to_vec();
        let mut b = psi.amps().to_vec();
        let cfg = PropagatorConfig::default();
        taylor_in_place(&hs, &mut a, 2.0, &cfg, &mut Workspace::new()).unwrap();
        taylor_in_place(&d, &mut b, 2.0, &cfg, &mut Workspace::new()).unwrap();
        assert!(diff(&a, &b) < 1e-12);
    }

    #[test]
    fn single_basis_state_in_full_space() {
        let h: LocalHamiltonian = build_xxz(3, 1.0).unwrap();
        let basis = Basis::full(3);
        let hs = assemble_sparse(&h, &basis).unwrap();
        // all-up is an eigenstate with energy 2 * Jz/4
        let s = BasisState::new(0b111, 3).unwrap();
        let psi = StateVector::basis_state(basis, s.bits()).unwrap();
        let out = evolve_taylor(&hs, &psi, 1.3, &PropagatorConfig::default()).unwrap();
        let want = C64::new(0.0, -1.3 * 0.5).exp();
        assert!((out.amplitude(0b111) - want).norm() < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn energy_reversibility_composition(
            n in 4usize..=12,
            delta in -1.0f64..2.0,
            t1 in 0.0f64..4.0,
            t2 in 0.0f64..4.0,
            seed in any::<u64>(),
            krylov in any::<bool>(),
        ) {
            let (hs, psi) = sector_problem(n, delta, seed);
            let cfg = if krylov { PropagatorConfig::krylov() } else { PropagatorConfig::default() };
            let e0 = expectation(&hs, psi.amps());
            let a = evolve(&hs, &psi, t1, &cfg).unwrap();
            let e1 = expectation(&hs, a.amps());
            prop_assert!((e1 - e0).abs() <= 1e-8 * e0.abs().max(1.0));
            prop_assert!((a.norm() - 1.0).abs() < 1e-9);
            let back = evolve(&hs, &a, -t1, &cfg).unwrap();
            prop_assert!(diff(back.amps(), psi.amps()) < 1e-8);
            let ab = evolve(&hs, &a, t2, &cfg).unwrap();
            let direct = evolve(&hs, &psi, t1 + t2, &cfg).unwrap();
            prop_assert!(diff(ab.amps(), direct.amps()) < 1e-8);
        }
    }
}
