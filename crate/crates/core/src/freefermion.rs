//! Exact dynamics of the XY chain (Δ = 0) through the Jordan–Wigner map.
//!
//! Spin up is an occupied fermion mode, so `S^z_i = n_i - 1/2` and the flip
//! term becomes hopping of amplitude 1/2 between neighbours.

use nalgebra::{DMatrix, DVector};

use crate::error::{arg, Error, Result};
use crate::C64;

#[derive(Clone, Debug, PartialEq)]
pub struct HoppingMatrix {
    n_sites: usize,
    entries: DMatrix<f64>,
    boundary_sign: Option<f64>,
}

impl HoppingMatrix {
    /// Open chain with hopping 1/2.
    pub fn open(n_sites: usize) -> Result<Self> {
        if n_sites == 0 {
            return Err(arg("chain needs at least one site"));
        }
        let mut entries = DMatrix::zeros(n_sites, n_sites);
        for i in 0..n_sites.saturating_sub(1) {
            entries[(i, i + 1)] = 0.5;
            entries[(i + 1, i)] = 0.5;
        }
        Ok(Self {
            n_sites,
            entries,
            boundary_sign: None,
        })
    }

    /// Ring whose wrap-around bond carries `sign * 1/2`.
    pub fn periodic(n_sites: usize, sign: f64) -> Result<Self> {
        if n_sites < 3 {
            return Err(arg("ring needs at least three sites"));
        }
        if sign.abs() != 1.0 {
            return Err(arg("boundary sign must be +1 or -1"));
        }
        let mut m = Self::open(n_sites)?;
        m.entries[(n_sites - 1, 0)] = 0.5 * sign;
        m.entries[(0, n_sites - 1)] = 0.5 * sign;
        m.boundary_sign = Some(sign);
        Ok(m)
    }

    /// Ring with the sign fixed by fermion parity: antiperiodic for an even
    /// particle number.
    pub fn periodic_for_particles(n_sites: usize, n_particles: usize) -> Result<Self> {
        let sign = if n_particles % 2 == 0 { -1.0 } else { 1.0 };
        Self::periodic(n_sites, sign)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn boundary_sign(&self) -> Option<f64> {
        self.boundary_sign
    }
}

/// `G_ij = <c†_i c_j>`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    g: DMatrix<C64>,
}

impl CorrelationMatrix {
    /// Product state with the given occupations.
    pub fn from_occupations(occ: &[bool]) -> Self {
        let diag = DVector::from_iterator(
            occ.len(),
            occ.iter().map(|&o| C64::new(if o { 1.0 } else { 0.0 }, 0.0)),
        );
        Self {
            g: DMatrix::from_diagonal(&diag),
        }
    }

    pub fn from_matrix(g: DMatrix<C64>) -> Result<Self> {
        if !g.is_square() {
            return Err(arg("correlation matrix must be square"));
        }
        Ok(Self { g })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.g
    }

    pub fn n_sites(&self) -> usize {
        self.g.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.g.diagonal().iter().map(|z| z.re).sum()
    }

    /// `<S^z_i> = G_ii - 1/2`.
    pub fn sz(&self) -> Vec<f64> {
        self.g.diagonal().iter().map(|z| z.re - 0.5).collect()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (&self.g - self.g.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        crate::dense::hermitian_eigenvalues(&self.g)
    }
}

/// Alternating occupations with the central site (index `n/2`) up or down.
pub fn neel_occupations(n_sites: usize, center_up: bool) -> Vec<bool> {
    let c = n_sites / 2;
    (0..n_sites)
        .map(|i| ((i + c) % 2 == 0) == center_up)
        .collect()
}

/// Diagonalized hopping matrix, reused across many times.
#[derive(Clone, Debug)]
pub struct Propagator {
    vecs: DMatrix<f64>,
    energies: DVector<f64>,
}

impl Propagator {
    pub fn new(m: &HoppingMatrix) -> Self {
        let eig = m.entries.clone().symmetric_eigen();
        Self {
            vecs: eig.eigenvectors,
            energies: eig.eigenvalues,
        }
    }

    /// `U = exp(-iMt)`.
    pub fn unitary(&self, t: f64) -> DMatrix<C64> {
        let n = self.energies.len();
        let v = self.vecs.map(|x| C64::new(x, 0.0));
        let mut scaled = v.clone();
        for k in 0..n {
            let p = C64::new(0.0, -self.energies[k] * t).exp();
            scaled.column_mut(k).iter_mut().for_each(|x| *x *= p);
        }
        scaled * v.transpose()
    }

    pub fn evolve(&self, g0: &CorrelationMatrix, t: f64) -> CorrelationMatrix {
        let u = self.unitary(t);
        CorrelationMatrix {
            g: u.adjoint() * &g0.g * u,
        }
    }

    /// `G_ii(t) - 1/2` for a diagonal initial state, in `O(n^2)`.
    pub fn sz_from_occupations(&self, occ: &[bool], t: f64) -> Vec<f64> {
        let u = self.unitary(t);
        let n = occ.len();
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for (k, &o) in occ.iter().enumerate() {
                    if o {
                        s += u[(k, i)].norm_sqr();
                    }
                }
                s - 0.5
            })
            .collect()
    }
}

/// `G(t) = U† G0 U` with `U = exp(-iMt)`.
pub fn evolve_correlations(
    m: &HoppingMatrix,
    g0: &CorrelationMatrix,
    t: f64,
) -> Result<CorrelationMatrix> {
    if m.n_sites() != g0.n_sites() {
        return Err(arg("hopping and correlation matrices differ in size"));
    }
    Ok(Propagator::new(m).evolve(g0, t))
}

pub fn sz_profile(m: &HoppingMatrix, g0: &CorrelationMatrix, t: f64) -> Result<Vec<f64>> {
    Ok(evolve_correlations(m, g0, t)?.sz())
}

/// `<S^z_site(t)>` on a time grid, starting from the Neel state with the
/// given central orientation.
pub fn site_curve(m: &HoppingMatrix, site: usize, center_up: bool, times: &[f64]) -> Result<Vec<f64>> {
    if site >= m.n_sites() {
        return Err(arg(format!("site {site} outside chain of {}", m.n_sites())));
    }
    let occ = neel_occupations(m.n_sites(), center_up);
    let p = Propagator::new(m);
    Ok(times
        .iter()
        .map(|&t| {
            let u = p.unitary(t);
            occ.iter()
                .enumerate()
                .filter(|(_, &o)| o)
                .map(|(k, _)| u[(k, site)].norm_sqr())
                .sum::<f64>()
                - 0.5
        })
        .collect())
}

/// Central-site curve of an open chain.
pub fn central_curve(n_sites: usize, center_up: bool, times: &[f64]) -> Result<Vec<f64>> {
    site_curve(&HoppingMatrix::open(n_sites)?, n_sites / 2, center_up, times)
}

/// First time at which two curves differ by more than `threshold`.
pub fn first_deviation(times: &[f64], a: &[f64], b: &[f64], threshold: f64) -> Option<f64> {
    times
        .iter()
        .zip(a.iter().zip(b))
        .find(|(_, (x, y))| (*x - *y).abs() > threshold)
        .map(|(t, _)| *t)
}

pub fn time_grid(t_max: f64, dt: f64) -> Vec<f64> {
    let n = (t_max / dt + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 * dt).collect()
}

/// Parameters of `A t^{-p} cos(ωt + θ0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvelopeFit {
    pub exponent: f64,
    pub omega: f64,
    pub theta0: f64,
    pub amplitude: f64,
    pub n_extrema: usize,
}

/// Fit the decay exponent from `log|extrema|` against `log t`, then the
/// frequency and phase of `v t^p` by linear least squares over a scan in ω.
pub fn fit_envelope(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<EnvelopeFit> {
    if times.len() != values.len() {
        return Err(arg("times and values differ in length"));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(&t, &v)| (t, v))
        .collect();
    if pts.len() < 5 {
        return Err(Error::Analysis("too few points in the fit window".into()));
    }
    let mut ext = Vec::new();
    for w in pts.windows(3) {
        let (a, b, c) = (w[0].1.abs(), w[1].1.abs(), w[2].1.abs());
        if b > a && b >= c {
            ext.push(refine_extremum(w));
        }
    }
    if ext.len() < 3 {
        return Err(Error::Analysis(format!("only {} extrema in window", ext.len())));
    }
    let xs: Vec<f64> = ext.iter().map(|e| e.0.ln()).collect();
    let ys: Vec<f64> = ext.iter().map(|e| e.1.abs().ln()).collect();
    let (slope, _) = linear_fit(&xs, &ys);
    let p = -slope;

    let scaled: Vec<(f64, f64)> = pts.iter().map(|&(t, v)| (t, v * t.powf(p))).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    let scan = |omega: f64, best: &mut (f64, f64, f64, f64)| {
        let (a, b, res) = cos_sin_fit(&scaled, omega);
        if res < best.0 {
            *best = (res, omega, a, b);
        }
    };
    for k in 0..=2000 {
        scan(0.5 + 3.5 * k as f64 / 2000.0, &mut best);
    }
    let mut lo = best.1 - 0.002;
    let mut hi = best.1 + 0.002;
    for _ in 0..60 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if cos_sin_fit(&scaled, m1).2 < cos_sin_fit(&scaled, m2).2 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let omega = 0.5 * (lo + hi);
    let (a, b, _) = cos_sin_fit(&scaled, omega);
    // a cos ωt + b sin ωt = A cos(ωt + θ)
    let amplitude = a.hypot(b);
    let theta0 = (-b).atan2(a);
    Ok(EnvelopeFit {
        exponent: p,
        omega,
        theta0,
        amplitude,
        n_extrema: ext.len(),
    })
}

/// Vertex of the parabola through three samples.
fn refine_extremum(w: &[(f64, f64)]) -> (f64, f64) {
    let (x0, y0) = (w[0].0, w[0].1.abs());
    let (x1, y1) = (w[1].0, w[1].1.abs());
    let (x2, y2) = (w[2].0, w[2].1.abs());
    let d = (x0 - x1) * (x0 - x2) * (x1 - x2);
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / d;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / d;
    let c = (x1 * x2 * (x1 - x2) * y0 + x2 * x0 * (x2 - x0) * y1 + x0 * x1 * (x0 - x1) * y2) / d;
    if a.abs() < 1e-300 {
        return (x1, y1);
    }
    let xv = -b / (2.0 * a);
    if xv < x0 || xv > x2 {
        return (x1, y1);
    }
    (xv, c - b * b / (4.0 * a))
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn cos_sin_fit(pts: &[(f64, f64)], omega: f64) -> (f64, f64, f64) {
    let (mut cc, mut ss, mut cs, mut yc, mut ys) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, y) in pts {
        let (s, c) = (omega * t).sin_cos();
        cc += c * c;
        ss += s * s;
        cs += c * s;
        yc += y * c;
        ys += y * s;
    }
    let det = cc * ss - cs * cs;
    let a = (yc * ss - ys * cs) / det;
    let b = (ys * cc - yc * cs) / det;
    let res = pts
        .iter()
        .map(|&(t, y)| {
            let (s, c) = (omega * t).sin_cos();
            (y - a * c - b * s).powi(2)
        })
        .sum();
    (a, b, res)
}

/// CSV with columns `t,site,sz`.
pub fn profile_csv(times: &[f64], profiles: &[Vec<f64>]) -> String {
    let mut out = String::from("t,site,sz\n");
    for (t, p) in times.iter().zip(profiles) {
        for (i, v) in p.iter().enumerate() {
            out.push_str(&format!("{t},{i},{v}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{hermitian_expm, mat_vec};
    use crate::hilbert::{Basis, StateVector};
    use crate::models::{assemble_sparse, build_xxz};
    use crate::propagation::{evolve_taylor, PropagatorConfig};
    use proptest::prelude::*;

    fn occ_bits(occ: &[bool]) -> u64 {
        occ.iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .fold(0, |b, (i, _)| b | 1 << i)
    }

    #[test]
    fn zero_time_is_identity() {
        let m = HoppingMatrix::open(7).unwrap();
        let g0 = CorrelationMatrix::from_occupations(&neel_occupations(7, true));
        let g = evolve_correlations(&m, &g0, 0.0).unwrap();
        assert!((g.matrix() - g0.matrix()).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn two_site_rotation() {
        let m = HoppingMatrix::open(2).unwrap();
        let g0 = CorrelationMatrix::from_occupations(&[true, false]);
        for &t in &[0.2, 1.0, 2.5, 7.0] {
            let n0 = sz_profile(&m, &g0, t).unwrap()[0] + 0.5;
            assert!((n0 - (t / 2.0).cos().powi(2)).abs() < 1e-13);
        }
    }

    #[test]
    fn neel_center_orientation() {
        assert!(neel_occupations(35, true)[17]);
        assert!(!neel_occupations(35, false)[17]);
        let occ = neel_occupations(101, false);
        assert!(!occ[50] && occ[49] && occ[51]);
        let g0 = CorrelationMatrix::from_occupations(&neel_occupations(11, true));
        assert_eq!(g0.sz()[5], 0.5);
    }

    #[test]
    fn matches_many_body_open_chain() {
        let n = 12;
        let occ = neel_occupations(n, true);
        let h = build_xxz(n, 0.0).unwrap();
        let basis = Basis::sector(n, occ.iter().filter(|&&o| o).count()).unwrap();
        let hs = assemble_sparse(&h, &basis).unwrap();
        let psi0 = StateVector::basis_state(basis, occ_bits(&occ)).unwrap();
        let m = HoppingMatrix::open(n).unwrap();
        let g0 = CorrelationMatrix::from_occupations(&occ);
        for &t in &[0.5, 1.5, 3.0, 4.5, 6.0] {
            let psi = evolve_taylor(&hs, &psi0, t, &PropagatorConfig::default()).unwrap();
            let ff = sz_profile(&m, &g0, t).unwrap();
            for i in 0..n {
                assert!((psi.sz(i) - ff[i]).abs() < 1e-8, "t={t} site={i}");
            }
        }
    }

    /// Dense sector evolution of a ring, wrap bond added by hand.
    fn ring_many_body(n: usize, occ: &[bool], t: f64) -> Vec<f64> {
        let basis = Basis::sector(n, occ.iter().filter(|&&o| o).count()).unwrap();
        let mut h = assemble_sparse(&build_xxz(n, 0.0).unwrap(), &basis).unwrap().to_dense();
        for k in 0..basis.dim() {
            let s = basis.state(k);
            if (s ^ s >> (n - 1)) & 1 == 1 {
                let j = basis.index(s ^ (1 | 1 << (n - 1))).unwrap();
                h[(j, k)] += C64::new(0.5, 0.0);
            }
        }
        let u = hermitian_expm(&h, C64::new(0.0, -t));
        let psi0 = StateVector::basis_state(basis.clone(), occ_bits(occ)).unwrap();
        let mut out = vec![C64::new(0.0, 0.0); basis.dim()];
        mat_vec(&u, psi0.amps(), &mut out);
        let psi = StateVector::new(basis, out).unwrap();
        (0..n).map(|i| psi.sz(i)).collect()
    }

    #[test]
    fn ring_boundary_sign_follows_parity() {
        // 10 sites carry 5 particles, 12 sites carry 6
        for n in [10usize, 12] {
            let occ = neel_occupations(n, true);
            let np = occ.iter().filter(|&&o| o).count();
            let good = HoppingMatrix::periodic_for_particles(n, np).unwrap();
            let bad = HoppingMatrix::periodic(n, -good.boundary_sign().unwrap()).unwrap();
            let g0 = CorrelationMatrix::from_occupations(&occ);
            let mut bad_err: f64 = 0.0;
            for &t in &[1.0, 2.5, 4.0] {
                let mb = ring_many_body(n, &occ, t);
                let ff = sz_profile(&good, &g0, t).unwrap();
                let wrong = sz_profile(&bad, &g0, t).unwrap();
                for i in 0..n {
                    assert!((mb[i] - ff[i]).abs() < 1e-10, "n={n} t={t} i={i}");
                    bad_err = bad_err.max((mb[i] - wrong[i]).abs());
                }
            }
            assert!(bad_err > 1e-4, "n={n}");
        }
    }

    #[test]
    fn correlation_invariants() {
        let m = HoppingMatrix::periodic(9, 1.0).unwrap();
        let g0 = CorrelationMatrix::from_occupations(&neel_occupations(9, false));
        let g = evolve_correlations(&m, &g0, 3.7).unwrap();
        assert!(g.hermiticity_defect() < 1e-12);
        assert!((g.trace() - g0.trace()).abs() < 1e-10);
        let ev = g.eigenvalues();
        assert!(ev[0] > -1e-10 && ev[ev.len() - 1] < 1.0 + 1e-10);
    }

    #[test]
    fn bulk_independent_of_length() {
        let times = time_grid(6.0, 0.5);
        let a = central_curve(25, true, &times).unwrap();
        let b = central_curve(41, true, &times).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn envelope_fit_recovers_synthetic_parameters() {
        let times = time_grid(30.0, 0.01);
        let v: Vec<f64> = times
            .iter()
            .map(|&t| 0.3 * t.max(0.1).powf(-0.5) * (2.0 * t + 2.3).cos())
            .collect();
        let fit = fit_envelope(&times, &v, (5.0, 25.0)).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-3, "{fit:?}");
        assert!((fit.omega - 2.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.theta0 - 2.3).abs() < 1e-3, "{fit:?}");
        assert!((fit.amplitude - 0.3).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn envelope_fit_needs_oscillations() {
        let times = time_grid(10.0, 0.1);
        let v: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        assert!(matches!(fit_envelope(&times, &v, (5.0, 9.0)), Err(Error::Analysis(_))));
    }

    #[test]
    fn deviation_and_csv() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(first_deviation(&t, &[0.0, 0.0, 0.5], &[0.0, 0.005, 0.0], 0.01), Some(2.0));
        assert_eq!(first_deviation(&t, &[0.0; 3], &[0.0; 3], 0.01), None);
        let csv = profile_csv(&[0.5], &[vec![0.25, -0.25]]);
        assert_eq!(csv, "t,site,sz\n0.5,0,0.25\n0.5,1,-0.25\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn particle_number_conserved(n in 2usize..30, bits in any::<u64>(), t in -10.0f64..10.0) {
            let occ: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let g0 = CorrelationMatrix::from_occupations(&occ);
            let m = HoppingMatrix::open(n).unwrap();
            let g = evolve_correlations(&m, &g0, t).unwrap();
            prop_assert!((g.trace() - g0.trace()).abs() < 1e-10);
            let fast = Propagator::new(&m).sz_from_occupations(&occ, t);
            for (a, b) in fast.iter().zip(g.sz()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
