//! Block and corner-transfer quantum circuits approximating `exp(-iHt)`,
//! with dense verification against the exact propagator.
//!
//! Bond `b` couples sites `b` and `b + 1`. A gate is an ordered list of
//! factors `exp(-i τ Σ_{b ∈ bonds} h_b)`, the first factor acting first.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dense::{hermitian_expm, op_norm};
use crate::error::{arg, Error, Result};
use crate::hilbert::{norm, Basis};
use crate::models::{assemble_sparse, BondTerm, LocalHamiltonian};
use crate::C64;

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub bonds: Vec<usize>,
    /// Signed duration; negative values undo evolution.
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub sites: Range<usize>,
    pub factors: Vec<Factor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircuitLayer {
    pub gates: Vec<Gate>,
}

impl CircuitLayer {
    /// Gates must have pairwise disjoint supports.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut spans: Vec<&Range<usize>> = self.gates.iter().map(|g| &g.sites).collect();
        spans.sort_by_key(|r| r.start);
        for w in spans.windows(2) {
            if w[0].end > w[1].start {
                return Err(Error::Invariant(format!(
                    "gates {:?} and {:?} overlap",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }
}

/// One round of layers applied in order, standing for evolution over `time`.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub n_sites: usize,
    pub time: f64,
    pub layers: Vec<CircuitLayer>,
}

impl Circuit {
    /// Plain-text gate list, one factor per line:
    /// `layer site_lo site_hi duration sign bonds`.
    pub fn export(&self) -> String {
        let mut out = String::from("# layer site_lo site_hi duration sign bonds\n");
        for (li, layer) in self.layers.iter().enumerate() {
            for g in &layer.gates {
                for f in &g.factors {
                    let bonds: Vec<String> = f.bonds.iter().map(|b| b.to_string()).collect();
                    let sign = if f.duration < 0.0 { '-' } else { '+' };
                    out.push_str(&format!(
                        "{li} {} {} {} {sign} {}\n",
                        g.sites.start,
                        g.sites.end - 1,
                        f.duration.abs(),
                        bonds.join(";")
                    ));
                }
            }
        }
        out
    }

    pub fn n_gates(&self) -> usize {
        self.layers.iter().map(|l| l.gates.len()).sum()
    }
}

fn nearest_terms(h: &LocalHamiltonian) -> Result<Vec<Option<BondTerm>>> {
    let n = h.n_sites();
    let mut out = vec![None; n.saturating_sub(1)];
    for t in h.terms() {
        if !t.is_nearest() {
            return Err(arg("circuits need a nearest-neighbour Hamiltonian"));
        }
        match &mut out[t.site_a] {
            Some(prev) => {
                let p: &mut BondTerm = prev;
                p.j_xy += t.j_xy;
                p.j_z += t.j_z;
            }
            slot => *slot = Some(*t),
        }
    }
    if h.field() != 0.0 {
        return Err(arg("circuits assume a field-free Hamiltonian"));
    }
    Ok(out)
}

fn make_gate(factors: Vec<Factor>) -> Option<Gate> {
    let factors: Vec<Factor> = factors.into_iter().filter(|f| !f.bonds.is_empty()).collect();
    let lo = factors.iter().flat_map(|f| f.bonds.iter()).min()?;
    let hi = factors.iter().flat_map(|f| f.bonds.iter()).max()?;
    Some(Gate {
        sites: *lo..hi + 2,
        factors,
    })
}

fn clip(lo: i64, hi: i64, n_bonds: usize) -> Vec<usize> {
    let lo = lo.max(0);
    let hi = hi.min(n_bonds as i64 - 1);
    if lo > hi {
        return Vec::new();
    }
    (lo as usize..=hi as usize).collect()
}

/// `∏V ∏U` with blocks `[kl, (k+1)l)`; each `V_k` localizes the coupling bond
/// `kl - 1` to the `l`-site window centred on it.
pub fn build_block_circuit(h: &LocalHamiltonian, l: usize, t: f64) -> Result<Circuit> {
    let n = h.n_sites();
    if l < 2 || l % 2 == 1 {
        return Err(arg(format!("block length must be even and at least 2, got {l}")));
    }
    nearest_terms(h)?;
    let n_bonds = n.saturating_sub(1);
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut k = 0;
    while k * l < n {
        let block = clip((k * l) as i64, ((k + 1) * l) as i64 - 2, n_bonds);
        if let Some(g) = make_gate(vec![Factor { bonds: block, duration: t }]) {
            u.push(g);
        }
        if k > 0 {
            let c = (k * l - 1) as i64;
            let half = (l / 2) as i64 - 1;
            let all = clip(c - half, c + half, n_bonds);
            let inner: Vec<usize> = all.iter().copied().filter(|&b| b as i64 != c).collect();
            if let Some(mut g) = make_gate(vec![
                Factor { bonds: inner, duration: -t },
                Factor { bonds: all, duration: t },
            ]) {
                let lo = (c - half).max(0) as usize;
                let hi = ((c + half + 2) as usize).min(n);
                g.sites = lo.min(g.sites.start)..hi.max(g.sites.end);
                v.push(g);
            }
        }
        k += 1;
    }
    let circuit = Circuit {
        n_sites: n,
        time: t,
        layers: vec![CircuitLayer { gates: u }, CircuitLayer { gates: v }],
    };
    for layer in &circuit.layers {
        layer.check_disjoint()?;
    }
    Ok(circuit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerConfig {
    pub l_prime: usize,
    pub t: f64,
    pub v_lr: f64,
}

impl CornerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_prime < 1 {
            return Err(arg("l' must be at least 1"));
        }
        if !(self.t >= 0.0 && self.v_lr > 0.0) {
            return Err(arg("need t ≥ 0 and v_LR > 0"));
        }
        Ok(())
    }

    /// `2l' + v t`, rounded up to an even integer.
    pub fn l(&self) -> usize {
        let x = (2.0 * self.l_prime as f64 + self.v_lr * self.t - 1e-9).ceil() as usize;
        x + x % 2
    }

    /// Substeps per half round, `⌈v t / 2⌉` and at least 1.
    pub fn n0(&self) -> usize {
        ((self.v_lr * self.t / 2.0 - 1e-9).ceil() as usize).max(1)
    }

    pub fn substep(&self) -> f64 {
        self.t / (2.0 * self.n0() as f64)
    }
}

/// Bond spans of the triangle centred on bond `c` at slice `n`:
/// `(left half, right half)`; the centre bond is in neither.
fn halves(c: i64, lp: usize, n: usize) -> (Range<i64>, Range<i64>) {
    let left = (lp / 2) as i64 + n as i64;
    let right = lp.div_ceil(2) as i64 + n as i64;
    (c - left..c, c + 1..c + right + 1)
}

fn corner_half(n_sites: usize, cfg: &CornerConfig, offset: i64) -> (CircuitLayer, CircuitLayer) {
    let l = cfg.l() as i64;
    let n0 = cfg.n0();
    let tau = cfg.substep();
    let n_bonds = n_sites.saturating_sub(1);
    let span = |r: &Range<i64>| clip(r.start, r.end - 1, n_bonds);
    let k_lo = -2 - (cfg.l_prime as i64 + n0 as i64) / l;
    let k_hi = n_sites as i64 / l + 2 + (cfg.l_prime as i64 + n0 as i64) / l;
    let centers: Vec<i64> = (k_lo..=k_hi).map(|k| k * l + offset).collect();
    let mut tri = Vec::new();
    for &c in &centers {
        let factors = (0..n0)
            .rev()
            .map(|n| {
                let (a, b) = halves(c, cfg.l_prime, n);
                Factor {
                    bonds: span(&(a.start..b.end)),
                    duration: tau,
                }
            })
            .collect();
        if let Some(g) = make_gate(factors) {
            tri.push(g);
        }
    }
    let mut rect = Vec::new();
    for w in centers.windows(2) {
        let (c0, c1) = (w[0], w[1]);
        let mut factors = Vec::new();
        for n in 0..n0 {
            factors.push(Factor {
                bonds: span(&halves(c1, cfg.l_prime, n).0),
                duration: -tau,
            });
        }
        for n in 0..n0 {
            factors.push(Factor {
                bonds: span(&halves(c0, cfg.l_prime, n).1),
                duration: -tau,
            });
        }
        factors.push(Factor {
            bonds: span(&(c0 + 1..c1)),
            duration: 0.5 * cfg.t,
        });
        if let Some(g) = make_gate(factors) {
            rect.push(g);
        }
    }
    (CircuitLayer { gates: tri }, CircuitLayer { gates: rect })
}

/// `∏Ṽ ∏Ũ ∏V ∏U`, each half approximating `exp(-iHt/2)`; the second pair
/// is shifted by `l / 2`.
pub fn build_corner_circuit(h: &LocalHamiltonian, cfg: &CornerConfig) -> Result<Circuit> {
    cfg.validate()?;
    nearest_terms(h)?;
    let n = h.n_sites();
    let (u, v) = corner_half(n, cfg, 0);
    let (ut, vt) = corner_half(n, cfg, (cfg.l() / 2) as i64);
    let circuit = Circuit {
        n_sites: n,
        time: cfg.t,
        layers: vec![u, v, ut, vt],
    };
    for layer in &circuit.layers {
        layer.check_disjoint()?;
    }
    Ok(circuit)
}

/// Dense window unitary of one gate, with a sparse column table.
#[derive(Clone, Debug)]
pub struct CompiledGate {
    lo: usize,
    width: usize,
    pub matrix: DMatrix<C64>,
    cols: Vec<Vec<(u64, C64)>>,
    cols_adj: Vec<Vec<(u64, C64)>>,
}

fn column_table(m: &DMatrix<C64>) -> Vec<Vec<(u64, C64)>> {
    (0..m.ncols())
        .map(|c| {
            (0..m.nrows())
                .filter(|&r| r.count_ones() == c.count_ones() && m[(r, c)].norm() > 1e-15)
                .map(|r| (r as u64, m[(r, c)]))
                .collect()
        })
        .collect()
}

impl CompiledGate {
    pub fn sites(&self) -> Range<usize> {
        self.lo..self.lo + self.width
    }

    pub fn unitarity_defect(&self) -> f64 {
        let d = self.matrix.nrows();
        (self.matrix.adjoint() * &self.matrix - DMatrix::identity(d, d))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    fn apply(&self, basis: &Basis, x: &[C64], y: &mut [C64], adjoint: bool) {
        let table = if adjoint { &self.cols_adj } else { &self.cols };
        let mask = ((1u64 << self.width) - 1) << self.lo;
        y.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (k, a) in x.iter().enumerate() {
            if *a == C64::new(0.0, 0.0) {
                continue;
            }
            let s = basis.state(k);
            let w = (s & mask) >> self.lo;
            let rest = s & !mask;
            for &(r, val) in &table[w as usize] {
                let j = basis
                    .index(rest | r << self.lo)
                    .expect("gates conserve total Sz");
                y[j] += val * a;
            }
        }
    }
}

fn window_unitary(bonds: &[Option<BondTerm>], gate: &Gate) -> Result<DMatrix<C64>> {
    let lo = gate.sites.start;
    let w = gate.sites.end - lo;
    let dim = 1 << w;
    let mut u = DMatrix::<C64>::identity(dim, dim);
    for f in &gate.factors {
        let terms: Vec<BondTerm> = f
            .bonds
            .iter()
            .filter_map(|&b| bonds.get(b).copied().flatten())
            .map(|t| t.shifted(-(lo as isize)))
            .collect();
        let hw = LocalHamiltonian::new(w, terms)?;
        let m = assemble_sparse(&hw, &Basis::full(w))?.to_dense();
        u = hermitian_expm(&m, C64::new(0.0, -f.duration)) * u;
    }
    Ok(u)
}

/// A circuit with every gate exponentiated for a particular Hamiltonian.
#[derive(Clone, Debug)]
pub struct CompiledCircuit {
    pub n_sites: usize,
    pub layers: Vec<Vec<CompiledGate>>,
}

impl Circuit {
    pub fn compile(&self, h: &LocalHamiltonian) -> Result<CompiledCircuit> {
        if h.n_sites() != self.n_sites {
            return Err(arg("circuit and Hamiltonian differ in chain length"));
        }
        let bonds = nearest_terms(h)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut gates = Vec::with_capacity(layer.gates.len());
            for g in &layer.gates {
                let matrix = window_unitary(&bonds, g)?;
                gates.push(CompiledGate {
                    lo: g.sites.start,
                    width: g.sites.end - g.sites.start,
                    cols: column_table(&matrix),
                    cols_adj: column_table(&matrix.adjoint()),
                    matrix,
                });
            }
            layers.push(gates);
        }
        Ok(CompiledCircuit {
            n_sites: self.n_sites,
            layers,
        })
    }
}

impl CompiledCircuit {
    /// Apply `rounds` rounds (or their inverse) to a vector in `basis`.
    pub fn apply(&self, basis: &Basis, psi: &mut Vec<C64>, rounds: usize, adjoint: bool) {
        let mut tmp = vec![C64::new(0.0, 0.0); psi.len()];
        let order: Vec<&CompiledGate> = self.layers.iter().flatten().collect();
        for _ in 0..rounds {
            if adjoint {
                for g in order.iter().rev() {
                    g.apply(basis, psi, &mut tmp, true);
                    std::mem::swap(psi, &mut tmp);
                }
            } else {
                for g in &order {
                    g.apply(basis, psi, &mut tmp, false);
                    std::mem::swap(psi, &mut tmp);
                }
            }
        }
    }

    /// Matrix of one round restricted to `basis`.
    pub fn matrix(&self, basis: &Basis) -> DMatrix<C64> {
        let d = basis.dim();
        let mut m = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut v = vec![C64::new(0.0, 0.0); d];
            v[c] = C64::new(1.0, 0.0);
            self.apply(basis, &mut v, 1, false);
            m.column_mut(c).copy_from_slice(&v);
        }
        m
    }

    pub fn max_unitarity_defect(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(CompiledGate::unitarity_defect)
            .fold(0.0, f64::max)
    }
}

/// `‖exp(-iHt) - W‖₂`, evaluated sector by sector.
pub fn circuit_error(h: &LocalHamiltonian, circuit: &Circuit) -> Result<f64> {
    let compiled = circuit.compile(h)?;
    let n = h.n_sites();
    let mut worst: f64 = 0.0;
    for n_up in 0..=n {
        let basis = Basis::sector(n, n_up)?;
        let exact = hermitian_expm(
            &assemble_sparse(h, &basis)?.to_dense(),
            C64::new(0.0, -circuit.time),
        );
        worst = worst.max(op_norm(&(exact - compiled.matrix(&basis))));
    }
    Ok(worst)
}

fn pauli_apply(basis: &Basis, x: &[C64], site: usize, flip: bool) -> Vec<C64> {
    let mut y = vec![C64::new(0.0, 0.0); x.len()];
    for (k, a) in x.iter().enumerate() {
        let s = basis.state(k);
        if flip {
            y[basis.index(s ^ 1 << site).unwrap()] = *a;
        } else {
            y[k] = if s >> site & 1 == 1 { *a } else { -*a };
        }
    }
    y
}

/// Support radius growth per unit time of `W†^R σ^z_site W^R`.
///
/// A site belongs to the support when the commutator with `σ^x` or `σ^z`
/// there has norm above `1e-8` on a random vector.
pub fn measure_circuit_velocity(
    h: &LocalHamiltonian,
    circuit: &Circuit,
    rounds: usize,
    site: usize,
    seed: u64,
) -> Result<f64> {
    let n = h.n_sites();
    if n > 14 {
        return Err(Error::Resource(format!("support tracking limited to 14 sites, got {n}")));
    }
    if site >= n || rounds == 0 {
        return Err(arg("need a site inside the chain and at least one round"));
    }
    if circuit.time == 0.0 {
        return Ok(0.0);
    }
    let compiled = circuit.compile(h)?;
    let basis = Basis::full(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<C64> = (0..basis.dim())
        .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let heis = |x: &[C64]| {
        let mut y = x.to_vec();
        compiled.apply(&basis, &mut y, rounds, false);
        let mut y = pauli_apply(&basis, &y, site, false);
        compiled.apply(&basis, &mut y, rounds, true);
        y
    };
    let av = heis(&v);
    let mut radius = 0;
    for s in 0..n {
        let d = s.abs_diff(site);
        if d <= radius {
            continue;
        }
        for flip in [true, false] {
            let apv = heis(&pauli_apply(&basis, &v, s, flip));
            let pav = pauli_apply(&basis, &av, s, flip);
            let c: f64 = apv
                .iter()
                .zip(&pav)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            if c > 1e-8 {
                radius = d;
                break;
            }
        }
    }
    Ok(radius as f64 / (rounds as f64 * circuit.time))
}

/// Operator Schmidt rank of `u` on `n_sites` across the cut after `cut` sites
/// (counted from site 0).
pub fn operator_schmidt_rank(u: &DMatrix<C64>, n_sites: usize, cut: usize) -> usize {
    let a = 1usize << cut;
    let b = 1usize << (n_sites - cut);
    // rows: (out_low, in_low), cols: (out_high, in_high)
    let mut m = DMatrix::<C64>::zeros(a * a, b * b);
    for r in 0..u.nrows() {
        for c in 0..u.ncols() {
            let (rl, rh) = (r % a, r / a);
            let (cl, ch) = (c % a, c / a);
            m[(rl * a + cl, rh * b + ch)] = u[(r, c)];
        }
    }
    let sv = m.svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-10 * top.max(1.0)).count()
}
