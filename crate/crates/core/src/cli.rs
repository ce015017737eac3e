//! Batch experiment harness: config parsing, presets, dispatch and artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::circuits::{build_block_circuit, build_corner_circuit, circuit_error, measure_circuit_velocity, CornerConfig};
use crate::error::{arg, Error, Result};
use crate::freefermion::{central_curve, first_deviation, fit_envelope, site_curve, time_grid, HoppingMatrix};
use crate::hilbert::binomial;
use crate::lightcone::{estimate_csv, run_curve, run_sampling, LightconeConfig, LightconeModel, Observable};
use crate::models::{
    build_xxz, faf_couplings, faf_from_couplings, frustrated_couplings, frustrated_from_couplings, parse_couplings,
    spin_wave_velocity, write_couplings, Frustration, LocalHamiltonian,
};
use crate::propagation::PropagatorConfig;
use crate::qbp::{
    dimer_susceptibility, ln_partition, specific_heat_from, thermo_csv, uniform_susceptibility, QbpConfig, ThermoRow,
};

#[derive(Debug, Parser)]
#[command(name = "spinlc", version, about = "Spin-chain dynamics and thermodynamics experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write CSV, manifest and log to the output directory.
    Run(RunArgs),
    /// Fit `A t^{-p} cos(ωt + θ0)` to a curve in a CSV file.
    FitEnvelope(FitArgs),
    /// List presets with their default parameters.
    ListPresets,
    /// Resolve a configuration and print it without running.
    ValidateConfig(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// `section.key=value`, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub t_min: f64,
    #[arg(long, default_value_t = 25.0)]
    pub t_max: f64,
    /// Value column; defaults to `mean`, then `sz`, then the second column.
    #[arg(long)]
    pub column: Option<String>,
    /// Keep only rows with `column=value`.
    #[arg(long = "select", value_name = "COLUMN=VALUE")]
    pub select: Vec<String>,
}

pub const PRESETS: [&str; 9] = [
    "xy-exact",
    "lightcone-delta0",
    "lightcone-delta0.5",
    "lightcone-delta1",
    "lightcone-delta2",
    "rms-fluctuations",
    "circuit-verify",
    "qbp-faf",
    "qbp-frustrated",
];

const GUARD: [(&str, &str); 2] = [("guard.max_state_dim", "16777216"), ("guard.max_dense_dim", "8192")];

fn lightcone_defaults(delta: &str, mode: &str) -> Vec<(&'static str, String)> {
    [
        ("lightcone.delta", delta),
        ("lightcone.l", "12"),
        ("lightcone.mode", mode),
        ("lightcone.t_f", "auto"),
        ("lightcone.t_max", "12"),
        ("lightcone.delta_t", "0.25"),
        ("lightcone.n_it", "1000"),
        ("lightcone.site", "0"),
        ("lightcone.center_up", "false"),
        ("lightcone.propagator", "adaptive"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect()
}

/// Default parameters of a preset, as `section.key` → text.
pub fn preset_defaults(name: &str) -> Result<BTreeMap<String, String>> {
    let list: Vec<(&str, String)> = match name {
        "xy-exact" => [
            ("ff.n_ref", "101"),
            ("ff.sizes", "35,51"),
            ("ff.periodic", "36"),
            ("ff.t_max", "30"),
            ("ff.dt", "0.05"),
            ("ff.threshold", "0.01"),
            ("ff.center_up", "false"),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect(),
        "lightcone-delta0" => lightcone_defaults("0", "sweep"),
        "lightcone-delta0.5" => lightcone_defaults("0.5", "sweep"),
        "lightcone-delta1" => lightcone_defaults("1", "sweep"),
        "lightcone-delta2" => lightcone_defaults("2", "sweep"),
        "rms-fluctuations" => lightcone_defaults("0", "curve"),
        "circuit-verify" => [
            ("circuit.n", "12"),
            ("circuit.delta", "1"),
            ("circuit.t", "0.5"),
            ("circuit.l_primes", "1,2,3"),
            ("circuit.rounds", "1"),
            ("circuit.site", "0"),
            ("circuit.export", "true"),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect(),
        "qbp-faf" => [
            ("qbp.n", "2000"),
            ("qbp.p", "0"),
            ("qbp.l0", "5"),
            ("qbp.j", "1"),
            ("qbp.j_f", "-2"),
            ("qbp.j_a", "2"),
            ("qbp.beta_max", "8"),
            ("qbp.beta_step", "0.25"),
            ("qbp.h_step", "0.001"),
            ("qbp.couplings_file", ""),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect(),
        "qbp-frustrated" => [
            ("qbp.n", "1999"),
            ("qbp.disorder", "pure"),
            ("qbp.j_choices", "0.9,1.1"),
            ("qbp.l0", "7"),
            ("qbp.beta_max", "8"),
            ("qbp.beta_step", "0.25"),
            ("qbp.h_step", "0.001"),
            ("qbp.lambda_step", "0.001"),
            ("qbp.observables", "C,chi,chi_dimer"),
            ("qbp.couplings_file", ""),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect(),
        other => return Err(arg(format!("unknown preset {other:?}; see list-presets"))),
    };
    let mut map: BTreeMap<String, String> = list.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    for (k, v) in GUARD {
        map.insert(k.into(), v.into());
    }
    Ok(map)
}

/// One `key = value` entry with its source position.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
    pub column: usize,
    /// Column of the value, for value errors.
    pub value_column: usize,
}

/// Flat config: top-level keys plus `[section]` keys, stored as `section.key`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("");
        let trimmed = body.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = body.len() - body.trim_start().len();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or(Error::Parse {
                line,
                column: indent + trimmed.len() + 1,
                message: "section header needs a closing ']'".into(),
            })?;
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Parse {
                    line,
                    column: indent + 2,
                    message: format!("invalid section name {name:?}"),
                });
            }
            section = name.to_string();
            continue;
        }
        let eq = body.find('=').ok_or(Error::Parse {
            line,
            column: indent + 1,
            message: "expected `key = value`".into(),
        })?;
        let key = body[..eq].trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Parse {
                line,
                column: indent + 1,
                message: format!("invalid key {key:?}"),
            });
        }
        let after = &body[eq + 1..];
        let value = after.trim();
        let value_column = eq + 2 + (after.len() - after.trim_start().len());
        let value = value.trim_matches('"').to_string();
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let entry = Entry {
            value,
            line,
            column: indent + 1,
            value_column,
        };
        if out.insert(full.clone(), entry).is_some() {
            return Err(Error::Parse {
                line,
                column: indent + 1,
                message: format!("duplicate key {full}"),
            });
        }
    }
    Ok(out)
}

/// Fully resolved parameters for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub preset: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
    positions: BTreeMap<String, (usize, usize)>,
}

impl Resolved {
    fn raw(&self, key: &str) -> &str {
        self.params.get(key).map(String::as_str).unwrap_or("")
    }

    fn bad(&self, key: &str, msg: String) -> Error {
        match self.positions.get(key) {
            Some(&(line, column)) => Error::Parse { line, column, message: msg },
            None => Error::Argument(msg),
        }
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| self.bad(key, format!("{key}: cannot parse {v:?}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.bad(key, format!("{key}: cannot parse {s:?}"))))
            .collect()
    }

    /// Key = value text, sorted by key.
    pub fn to_text(&self) -> String {
        let mut s = format!("preset = {}\nseed = {}\n", self.preset, self.seed);
        let mut section = "";
        for (k, v) in &self.params {
            let (sec, key) = k.split_once('.').unwrap_or(("", k));
            if sec != section {
                let _ = writeln!(s, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }
}

/// Merge preset defaults, config entries and `--override` pairs.
pub fn resolve(args: &RunArgs) -> Result<Resolved> {
    let entries = match &args.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    let preset = match (&args.preset, entries.get("preset")) {
        (Some(p), _) => p.clone(),
        (None, Some(e)) => e.value.clone(),
        (None, None) => {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "no preset given".into(),
            })
        }
    };
    let mut params = preset_defaults(&preset).map_err(|e| match entries.get("preset") {
        Some(en) if args.preset.is_none() => Error::Parse {
            line: en.line,
            column: en.value_column,
            message: e.to_string(),
        },
        _ => e,
    })?;
    let mut positions = BTreeMap::new();
    let mut seed = 0u64;
    for (k, e) in &entries {
        match k.as_str() {
            "preset" => {}
            "seed" => {
                seed = e.value.parse().map_err(|_| Error::Parse {
                    line: e.line,
                    column: e.value_column,
                    message: format!("seed must be a non-negative integer, got {:?}", e.value),
                })?;
            }
            _ if params.contains_key(k) => {
                params.insert(k.clone(), e.value.clone());
                positions.insert(k.clone(), (e.line, e.value_column));
            }
            _ => {
                return Err(Error::Parse {
                    line: e.line,
                    column: e.column,
                    message: format!("unknown key {k} for preset {preset}"),
                })
            }
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| arg(format!("override {o:?} is not KEY=VALUE")))?;
        let k = k.trim();
        if k == "seed" {
            seed = v.trim().parse().map_err(|_| arg(format!("bad seed {v:?}")))?;
        } else if params.contains_key(k) {
            params.insert(k.to_string(), v.trim().to_string());
            positions.remove(k);
        } else {
            return Err(arg(format!("unknown key {k} for preset {preset}")));
        }
    }
    if let Some(s) = args.seed {
        seed = s;
    }
    Ok(Resolved {
        preset,
        seed,
        params,
        positions,
    })
}

/// A named output file and its contents.
pub type Artifact = (String, String);

fn lightcone_run(r: &Resolved, log: &mut String) -> Result<Vec<Artifact>> {
    let delta: f64 = r.get("lightcone.delta")?;
    let l: usize = r.get("lightcone.l")?;
    let max_dim: u64 = r.get("guard.max_state_dim")?;
    let dim = binomial(l + 1, l.div_ceil(2));
    if dim == 0 || dim > max_dim {
        return Err(Error::Resource(format!(
            "half-chain sector of {} sites exceeds the state cap {max_dim}",
            l + 1
        )));
    }
    let t_f = match r.raw("lightcone.t_f") {
        "auto" => l as f64,
        _ => r.get("lightcone.t_f")?,
    };
    let mut cfg = LightconeConfig::new(l, LightconeModel::Xxz { delta }, t_f);
    cfg.delta_t = r.get("lightcone.delta_t")?;
    cfg.n_it = r.get("lightcone.n_it")?;
    cfg.seed = r.seed;
    cfg.observable = Observable::Sz(r.get("lightcone.site")?);
    cfg.center_up = r.get("lightcone.center_up")?;
    cfg.propagator = match r.raw("lightcone.propagator") {
        "adaptive" => PropagatorConfig::adaptive(),
        "taylor" => PropagatorConfig::default(),
        "krylov" => PropagatorConfig::krylov(),
        other => {
            return Err(r.bad(
                "lightcone.propagator",
                format!("propagator must be adaptive, taylor or krylov, got {other:?}"),
            ))
        }
    };
    let est = match r.raw("lightcone.mode") {
        "sweep" => {
            cfg.validate()?;
            run_sampling(&cfg)?
        }
        "curve" => {
            let t_max: f64 = r.get("lightcone.t_max")?;
            cfg.t_f = 2.0 * cfg.delta_t;
            cfg.validate()?;
            run_curve(&cfg, t_max)?
        }
        other => return Err(r.bad("lightcone.mode", format!("mode must be sweep or curve, got {other:?}"))),
    };
    let _ = writeln!(log, "sampled {} times with N_it = {}", est.times.len(), est.n_it);
    Ok(vec![("lightcone.csv".into(), estimate_csv(&est, &cfg))])
}

fn xy_run(r: &Resolved, log: &mut String) -> Result<Vec<Artifact>> {
    let times = time_grid(r.get("ff.t_max")?, r.get("ff.dt")?);
    let up: bool = r.get("ff.center_up")?;
    let thr: f64 = r.get("ff.threshold")?;
    let n_ref: usize = r.get("ff.n_ref")?;
    let reference = central_curve(n_ref, up, &times)?;
    let mut curves = vec![("reference".to_string(), n_ref, reference.clone())];
    for n in r.list::<usize>("ff.sizes")? {
        curves.push(("open".into(), n, central_curve(n, up, &times)?));
    }
    let np: usize = r.get("ff.periodic")?;
    if np > 0 {
        let m = HoppingMatrix::periodic_for_particles(np, np / 2)?;
        curves.push(("periodic".into(), np, site_curve(&m, np / 2, up, &times)?));
    }
    let mut csv = String::from("t,chain,n,sz_center\n");
    for (kind, n, c) in &curves {
        for (t, v) in times.iter().zip(c) {
            let _ = writeln!(csv, "{t},{kind},{n},{v}");
        }
        if kind != "reference" {
            let dev = first_deviation(&times, c, &reference, thr);
            let _ = writeln!(log, "{kind} N={n}: first deviation {dev:?}");
        }
    }
    Ok(vec![("xy_exact.csv".into(), csv)])
}

fn circuit_run(r: &Resolved, log: &mut String) -> Result<Vec<Artifact>> {
    let n: usize = r.get("circuit.n")?;
    let max_dense: usize = r.get("guard.max_dense_dim")?;
    if n >= usize::BITS as usize || 1usize << n > max_dense {
        return Err(Error::Resource(format!("2^{n} exceeds the dense cap {max_dense}")));
    }
    let delta: f64 = r.get("circuit.delta")?;
    let t: f64 = r.get("circuit.t")?;
    let rounds: usize = r.get("circuit.rounds")?;
    let site: usize = r.get("circuit.site")?;
    let export: bool = r.get("circuit.export")?;
    let h = build_xxz(n, delta)?;
    let v = spin_wave_velocity(delta.clamp(-1.0, 1.0))?;
    let mut csv = String::from("kind,l_prime,l,n0,error,velocity,n,delta,t\n");
    let mut out = Vec::new();
    for lp in r.list::<usize>("circuit.l_primes")? {
        let cc = CornerConfig { l_prime: lp, t, v_lr: v };
        cc.validate()?;
        let block = build_block_circuit(&h, cc.l(), t)?;
        let corner = build_corner_circuit(&h, &cc)?;
        for (kind, c, n0) in [("block", &block, 0), ("corner", &corner, cc.n0())] {
            let err = circuit_error(&h, c)?;
            let vel = measure_circuit_velocity(&h, c, rounds, site, r.seed)?;
            let _ = writeln!(csv, "{kind},{lp},{},{n0},{err:e},{vel},{n},{delta},{t}", cc.l());
            let _ = writeln!(log, "{kind} l'={lp}: error {err:.3e}, velocity {vel}");
            if export {
                out.push((format!("gates_{kind}_lp{lp}.txt"), c.export()));
            }
        }
    }
    out.insert(0, ("circuits.csv".into(), csv));
    Ok(out)
}

fn beta_grid(r: &Resolved) -> Result<(Vec<f64>, f64)> {
    let step: f64 = r.get("qbp.beta_step")?;
    let max: f64 = r.get("qbp.beta_max")?;
    if !(step > 0.0 && max > 0.0) {
        return Err(arg("β grid needs positive step and maximum"));
    }
    let n = (max / step + 1e-9).floor() as usize;
    Ok(((1..=n).map(|k| k as f64 * step).collect(), step))
}

fn qbp_guard(r: &Resolved, l0: usize) -> Result<()> {
    let max_dense: usize = r.get("guard.max_dense_dim")?;
    if l0 >= usize::BITS as usize || 1usize << l0 > max_dense {
        return Err(Error::Resource(format!("window 2^{l0} exceeds the dense cap {max_dense}")));
    }
    Ok(())
}

fn load_or<F: FnOnce() -> Result<Vec<f64>>>(r: &Resolved, make: F) -> Result<Vec<f64>> {
    match r.raw("qbp.couplings_file") {
        "" => make(),
        path => parse_couplings(&std::fs::read_to_string(path)?),
    }
}

fn thermo_rows(
    h: &LocalHamiltonian,
    l0: usize,
    betas: &[f64],
    step: f64,
    observables: &[String],
    r: &Resolved,
    model: &str,
    tag: &str,
) -> Result<Vec<ThermoRow>> {
    let n = h.n_sites();
    let row = |beta: f64, obs: &str, value: f64| ThermoRow {
        beta,
        observable: obs.into(),
        value,
        l0,
        model: model.into(),
        tag: tag.into(),
    };
    let mut rows = Vec::new();
    let want = |o: &str| observables.iter().any(|x| x == o);
    if want("C") {
        let mut grid = vec![0.0];
        grid.extend_from_slice(betas);
        grid.push(betas.last().copied().unwrap_or(0.0) + step);
        let lnz: Vec<f64> = grid
            .iter()
            .map(|&b| ln_partition(h, &QbpConfig::new(l0, b)))
            .collect::<Result<_>>()?;
        for (i, &b) in betas.iter().enumerate() {
            rows.push(row(b, "C", specific_heat_from(lnz[i], lnz[i + 1], lnz[i + 2], b, step, n).value));
        }
    }
    if want("chi") {
        let h_step: f64 = r.get("qbp.h_step")?;
        for &b in betas {
            rows.push(row(b, "chi", uniform_susceptibility(h, l0, b, h_step)?.value));
        }
    }
    if want("chi_dimer") {
        let step: f64 = r.get("qbp.lambda_step")?;
        for &b in betas {
            rows.push(row(b, "chi_dimer_over_beta", dimer_susceptibility(h, l0, b, step)?.value));
        }
    }
    Ok(rows)
}

fn qbp_faf_run(r: &Resolved, log: &mut String) -> Result<Vec<Artifact>> {
    let n: usize = r.get("qbp.n")?;
    let l0: usize = r.get("qbp.l0")?;
    qbp_guard(r, l0)?;
    let p: f64 = r.get("qbp.p")?;
    let (j, jf, ja): (f64, f64, f64) = (r.get("qbp.j")?, r.get("qbp.j_f")?, r.get("qbp.j_a")?);
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let inter = load_or(r, || faf_couplings(n, jf, ja, p, &mut rng))?;
    let h = faf_from_couplings(n, j, &inter)?;
    let (betas, step) = beta_grid(r)?;
    let rows = thermo_rows(&h, l0, &betas, step, &["chi".into()], r, "faf", &format!("p={p}"))?;
    let _ = writeln!(log, "susceptibility on {} β points, N = {n}", betas.len());
    Ok(vec![
        ("qbp.csv".into(), thermo_csv(&rows)),
        ("couplings.txt".into(), write_couplings(&inter)),
    ])
}

fn qbp_frustrated_run(r: &Resolved, log: &mut String) -> Result<Vec<Artifact>> {
    let n: usize = r.get("qbp.n")?;
    let l0: usize = r.get("qbp.l0")?;
    qbp_guard(r, l0)?;
    let mode = match r.raw("qbp.disorder") {
        "pure" => Frustration::Pure,
        "disordered" => {
            let c: Vec<f64> = r.list("qbp.j_choices")?;
            if c.len() != 2 {
                return Err(r.bad("qbp.j_choices", "need exactly two coupling choices".into()));
            }
            Frustration::Disordered { choices: [c[0], c[1]] }
        }
        other => return Err(r.bad("qbp.disorder", format!("disorder must be pure or disordered, got {other:?}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let jc = load_or(r, || Ok(frustrated_couplings(n, mode, &mut rng)))?;
    let h = frustrated_from_couplings(n, &jc)?;
    let (betas, step) = beta_grid(r)?;
    let obs: Vec<String> = r.list("qbp.observables")?;
    for o in &obs {
        if !["C", "chi", "chi_dimer"].contains(&o.as_str()) {
            return Err(r.bad("qbp.observables", format!("unknown observable {o:?}")));
        }
    }
    let rows = thermo_rows(&h, l0, &betas, step, &obs, r, "frustrated", r.raw("qbp.disorder"))?;
    let _ = writeln!(log, "{} rows on {} β points, N = {n}", rows.len(), betas.len());
    Ok(vec![
        ("qbp.csv".into(), thermo_csv(&rows)),
        ("couplings.txt".into(), write_couplings(&jc)),
    ])
}

/// Execute a resolved run, returning its artifacts and log text.
pub fn execute(r: &Resolved) -> Result<(Vec<Artifact>, String)> {
    let mut log = String::new();
    let artifacts = match r.preset.as_str() {
        "xy-exact" => xy_run(r, &mut log)?,
        "circuit-verify" => circuit_run(r, &mut log)?,
        "qbp-faf" => qbp_faf_run(r, &mut log)?,
        "qbp-frustrated" => qbp_frustrated_run(r, &mut log)?,
        _ => lightcone_run(r, &mut log)?,
    };
    Ok((artifacts, log))
}

fn write_outputs(dir: &Path, r: &Resolved, workers: usize, artifacts: &[Artifact], log: &str, secs: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in artifacts {
        std::fs::write(dir.join(name), body)?;
    }
    let mut manifest = r.to_text();
    let names: Vec<&str> = artifacts.iter().map(|a| a.0.as_str()).collect();
    let _ = write!(
        manifest,
        "[run]\nworkers = {workers}\nwall_time_s = {secs:.3}\nversion = {}\noutputs = {}\n",
        env!("CARGO_PKG_VERSION"),
        names.join(",")
    );
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    std::fs::write(dir.join("run.log"), log)?;
    Ok(())
}

/// Exit status for an error: 2 parse or argument, 3 resource, 4 breakdown.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::Argument(_) => 2,
        Error::Resource(_) => 3,
        Error::Breakdown { .. } => 4,
        _ => 1,
    }
}

fn read_curve(args: &FitArgs) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(&args.csv)?;
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| arg("empty CSV"))?
        .1
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let t_col = col("t").ok_or_else(|| arg("CSV has no `t` column"))?;
    let v_col = match &args.column {
        Some(c) => col(c).ok_or_else(|| arg(format!("CSV has no column {c:?}")))?,
        None => col("mean")
            .or_else(|| col("sz_center"))
            .or_else(|| col("sz"))
            .unwrap_or(if t_col == 0 { 1 } else { 0 }),
    };
    let filters: Vec<(usize, String)> = args
        .select
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| arg(format!("select {s:?} is not COLUMN=VALUE")))?;
            Ok((col(k).ok_or_else(|| arg(format!("CSV has no column {k:?}")))?, v.to_string()))
        })
        .collect::<Result<_>>()?;
    let (mut ts, mut vs) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if filters.iter().any(|(c, v)| f.get(*c) != Some(&v.as_str())) {
            continue;
        }
        let num = |c: usize| -> Result<f64> {
            f.get(c).and_then(|s| s.parse().ok()).ok_or(Error::Parse {
                line: i + 1,
                column: c + 1,
                message: "expected a number".into(),
            })
        };
        ts.push(num(t_col)?);
        vs.push(num(v_col)?);
    }
    Ok((ts, vs))
}

fn pool(workers: Option<usize>) -> Result<(rayon::ThreadPool, usize)> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if n == 0 {
        return Err(arg("--workers must be at least 1"));
    }
    let p = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Resource(e.to_string()))?;
    Ok((p, n))
}

/// Run the parsed command, printing to stdout; returns the exit status.
pub fn dispatch(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::ListPresets => {
            for p in PRESETS {
                println!("{p}");
                for (k, v) in preset_defaults(p).expect("known preset") {
                    println!("  {k} = {v}");
                }
            }
            Ok(())
        }
        Command::ValidateConfig(args) => resolve(&args).map(|r| print!("{}", r.to_text())),
        Command::FitEnvelope(args) => read_curve(&args)
            .and_then(|(t, v)| fit_envelope(&t, &v, (args.t_min, args.t_max)))
            .map(|f| {
                println!(
                    "exponent = {}\nomega = {}\ntheta0 = {}\namplitude = {}\nn_extrema = {}",
                    f.exponent, f.omega, f.theta0, f.amplitude, f.n_extrema
                )
            }),
        Command::Run(args) => resolve(&args).and_then(|r| {
            let (pool, workers) = pool(args.workers)?;
            let start = Instant::now();
            let (artifacts, log) = pool.install(|| execute(&r))?;
            write_outputs(&args.out_dir, &r, workers, &artifacts, &log, start.elapsed().as_secs_f64())?;
            println!("wrote {} files to {}", artifacts.len() + 2, args.out_dir.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(config: Option<PathBuf>, preset: Option<&str>, overrides: &[&str]) -> RunArgs {
        RunArgs {
            config,
            preset: preset.map(String::from),
            seed: None,
            workers: Some(1),
            out_dir: PathBuf::from("out"),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parse_sections_and_positions() {
        let text = "preset = xy-exact # comment\nseed=4\n\n[ff]\n  n_ref = 61\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c["preset"].value, "xy-exact");
        assert_eq!(c["seed"].value, "4");
        let e = &c["ff.n_ref"];
        assert_eq!((e.value.as_str(), e.line, e.column, e.value_column), ("61", 5, 3, 11));
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse_config("a = 1\n[sec\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_config("a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 1, .. }));
        let err = parse_config("a = 1\na = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_config_is_parse_error() {
        let dir = std::env::temp_dir().join("spinlc-cli-empty");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("empty.cfg");
        std::fs::write(&p, "").unwrap();
        let e = resolve(&args(Some(p), None, &[])).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn resolution_order() {
        let dir = std::env::temp_dir().join("spinlc-cli-order");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.cfg");
        std::fs::write(&p, "preset = lightcone-delta0\nseed = 3\n[lightcone]\nl = 10\nn_it = 100\n").unwrap();
        let r = resolve(&args(Some(p.clone()), None, &["lightcone.n_it=7"])).unwrap();
        assert_eq!(r.seed, 3);
        assert_eq!(r.params["lightcone.l"], "10");
        assert_eq!(r.params["lightcone.n_it"], "7");
        let again = resolve(&args(Some(p), None, &["lightcone.n_it=7"])).unwrap();
        assert_eq!(r.to_text(), again.to_text());
        std::fs::write(dir.join("bad.cfg"), "preset = lightcone-delta0\n[lightcone]\nwidth = 3\n").unwrap();
        let e = resolve(&args(Some(dir.join("bad.cfg")), None, &[])).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, column: 1, .. }));
    }

    #[test]
    fn lightcone_preset_row_count() {
        let r = resolve(&args(None, Some("lightcone-delta0"), &["lightcone.l=10", "lightcone.n_it=20"])).unwrap();
        let (a, _) = execute(&r).unwrap();
        // header plus (l/2)/δt + 1 swept times
        assert_eq!(a[0].1.lines().count(), 1 + 5 * 4 + 1);
    }

    #[test]
    fn resource_guard() {
        let r = resolve(&args(None, Some("lightcone-delta1"), &["lightcone.l=30", "guard.max_state_dim=1000"])).unwrap();
        let e = execute(&r).unwrap_err();
        assert_eq!(exit_code(&e), 3);
        let r = resolve(&args(None, Some("circuit-verify"), &["circuit.n=14"])).unwrap();
        assert_eq!(exit_code(&execute(&r).unwrap_err()), 3);
    }

    #[test]
    fn value_errors_point_at_value() {
        let dir = std::env::temp_dir().join("spinlc-cli-value");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("v.cfg");
        std::fs::write(&p, "preset = qbp-faf\n[qbp]\nl0 = five\n").unwrap();
        let r = resolve(&args(Some(p), None, &[])).unwrap();
        let e = execute(&r).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, column: 6, .. }), "{e:?}");
    }

    #[test]
    fn every_preset_has_defaults() {
        for p in PRESETS {
            assert!(preset_defaults(p).unwrap().contains_key("guard.max_state_dim"));
        }
        assert!(preset_defaults("nope").is_err());
    }
}
