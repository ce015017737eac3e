use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spinlc"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("spinlc-it-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn empty_config_exits_2() {
    let d = scratch("empty");
    let cfg = d.join("empty.cfg");
    std::fs::write(&cfg, "").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn resource_guard_exits_3() {
    let out = bin()
        .args(["run", "--preset", "lightcone-delta1", "--override", "lightcone.l=40", "--out-dir"])
        .arg(scratch("guard"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn list_and_validate() {
    let out = bin().arg("list-presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for p in ["xy-exact", "rms-fluctuations", "qbp-frustrated", "circuit-verify"] {
        assert!(text.contains(p));
    }
    let out = bin()
        .args(["validate-config", "--preset", "qbp-faf", "--seed", "9"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 9") && text.contains("[qbp]") && text.contains("beta_step = 0.25"));
}

#[test]
fn lightcone_run_is_deterministic() {
    let run = |dir: &PathBuf, workers: &str| {
        let out = bin()
            .args(["run", "--preset", "lightcone-delta0", "--seed", "5", "--workers", workers])
            .args(["--override", "lightcone.l=6", "--override", "lightcone.n_it=40", "--out-dir"])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(dir.join("lightcone.csv")).unwrap()
    };
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    let ca = run(&a, "1");
    let cb = run(&b, "2");
    assert_eq!(ca, cb);
    // header plus (l/2)/δt + 1 rows
    assert_eq!(ca.lines().count(), 1 + 13);
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    for key in ["preset = lightcone-delta0", "seed = 5", "n_it = 40", "wall_time_s", "version"] {
        assert!(manifest.contains(key), "{key}");
    }
    assert!(a.join("run.log").exists());
}

#[test]
fn qbp_faf_beta_grid() {
    let d = scratch("faf");
    let out = bin()
        .args(["run", "--preset", "qbp-faf", "--override", "qbp.n=60", "--override", "qbp.beta_max=2", "--out-dir"])
        .arg(&d)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("qbp.csv")).unwrap();
    let betas: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(betas, vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]);
    assert!(csv.lines().nth(1).unwrap().contains(",chi,"));
}

#[test]
fn fit_envelope_synthetic() {
    let d = scratch("fit");
    let mut csv = String::from("t,mean\n");
    for k in 1..=160 {
        let t = 0.25 * k as f64;
        let v = t.powf(-0.5) * (2.0 * t + 0.75 * std::f64::consts::PI).cos();
        csv.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(d.join("c.csv"), csv).unwrap();
    let out = bin()
        .args(["fit-envelope", "--csv"])
        .arg(d.join("c.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let get = |k: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k} = ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((get("exponent") - 0.5).abs() < 0.02);
    assert!((get("omega") - 2.0).abs() < 0.02);
    assert!((get("theta0") - 0.75 * std::f64::consts::PI).abs() < 0.1);
}

#[test]
fn fit_envelope_too_few_extrema() {
    let d = scratch("fit-short");
    std::fs::write(d.join("c.csv"), "t,mean\n5,0.1\n6,0.2\n7,0.3\n").unwrap();
    let out = bin().args(["fit-envelope", "--csv"]).arg(d.join("c.csv")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
