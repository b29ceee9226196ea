use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scalemix::io::{read_header, read_samples_binary, read_samples_csv};

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("scalemix-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalemix")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MODEL: &str = r#"
[covariance]
kind = "powered_exponential"
theta1 = 20.0
theta2 = 1.0
sigma0sq = 0.0
sigma1sq = 1.0
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("experiment = \"test\"\nout = \"out\"\n{body}\n{MODEL}")).unwrap();
    p
}

#[test]
fn simulate_small_grid() {
    let d = workdir("sim");
    write_config(&d, "seed = 3\n[sites]\ngrid = { nx = 2, ny = 2 }\n[mixture]\nkind = \"reference\"\n[simulate]\nn = 3");
    let o = run(&d, &["simulate", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_samples_csv(&d.join("out/samples.csv")).unwrap();
    assert_eq!((m.nrows(), m.ncols()), (3, 4));
    assert!(m.v_draws().is_some());
    let h = read_header(&d.join("out/samples.csv")).unwrap();
    assert_eq!(h.get("kind").unwrap(), "scalemix");
    assert_eq!(h.get("seed").unwrap(), 3);
    assert_eq!(h.get("config_hash").unwrap().as_str().unwrap().len(), 64);
}

#[test]
fn gaussian_flag_changes_kind() {
    let d = workdir("kind");
    write_config(
        &d,
        "seed = 3\n[sites]\ngrid = { nx = 2, ny = 2 }\n[mixture]\nkind = \"reference\"\n[simulate]\nn = 3\nfield = \"gaussian\"",
    );
    let o = run(&d, &["simulate", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_header(&d.join("out/samples.csv")).unwrap().get("kind").unwrap(), "gaussian");
    assert!(read_samples_csv(&d.join("out/samples.csv")).unwrap().v_draws().is_none());
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let d = workdir("bytes");
    write_config(&d, "[sites]\ngrid = { nx = 3, ny = 3 }\n[mixture]\nkind = \"reference\"\n[simulate]\nn = 20");
    for (seed, out, threads) in [("5", "a", "1"), ("5", "b", "3"), ("6", "c", "2")] {
        let o = run(&d, &["simulate", "--config", "run.toml", "--seed", seed, "--out", out, "--threads", threads]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/samples.csv"), read("b/samples.csv"));
    assert_ne!(read("a/samples.csv"), read("c/samples.csv"));
}

#[test]
fn missing_field_is_a_usage_error_naming_it() {
    let d = workdir("missing");
    write_config(&d, "seed = 1\n[sites]\ngrid = { nx = 2, ny = 2 }\n[mixture]\nkind = \"gaussian\"\n[simulate]\nfield = \"gaussian\"");
    let o = run(&d, &["simulate", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`n`"), "{}", stderr(&o));

    let o = run(&d, &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_seed_is_a_usage_error() {
    let d = workdir("seed");
    write_config(&d, "[sites]\ngrid = { nx = 2, ny = 2 }\n[mixture]\nkind = \"gaussian\"\n[simulate]\nn = 2");
    let o = run(&d, &["simulate", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn binary_output_round_trips() {
    let d = workdir("binary");
    write_config(
        &d,
        "seed = 9\n[sites]\ngrid = { nx = 3, ny = 2 }\n[mixture]\nkind = \"reference\"\n[simulate]\nn = 4\nformat = \"binary\"",
    );
    let o = run(&d, &["simulate", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(d.join("out/samples.smx")).unwrap();
    assert_eq!(&bytes[..4], b"SMX1");
    assert_eq!(bytes.len(), 12 + 8 * 4 * 6);
    let m = read_samples_binary(&d.join("out/samples.smx")).unwrap();
    assert_eq!((m.nrows(), m.ncols()), (4, 6));
    assert!(fs::read_to_string(d.join("out/samples.smx.json")).unwrap().contains("\"seed\": 9"));
}

#[test]
fn estimate_pipeline_smoke() {
    let d = workdir("estimate");
    write_config(
        &d,
        "seed = 2\n[sites]\ngrid = { nx = 5, ny = 1, spacing = 5.0 }\n[mixture]\nkind = \"reference\"\n[simulate]\nn = 100\n\
         [estimate]\ndata = \"out/samples.csv\"\nk = 4\ns = 2\nrestarts = 2",
    );
    assert!(run(&d, &["simulate", "--config", "run.toml"]).status.success());
    let o = run(&d, &["estimate", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/estimate.json")).unwrap()).unwrap();
    assert_eq!(json["result"]["m_hat"].as_array().unwrap().len(), 4);
    assert!((json["result"]["m_hat"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(d.join("out/moments.csv").exists() && d.join("out/mixture.csv").exists());
}

#[test]
fn malformed_csv_reports_line_number() {
    let d = workdir("malformed");
    fs::write(d.join("data.csv"), "s0,s1\n1.0,2.0\n3.0,oops\n").unwrap();
    write_config(&d, "seed = 1\n[sites]\ngrid = { nx = 2, ny = 1 }\n[estimate]\ndata = \"data.csv\"");
    let o = run(&d, &["estimate", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("data.csv:3"), "{}", stderr(&o));
}

fn interp_config(d: &Path, mixture: &str, levels: &str) {
    fs::write(d.join("obs.csv"), "site,value\n0,0.4\n1,-0.2\n3,1.1\n").unwrap();
    write_config(
        d,
        &format!(
            "seed = 1\n[sites]\ngrid = {{ nx = 2, ny = 2, spacing = 6.0 }}\n[mixture]\nkind = \"{mixture}\"\n\
             [interpolate]\nobservations = \"obs.csv\"\ntarget = [3.0, 3.0]\n{levels}"
        ),
    );
}

fn table(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect()
}

#[test]
fn interpolate_gaussian_matches_closed_form() {
    let d = workdir("interp-gauss");
    interp_config(&d, "gaussian", "grid = { from = -2.0, to = 2.5, steps = 10 }");
    let o = run(&d, &["interpolate", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let h = read_header(&d.join("out/interpolate.csv")).unwrap();
    let (m, s) = (h.get("kriging_mean").unwrap().as_f64().unwrap(), h.get("kriging_sd").unwrap().as_f64().unwrap());
    // Independent kriging: target (3,3) against sites (0,0), (6,0), (6,6).
    let c = |a: [f64; 2], b: [f64; 2]| (-((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / 20.0).exp();
    let obs = [[0.0, 0.0], [6.0, 0.0], [6.0, 6.0]];
    let sig = nalgebra::DMatrix::from_fn(3, 3, |i, j| c(obs[i], obs[j]));
    let k = nalgebra::DVector::from_fn(3, |i, _| c(obs[i], [3.0, 3.0]));
    let w = sig.try_inverse().unwrap() * &k;
    let x = nalgebra::DVector::from_vec(vec![0.4, -0.2, 1.1]);
    assert!((w.dot(&x) - m).abs() < 1e-12);
    assert!(((1.0 - w.dot(&k)).sqrt() - s).abs() < 1e-12);
    for r in table(&d.join("out/interpolate.csv")) {
        assert!((r[1] - r[2]).abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn interpolate_output_is_monotone() {
    let d = workdir("interp-mono");
    interp_config(&d, "reference", "grid = { from = -3.0, to = 4.0, steps = 71 }");
    let o = run(&d, &["interpolate", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = table(&d.join("out/interpolate.csv"));
    assert_eq!(rows.len(), 71);
    assert!(rows.windows(2).all(|w| w[1][1] >= w[0][1]));
}

#[test]
fn interpolate_far_outside_the_strip_fails_cleanly() {
    let d = workdir("interp-strip");
    interp_config(&d, "reference", "levels = [1e6]");
    let o = run(&d, &["interpolate", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("numerical failure"), "{}", stderr(&o));
}

#[test]
fn condsim_end_to_end() {
    let d = workdir("condsim");
    fs::write(d.join("obs.csv"), "site,value\n0,0.4\n1,-0.2\n3,1.1\n").unwrap();
    fs::write(d.join("targets.csv"), "x,y\n3,3\n6,0\n").unwrap();
    write_config(
        &d,
        "seed = 4\n[sites]\ngrid = { nx = 2, ny = 2, spacing = 6.0 }\n[mixture]\nkind = \"reference\"\n\
         [condsim]\nobservations = \"obs.csv\"\ntargets = \"targets.csv\"\nb = 300\nmcmc = { burn_in = 100, thin = 2 }",
    );
    let o = run(&d, &["condsim", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_samples_csv(&d.join("out/condsim.csv")).unwrap();
    assert_eq!((m.nrows(), m.ncols()), (300, 2));
    // The second target is the observed site (6,0).
    assert!(m.column(1).iter().all(|v| (v + 0.2).abs() < 1e-12));
    let chain = read_header(&d.join("out/vchain.csv")).unwrap();
    assert!(chain.get("ess").unwrap().as_f64().unwrap() > 10.0);
}

#[test]
fn diagnose_counts_with_band() {
    let d = workdir("diagnose");
    write_config(
        &d,
        "seed = 5\n[sites]\ngrid = { nx = 3, ny = 3 }\n[mixture]\nkind = \"reference\"\n[simulate]\nn = 200\n\
         [diagnose]\ndata = \"out/samples.csv\"\nstatistic = \"count\"\nthresholds = [1.28, 2.5]\nbootstrap_reps = 40",
    );
    assert!(run(&d, &["simulate", "--config", "run.toml"]).status.success());
    let o = run(&d, &["diagnose", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = table(&d.join("out/diagnose.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r[2] <= r[3]);
    }
    assert_eq!(read_header(&d.join("out/diagnose.csv")).unwrap().get("bootstrap_reps").unwrap(), 40);
}

#[test]
fn reproduce_refuses_grids_above_the_cap() {
    let d = workdir("cap");
    write_config(&d, "seed = 1\n[reproduce]\nside = 300");
    let o = run(&d, &["reproduce-synthetic", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--grid-cap"), "{}", stderr(&o));
}

#[test]
fn reproduce_small_bundle() {
    let d = workdir("bundle");
    write_config(
        &d,
        "seed = 1\n[reproduce]\nside = 12\nn = 60\nestimation_runs = 1\nscalings = [2.0]\ncounts = [2]\npercentiles = [0.9, 0.99]",
    );
    let o = run(&d, &["reproduce-synthetic", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["sum_quantiles.csv", "threshold_counts.csv", "moments.csv", "conditional_curves.csv", "stations.csv"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    assert_eq!(table(&d.join("out/conditional_curves.csv")).len(), 2);
    assert_eq!(table(&d.join("out/threshold_counts.csv")).len(), 60);
}
