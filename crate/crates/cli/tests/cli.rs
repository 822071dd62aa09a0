use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &[&str] = &[
    "--set",
    "phantom.preset=crossing_toy",
    "--set",
    "noise.sigma=0.5",
    "--set",
    "smoothing.isotropic=[0.01]",
    "--set",
    "smoothing.anisotropic=[[0.01, 0.01]]",
];

fn dtsmooth(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtsmooth"));
    cmd.args(args).env_remove("DTSMOOTH_OUT");
    cmd
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut full = args.to_vec();
    full.extend(["--out", out.to_str().unwrap()]);
    let o = dtsmooth(&full).output().unwrap();
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn phantom_has_every_voxel_and_reruns_identically() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    run_in(a.path(), &["phantom"]);
    run_in(b.path(), &["phantom"]);
    let field = fs::read_to_string(a.path().join("phantom_field.csv")).unwrap();
    // Provenance comment, header, then 128 * 128 * 4 voxels.
    assert_eq!(field.lines().count(), 65_538);
    let rows = data_rows(&a.path().join("phantom_field.csv"));
    let spot = rows.iter().find(|r| r[..3] == ["60", "27", "0"]).unwrap();
    let values: Vec<f64> = spot[3..].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values, [0.25, 16.0, 0.25, 0.0, 0.0, 0.0]);
    for name in ["phantom_field.csv", "phantom_mask.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn run_output_does_not_depend_on_thread_count() {
    let one = TempDir::new().unwrap();
    let three = TempDir::new().unwrap();
    let mut args = vec!["run", "--threads", "1"];
    args.extend(TOY);
    run_in(one.path(), &args);
    args[2] = "3";
    run_in(three.path(), &args);
    let a = sorted_files(one.path());
    let b = sorted_files(three.path());
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn two_seeds_give_two_report_blocks() {
    let out = TempDir::new().unwrap();
    let mut args = vec!["run", "--set", "seeds=[1, 2]"];
    args.extend(TOY);
    run_in(out.path(), &args);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["seed"], 1);
    assert_eq!(runs[1]["seed"], 2);
    assert_eq!(report["config"]["seeds"], serde_json::json!([1, 2]));
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    for seed in [1, 2] {
        let summary = out.path().join(format!("summary_seed{seed}.csv"));
        let text = fs::read_to_string(&summary).unwrap();
        assert!(text.starts_with(&format!("# config_hash={} seed={seed}", report["config_hash"].as_str().unwrap())));
        // Baseline plus 3 metrics x 2 schemes, 8 regions each.
        assert_eq!(data_rows(&summary).len(), 7 * 8);
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let out = TempDir::new().unwrap();
    let o = out.path().to_str().unwrap();
    let cases: &[&[&str]] = &[
        &["bogus"],
        &["phantom", "--no-such-flag"],
        &["phantom", "--set", "noise.bogus=1"],
        &["phantom", "--set", "noise.sigma=-1"],
        &["phantom", "--set", "seeds=[]"],
        &["phantom", "--config", "/nonexistent/dtsmooth.toml"],
        &["fit", "--set", "noise.model=spectral"],
        &["weights", "--set", "weights.voxel=[500, 0, 0]"],
    ];
    for args in cases {
        let mut full = args.to_vec();
        full.extend(["--out", o]);
        let status = dtsmooth(&full).output().unwrap().status;
        assert_eq!(status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn failed_checks_exit_with_1() {
    let out = TempDir::new().unwrap();
    // Two replicates cannot estimate a variance to 10%.
    let o = dtsmooth(&[
        "verify",
        "--suite",
        "rician",
        "--set",
        "verify.mle_replicates=2",
        "--set",
        "verify.signal_bias_draws=10000",
        "--out",
        out.path().to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL mle_variance"));
    assert!(out.path().join("verify_rician.csv").exists());
}

#[test]
fn weights_reproduce_neighborhood_sizes() {
    let out = TempDir::new().unwrap();
    let o = run_in(out.path(), &["weights"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("entropy"));
    let rows = data_rows(&out.path().join("weight_profile.csv"));
    let sizes: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(sizes, ["5", "23", "147", "147"]);
    let entropy: Vec<f64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(entropy.windows(2).all(|w| w[0] < w[1]), "{entropy:?}");
}

#[test]
fn spectral_run_reports_monotone_entropy() {
    let out = TempDir::new().unwrap();
    run_in(
        out.path(),
        &[
            "run",
            "--set",
            "noise.model=spectral",
            "--set",
            "noise.nu=50",
            "--set",
            "noise.eta=0.1",
            "--set",
            "phantom.preset=crossing_toy",
            "--set",
            "smoothing.metrics=[\"log_euclidean\"]",
            "--set",
            "smoothing.anisotropic=[]",
        ],
    );
    let rows = data_rows(&out.path().join("weight_profile.csv"));
    assert_eq!(rows.len(), 4);
    let entropy: Vec<f64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(entropy.windows(2).all(|w| w[0] < w[1]), "{entropy:?}");
    let summary = fs::read_to_string(out.path().join("summary_seed1.csv")).unwrap();
    assert!(summary.contains(",none,log_euclidean,isotropic,0.035,"));
}

#[test]
fn fitting_a_written_dwi_file_matches_the_simulated_fit() {
    let sim = TempDir::new().unwrap();
    let file = TempDir::new().unwrap();
    run_in(sim.path(), &["noise", "--set", "phantom.preset=crossing_toy"]);
    run_in(sim.path(), &["fit", "--set", "phantom.preset=crossing_toy"]);
    let dwi = sim.path().join("dwi_seed1.csv");
    run_in(
        file.path(),
        &["fit", "--set", "phantom.preset=crossing_toy", "--input", dwi.to_str().unwrap()],
    );
    for name in ["fitted_nonlinear_seed1.csv", "fit_diagnostics_nonlinear_seed1.csv"] {
        assert_eq!(
            fs::read(sim.path().join(name)).unwrap(),
            fs::read(file.path().join(name)).unwrap(),
            "{name}"
        );
    }

    let fitted = file.path().join("fitted_nonlinear_seed1.csv");
    let mut args = vec!["smooth", "--input", fitted.to_str().unwrap()];
    args.extend(TOY);
    run_in(file.path(), &args);
    let smoothed: Vec<PathBuf> = sorted_files(file.path())
        .into_iter()
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("smoothed_"))
        .collect();
    assert_eq!(smoothed.len(), 6);
    assert!(file.path().join("smoothed_affine_anisotropic_0.01-0.01_seed1.csv").exists());
}

#[test]
fn verify_perturbation_suite_passes() {
    let out = TempDir::new().unwrap();
    let o = run_in(out.path(), &["verify", "--suite", "perturbation"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("perturbation: 99/99 checks pass"));
    let rows = data_rows(&out.path().join("verify_perturbation.csv"));
    assert_eq!(rows.len(), 99);
    assert!(rows.iter().all(|r| r.last().unwrap() == "true"));
    assert!(!out.path().join("verify_rician.csv").exists());
}

#[test]
fn output_directory_precedence() {
    let root = TempDir::new().unwrap();
    let env_dir = root.path().join("from_env");
    let cfg_path = root.path().join("exp.toml");
    fs::write(&cfg_path, "[output]\ndir = \"from_config\"\n\n[phantom]\npreset = \"crossing_toy\"\n").unwrap();
    let status = |args: &[&str]| {
        dtsmooth(args)
            .env("DTSMOOTH_OUT", &env_dir)
            .current_dir(root.path())
            .output()
            .unwrap()
            .status
    };

    // Environment only.
    assert!(status(&["phantom", "--set", "phantom.preset=crossing_toy"]).success());
    assert!(env_dir.join("phantom_field.csv").exists());
    // The config beats the environment; its relative path is anchored at the config file.
    assert!(status(&["phantom", "--config", cfg_path.to_str().unwrap()]).success());
    assert!(root.path().join("from_config/phantom_field.csv").exists());
    // The flag beats both.
    let flag = root.path().join("from_flag");
    assert!(status(&["phantom", "--config", cfg_path.to_str().unwrap(), "--out", flag.to_str().unwrap()]).success());
    assert!(flag.join("phantom_field.csv").exists());
}

#[test]
fn seed_flag_changes_noise_and_provenance() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    run_in(a.path(), &["noise", "--set", "phantom.preset=crossing_toy", "--seed", "4"]);
    run_in(b.path(), &["noise", "--set", "phantom.preset=crossing_toy", "--seed", "5"]);
    let x = fs::read_to_string(a.path().join("dwi_seed4.csv")).unwrap();
    let y = fs::read_to_string(b.path().join("dwi_seed5.csv")).unwrap();
    assert_ne!(x.lines().nth(2), y.lines().nth(2));
    let hash = |s: &str| s.lines().next().unwrap().split(' ').nth(1).unwrap().to_string();
    // The seed list is part of the config, so the hashes differ with the seed.
    assert_ne!(hash(&x), hash(&y));
}
