use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dtsmooth::experiment::{Estimate, Experiment, ExperimentConfig, NoisyInput, SeedReport};
use dtsmooth::io::{self, Provenance, VerifyRow};
use dtsmooth::rng::RngSpec;
use dtsmooth::smoothing::Scheme;
use dtsmooth::verify;
use dtsmooth::Error;
use serde::Serialize;

use crate::config::{config_hash, load};
use crate::{Common, Failure};

pub const OUT_ENV: &str = "DTSMOOTH_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Perturbation,
    Regression,
    Rician,
}

impl Suite {
    fn name(&self) -> &'static str {
        match self {
            Suite::Perturbation => "perturbation",
            Suite::Regression => "regression",
            Suite::Rician => "rician",
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Fit-failure limits and bad computed inputs are check failures; anything
/// else that escapes the library is reported the same way.
fn failed(e: Error) -> Failure {
    Failure::Check(e.to_string())
}

pub struct Context {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self, Failure> {
        if common.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(common.threads)
                .build_global()
                .map_err(usage)?;
        }
        let cfg = load(common.config.as_deref(), &common.overrides, common.seed).map_err(Failure::Usage)?;
        let out = common
            .out
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
        Ok(Context {
            hash: config_hash(&cfg),
            cfg,
            out,
        })
    }

    fn prov(&self, seed: u64) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            seed,
        }
    }

    fn master_seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn experiment(&self) -> Result<Experiment, Failure> {
        Experiment::new(self.cfg.clone()).map_err(usage)
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> dtsmooth::Result<()>) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(failed)?;
        w.flush().map_err(|e| failed(e.into()))?;
        Ok(path)
    }

    fn single_seed_input(&self, input: &Path) -> Result<(u64, File), Failure> {
        if self.cfg.seeds.len() != 1 {
            return Err(usage("--input takes a single seed (use --seed)"));
        }
        let file = File::open(input).map_err(|e| usage(format!("cannot read {}: {e}", input.display())))?;
        Ok((self.master_seed(), file))
    }

    pub fn phantom(&self) -> Result<(), Failure> {
        let exp = self.experiment()?;
        let prov = self.prov(self.master_seed());
        self.write("phantom_field.csv", |w| io::write_field(w, &exp.truth, Some(&prov)))?;
        self.write("phantom_mask.csv", |w| io::write_mask(w, &exp.mask, Some(&prov)))?;
        println!("phantom {:?}: {} voxels -> {}", exp.truth.grid.dims, exp.truth.len(), self.out.display());
        Ok(())
    }

    pub fn noise(&self) -> Result<(), Failure> {
        let exp = self.experiment()?;
        if let Some(scheme) = &exp.scheme {
            let prov = self.prov(self.master_seed());
            self.write("scheme.csv", |w| io::write_scheme(w, scheme.directions(), Some(&prov)))?;
        }
        for &seed in &self.cfg.seeds {
            let prov = self.prov(seed);
            match exp.noisy(seed).map_err(failed)? {
                NoisyInput::Dwi(vol) => {
                    let scheme = exp.scheme.as_ref().expect("rician model has a scheme");
                    self.write(&format!("dwi_seed{seed}.csv"), |w| io::write_dwi(w, &vol, scheme, Some(&prov)))?;
                }
                NoisyInput::Field { field, redraws } => {
                    self.write(&format!("noisy_field_seed{seed}.csv"), |w| {
                        io::write_field(w, &field, Some(&prov))
                    })?;
                    println!("seed {seed}: {redraws} rotation redraws");
                }
            }
        }
        Ok(())
    }

    pub fn fit(&self, input: Option<&Path>) -> Result<(), Failure> {
        let exp = self.experiment()?;
        let Some(scheme) = exp.scheme.as_ref() else {
            return Err(usage("fitting needs the rician noise model"));
        };
        let volumes = match input {
            Some(path) => {
                let (seed, file) = self.single_seed_input(path)?;
                let vol = io::read_dwi(file, self.cfg.phantom.spacing, scheme, self.cfg.noise.s0).map_err(usage)?;
                vec![(seed, vol)]
            }
            None => self
                .cfg
                .seeds
                .iter()
                .map(|&s| match exp.noisy(s).map_err(failed)? {
                    NoisyInput::Dwi(v) => Ok((s, v)),
                    NoisyInput::Field { .. } => unreachable!("rician model yields signals"),
                })
                .collect::<Result<_, _>>()?,
        };
        let method = self.cfg.fit.method.name();
        for (seed, vol) in volumes {
            let fitted = exp.fit(&vol).map_err(failed)?;
            let prov = self.prov(seed);
            self.write(&format!("fitted_{method}_seed{seed}.csv"), |w| {
                io::write_field(w, &fitted.field, Some(&prov))
            })?;
            self.write(&format!("fit_diagnostics_{method}_seed{seed}.csv"), |w| {
                io::write_diagnostics(w, &fitted, Some(&prov))
            })?;
            println!(
                "seed {seed}: {} non-converged, {} non-SPD, {} clamped signals",
                fitted.non_converged(),
                fitted.non_spd(),
                fitted.clamped()
            );
        }
        Ok(())
    }

    pub fn smooth(&self, input: Option<&Path>) -> Result<(), Failure> {
        let exp = self.experiment()?;
        let estimates: Vec<(u64, Estimate)> = match input {
            Some(path) => {
                let (seed, file) = self.single_seed_input(path)?;
                let field = io::read_field(file, self.cfg.phantom.spacing).map_err(usage)?;
                let est = exp
                    .estimate(NoisyInput::Field { field, redraws: 0 })
                    .map_err(failed)?;
                vec![(seed, est)]
            }
            None => self
                .cfg
                .seeds
                .iter()
                .map(|&s| Ok((s, exp.estimate(exp.noisy(s).map_err(failed)?).map_err(failed)?)))
                .collect::<Result<_, _>>()?,
        };
        for (seed, est) in &estimates {
            let prov = self.prov(*seed);
            for job in self.cfg.smoothing.jobs() {
                let (field, fallbacks) = exp.smooth(est, &job).map_err(failed)?;
                let h = match job.scheme {
                    Scheme::Isotropic { h } => format!("{h}"),
                    Scheme::Anisotropic { h_iso, h_aniso } => format!("{h_iso}-{h_aniso}"),
                };
                let name = format!("smoothed_{}_{}_{h}_seed{seed}.csv", job.metric.name(), job.scheme.name());
                self.write(&name, |w| io::write_field(w, &field, Some(&prov)))?;
                if fallbacks > 0 {
                    println!("{name}: {fallbacks} isotropic fallbacks");
                }
            }
        }
        Ok(())
    }

    pub fn run(&self) -> Result<(), Failure> {
        let exp = self.experiment()?;
        let mut runs = Vec::new();
        for &seed in &self.cfg.seeds {
            let report = exp.run_seed(seed).map_err(failed)?;
            let prov = self.prov(seed);
            self.write(&format!("summary_seed{seed}.csv"), |w| {
                io::write_summary(w, &report.rows(), Some(&prov))
            })?;
            self.write(&format!("plot_seed{seed}.csv"), |w| {
                io::write_plot_data(w, &report.plot_rows(), Some(&prov))
            })?;
            print_seed(&report);
            runs.push(report);
        }
        let profiles = exp.weight_profiles().map_err(usage)?;
        let prov = self.prov(self.master_seed());
        self.write("weight_profile.csv", |w| io::write_weight_profiles(w, &profiles, Some(&prov)))?;
        let report = RunReport {
            config_hash: &self.hash,
            seeds: &self.cfg.seeds,
            notes: vec!["region `bands` includes bands_crossing voxels"],
            config: &self.cfg,
            runs: &runs,
        };
        self.write("report.json", |w| {
            serde_json::to_writer_pretty(&mut *w, &report).map_err(|e| Error::InvalidInput(e.to_string()))?;
            writeln!(w)?;
            Ok(())
        })?;
        Ok(())
    }

    pub fn verify(&self, suites: &[Suite]) -> Result<(), Failure> {
        let all = [Suite::Perturbation, Suite::Regression, Suite::Rician];
        let chosen: Vec<Suite> = all.into_iter().filter(|s| suites.is_empty() || suites.contains(s)).collect();
        let seed = self.master_seed();
        let rng = RngSpec::new(seed);
        let v = &self.cfg.verify;
        let mut failures = 0;
        for suite in chosen {
            let rows: Vec<VerifyRow> = match suite {
                Suite::Perturbation => verify::perturbation_suite(v, &rng.derive(100)),
                Suite::Regression => verify::regression_suite(v, &rng.derive(200)),
                Suite::Rician => verify::rician_suite(v, &rng.derive(300)),
            }
            .map_err(failed)?;
            let prov = self.prov(seed);
            self.write(&format!("verify_{}.csv", suite.name()), |w| {
                io::write_verification(w, &rows, Some(&prov))
            })?;
            let bad: Vec<&VerifyRow> = rows.iter().filter(|r| !r.pass).collect();
            println!("{}: {}/{} checks pass", suite.name(), rows.len() - bad.len(), rows.len());
            for r in &bad {
                println!(
                    "  FAIL {} {} {} {} t={} residual={:e}",
                    r.proposition, r.case, r.base, r.style, r.t, r.residual
                );
            }
            failures += bad.len();
        }
        if failures > 0 {
            return Err(Failure::Check(format!("{failures} verification checks failed")));
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<(), Failure> {
        let exp = self.experiment()?;
        let profiles = exp.weight_profiles().map_err(usage)?;
        let prov = self.prov(self.master_seed());
        self.write("weight_profile.csv", |w| io::write_weight_profiles(w, &profiles, Some(&prov)))?;
        println!("{:>8} {:>5} {:>4} {:>10} {:>10} {:>10} {:>8}", "h", "size", "n99", "min", "median", "max", "entropy");
        for (h, p) in &profiles {
            println!(
                "{h:>8} {:>5} {:>4} {:>10.6} {:>10.6} {:>10.6} {:>8.4}",
                p.size, p.n99, p.min, p.median, p.max, p.entropy
            );
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RunReport<'a> {
    config_hash: &'a str,
    seeds: &'a [u64],
    notes: Vec<&'static str>,
    config: &'a ExperimentConfig,
    runs: &'a [SeedReport],
}

fn print_seed(r: &SeedReport) {
    let d = &r.diagnostics;
    print!("seed {} ({}):", r.seed, r.method);
    for row in r.baseline.iter().take(3) {
        print!(" {} {:.6}", row.region.name(), row.median);
    }
    println!(
        " | non-converged {} non-SPD {} redraws {}",
        d.non_converged, d.non_spd, d.spectral_redraws
    );
}
