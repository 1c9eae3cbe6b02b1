//! The four subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context as _, Result};
use rtsom::experiments::{field_to_pgm, generate_synthetic_data, relative_l2_error, restrict_data, ExperimentSpec};
use rtsom::medium::{field_to_csv, Coefficient};
use rtsom::operators::Factorization;
use rtsom::recon::{reconstruct, Algorithm, OneStepStart, ReconResult};
use rtsom::spectral::{compute_svd_with, load_cache, meta_hash, save_cache, MetaHash, SvdCache};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::manifest::Manifest;

/// Reconstruction asked for a cache that does not exist (exit code 4).
#[derive(Debug)]
pub struct CacheMissing(pub PathBuf);

impl std::fmt::Display for CacheMissing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no SVD cache at {}; run precompute-svd", self.0.display())
    }
}

impl std::error::Error for CacheMissing {}

/// Parsed configuration plus the paths derived from it.
pub struct Context {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub out: PathBuf,
}

impl Context {
    fn spec(&self) -> ExperimentSpec {
        self.config.experiment()
    }

    fn data_path(&self, q: usize, gamma: f64) -> PathBuf {
        self.out.join("data").join(format!("J_q{q}_noise{gamma}.csv"))
    }

    fn results_dir(&self) -> PathBuf {
        self.out.join("results").join(&self.config.name)
    }

    fn level_dir(&self, algorithm: Algorithm, gamma: f64) -> PathBuf {
        self.results_dir().join(algorithm.name()).join(format!("noise{gamma}"))
    }

    fn manifest_path(&self, label: &str) -> PathBuf {
        self.out.join("manifests").join(format!("{label}.json"))
    }

    fn manifest(&self, command: &str) -> Result<Manifest> {
        let mut m = Manifest::new(command, &self.config_sha256, self.config.noise.seed);
        m.input(&self.config_path)?;
        Ok(m)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn column_csv(values: &[f64]) -> String {
    values.iter().fold(String::new(), |mut s, v| {
        let _ = writeln!(s, "{v:.16e}");
        s
    })
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {} ({e}); run gen-data first", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!(ConfigError(format!("{}:{}: {e}", path.display(), i + 1))))
        })
        .collect()
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let spec = ctx.spec();
    let start = Instant::now();
    let sets = generate_synthetic_data(&spec)?;
    let mut manifest = ctx.manifest("gen-data")?;
    for set in &sets {
        for (q, j) in set.data.iter().enumerate() {
            let path = ctx.data_path(q, set.noise_percent);
            write_file(&path, column_csv(j).as_bytes())?;
            manifest.output(&path)?;
        }
    }
    manifest.write(&ctx.manifest_path(&format!("gen-data-{}", ctx.config.name)))?;
    log::info!(
        "wrote {} data files in {:.1}s",
        sets.len() * spec.n_sources,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

struct Inversion {
    spec: ExperimentSpec,
    hash: MetaHash,
    truth: rtsom::medium::OpticalField,
}

fn inversion(ctx: &Context) -> Result<Inversion> {
    let spec = ctx.spec();
    let mesh = spec.inversion_mesh()?;
    let ang = spec.inversion_angular()?;
    let truth = spec.truth()?;
    let known = match spec.mode {
        Coefficient::Absorption => &truth.sigma_s,
        Coefficient::Scattering => &truth.sigma_a,
    };
    let hash = meta_hash(&mesh, &ang, spec.mode, known);
    Ok(Inversion { spec, hash, truth })
}

fn factorization(inv: &Inversion) -> Result<Factorization> {
    Ok(Factorization::new(
        inv.spec.mode,
        &inv.truth,
        &inv.spec.inversion_mesh()?,
        &inv.spec.inversion_angular()?,
    )?)
}

fn singular_values_csv(cache: &SvdCache) -> String {
    let mut s = String::from("index,mu\n");
    for (i, mu) in cache.mu.iter().take(cache.rank()).enumerate() {
        let _ = writeln!(s, "{},{mu:.16e}", i + 1);
    }
    s
}

pub fn precompute_svd(ctx: &Context) -> Result<()> {
    let inv = inversion(ctx)?;
    let path = ctx.config.cache_path();
    let existing = if path.exists() {
        match load_cache(&path, Some(&inv.hash)) {
            Ok(c) => Some(c),
            Err(e) => {
                log::info!("cache miss ({e}); recomputing");
                None
            }
        }
    } else {
        None
    };
    let cache = match existing {
        Some(c) => {
            log::info!("cache hit: {} matches {}", path.display(), c.hex_hash());
            c
        }
        None => {
            let start = Instant::now();
            let fact = factorization(&inv)?;
            let cache = compute_svd_with(&fact.a, inv.hash, ctx.config.svd.method)?;
            save_cache(&cache, &path)?;
            log::info!(
                "computed SVD of {}x{} in {:.1}s, rank {}",
                cache.n_detectors(),
                cache.dim(),
                start.elapsed().as_secs_f64(),
                cache.rank()
            );
            cache
        }
    };
    let csv = singular_values_csv(&cache);
    print!("{csv}");
    let sv_path = ctx.results_dir().join("singular_values.csv");
    write_file(&sv_path, csv.as_bytes())?;
    let mut manifest = ctx.manifest("precompute-svd")?;
    manifest.output(&path)?;
    manifest.output(&sv_path)?;
    manifest.write(&ctx.manifest_path(&format!("precompute-svd-{}", ctx.config.name)))
}

/// What a later run needs to continue from this one.
#[derive(Debug, Serialize, Deserialize)]
struct State {
    algorithm: Algorithm,
    l: usize,
    gamma_n: Vec<f64>,
    sigma: Vec<f64>,
    joint_objective: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LevelSummary {
    pub noise_percent: f64,
    pub relative_l2_error: f64,
    pub seconds: f64,
    pub iterations: usize,
    pub status: String,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
    pub joint_objective: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub algorithm: Algorithm,
    pub mode: Coefficient,
    pub l: usize,
    pub rank: usize,
    pub init_from: Option<Algorithm>,
    pub levels: Vec<LevelSummary>,
    pub total_seconds: f64,
}

fn load_state(ctx: &Context, from: Algorithm, gamma: f64) -> Result<State> {
    let path = ctx.level_dir(from, gamma).join("state.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        ConfigError(format!(
            "init_from {}: cannot read {} ({e}); run that algorithm first",
            from.name(),
            path.display()
        ))
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn reconstruct_cmd(ctx: &Context) -> Result<()> {
    let total = Instant::now();
    let inv = inversion(ctx)?;
    let spec = &inv.spec;
    let cache_path = ctx.config.cache_path();
    if !cache_path.exists() {
        return Err(CacheMissing(cache_path).into());
    }
    let cache = load_cache(&cache_path, Some(&inv.hash))?;
    let fact = factorization(&inv)?;
    let mesh = &fact.mesh;
    let fine = spec.forward_mesh()?;
    let truth = inv.truth.coefficient(spec.mode).to_vec();
    let algorithm = ctx.config.recon.algorithm;

    let mut manifest = ctx.manifest("reconstruct")?;
    manifest.input(&cache_path)?;
    let results = ctx.results_dir();
    let truth_csv = results.join("truth.csv");
    let truth_pgm = results.join("truth.pgm");
    write_file(&truth_csv, field_to_csv(&truth, mesh.nx).as_bytes())?;
    write_file(&truth_pgm, &field_to_pgm(&truth, mesh.nx, mesh.ny))?;
    manifest.output(&truth_csv)?;
    manifest.output(&truth_pgm)?;

    let mut levels = Vec::new();
    let mut last: Option<ReconResult> = None;
    for &gamma in &spec.noise_levels {
        let data = (0..spec.n_sources)
            .map(|q| {
                let path = ctx.data_path(q, gamma);
                manifest
                    .input(&path)
                    .map_err(|_| anyhow!(ConfigError(format!("missing {}; run gen-data first", path.display()))))?;
                Ok(restrict_data(&read_column(&path)?, &fine, mesh)?)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut config = ctx.config.recon_config();
        if let Some(from) = ctx.config.recon.init_from {
            let state = load_state(ctx, from, gamma)?;
            if state.sigma.len() != mesh.n_cells() {
                return Err(ConfigError(format!("init_from {}: stored field has the wrong size", from.name())).into());
            }
            if algorithm == Algorithm::OneStep {
                if state.gamma_n.len() != cache.rank() - state.l {
                    return Err(ConfigError(format!(
                        "init_from {}: stored run has no noise coefficients for L = {}",
                        from.name(),
                        state.l
                    ))
                    .into());
                }
                config.truncation = rtsom::spectral::LPolicy::Fixed { value: state.l };
                config.one_step_start = Some(OneStepStart {
                    gamma: state.gamma_n,
                    sigma: state.sigma,
                });
            } else {
                config.initial_sigma = Some(state.sigma);
            }
        }

        let start = Instant::now();
        let mut result = reconstruct(&fact, &cache, &data, &config)?;
        let seconds = start.elapsed().as_secs_f64();
        let estimate = result.sigma.coefficient(spec.mode).to_vec();
        let err = relative_l2_error(&estimate, &truth, mesh)?;
        result.error_vs_truth = Some(err);
        log::info!("{} noise {gamma}%: relative L2 error {err:.4}", algorithm.name());

        let dir = ctx.level_dir(algorithm, gamma);
        let mut history = String::from("iteration,objective\n");
        for (k, v) in result.objective_history.iter().enumerate() {
            let _ = writeln!(history, "{k},{v:.16e}");
        }
        let state = State {
            algorithm,
            l: result.l,
            gamma_n: result.gamma_n.clone(),
            sigma: estimate.clone(),
            joint_objective: result.joint_objective,
        };
        let files: [(&str, Vec<u8>); 4] = [
            ("sigma_est.csv", field_to_csv(&estimate, mesh.nx).into_bytes()),
            ("sigma_est.pgm", field_to_pgm(&estimate, mesh.nx, mesh.ny)),
            ("objective_history.csv", history.into_bytes()),
            ("state.json", serde_json::to_vec_pretty(&state)?),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            write_file(&path, &bytes)?;
            manifest.output(&path)?;
        }
        levels.push(LevelSummary {
            noise_percent: gamma,
            relative_l2_error: err,
            seconds,
            iterations: result.iterations,
            status: format!("{:?}", result.status),
            initial_objective: result.objective_history.first().copied(),
            final_objective: result.objective_history.last().copied(),
            joint_objective: result.joint_objective,
        });
        last = Some(result);
    }

    let last = last.ok_or_else(|| ConfigError("no noise levels configured".into()))?;
    let summary = Summary {
        experiment: ctx.config.name.clone(),
        algorithm,
        mode: spec.mode,
        l: last.l,
        rank: last.rank,
        init_from: ctx.config.recon.init_from,
        levels,
        total_seconds: total.elapsed().as_secs_f64(),
    };
    let summary_path = results.join(algorithm.name()).join("summary.json");
    write_file(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    manifest.output(&summary_path)?;
    manifest.write(&ctx.manifest_path(&format!("reconstruct-{}-{}", ctx.config.name, algorithm.name())))
}

/// Collects every `results/*/*/summary.json` under the output directory.
pub fn report(ctx: &Context) -> Result<()> {
    let root = ctx.out.join("results");
    let mut paths = Vec::new();
    if root.is_dir() {
        for exp in std::fs::read_dir(&root)? {
            let exp = exp?.path();
            if !exp.is_dir() {
                continue;
            }
            for alg in std::fs::read_dir(&exp)? {
                let p = alg?.path().join("summary.json");
                if p.is_file() {
                    paths.push(p);
                }
            }
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(ConfigError(format!("no summaries under {}; run reconstruct first", root.display())).into());
    }

    let mut manifest = ctx.manifest("report")?;
    let mut csv = String::from(
        "experiment,algorithm,mode,noise_percent,l,rank,relative_l2_error,iterations,status,final_objective,seconds\n",
    );
    for p in &paths {
        let s: Summary =
            serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?;
        manifest.input(p)?;
        let mode = match s.mode {
            Coefficient::Absorption => "absorption",
            Coefficient::Scattering => "scattering",
        };
        for lv in &s.levels {
            let _ = writeln!(
                csv,
                "{},{},{mode},{},{},{},{:.6e},{},{},{},{:.3}",
                s.experiment,
                s.algorithm.name(),
                lv.noise_percent,
                s.l,
                s.rank,
                lv.relative_l2_error,
                lv.iterations,
                lv.status,
                lv.final_objective.map(|v| format!("{v:.6e}")).unwrap_or_default(),
                lv.seconds
            );
        }
    }
    print!("{csv}");
    let path = ctx.out.join("report.csv");
    write_file(&path, csv.as_bytes())?;
    manifest.output(&path)?;
    manifest.write(&ctx.manifest_path("report"))
}
