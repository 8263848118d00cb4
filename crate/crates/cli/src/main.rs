//! Single binary entry point wiring configs, subcommands, deterministic
//! seeds, and CSV/JSON emission.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 numerical
//! check failure.

mod csvio;
mod report;
mod selfcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use rkb_core::config::{load_config, RunSettings};
use rkb_core::gexp::{bsde_solve, concave_dual, dual_value, ConcaveDual, GeneratorSpec};
use rkb_core::kalman::classical_filter;
use rkb_core::mmse::{
    conditional_mmse, property_suite, FiniteConvexOperator, FiniteSpace, Partition,
};
use rkb_core::model::{AmbiguityBound, ModelCoefficients, TimeGrid};
use rkb_core::robust::RobustProblem;
use rkb_core::sim::{simulate_paths, DeterministicTheta, ThetaPath};
use rkb_core::Error;

const OUT_DIR_ENV: &str = "RKB_OUT_DIR";

#[derive(Parser)]
#[command(name = "rkb", version, about = "Robust Kalman-Bucy filtering under drift ambiguity")]
struct Cli {
    /// Model/run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for stochastic subcommands; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 keeps runs bit-stable by default.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Directory for outputs; flag beats the RKB_OUT_DIR variable.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate signal/observation paths under a prior.
    Simulate {
        /// `zero`, `const:v1,..,v(n+m)`, or `file:PATH` (per-step CSV).
        #[arg(long, default_value = "zero")]
        theta: String,
        /// Number of paths; defaults to the config value.
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the first path's observations in `filter --obs` format.
        #[arg(long)]
        obs_out: Option<PathBuf>,
    },
    /// Classical Kalman-Bucy filter on an observation file.
    Filter {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Worst-case prior, saddle certificate, and robust filter.
    RobustFilter {
        /// `zero`, `norm:kappa`, or `hyperbolic:kappa`.
        #[arg(long, default_value = "hyperbolic:1.0")]
        generator: String,
        /// Ambiguity bound; defaults to the config value.
        #[arg(long)]
        mu: Option<f64>,
        /// Evaluation time; defaults to the horizon.
        #[arg(long)]
        t_star: Option<f64>,
        /// Observations to filter with the worst-case prior.
        #[arg(long)]
        obs: Option<PathBuf>,
        /// Filter output CSV (requires --obs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Saddle report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Duality sandwich: BSDE value vs. the dual lower bound for xi = x(T).
    DualCheck {
        #[arg(long, default_value = "hyperbolic:1.0")]
        generator: String,
        #[arg(long)]
        paths: Option<usize>,
        /// Size of the constant-prior family for the dual bound.
        #[arg(long, default_value_t = 9)]
        family: usize,
    },
    /// Conditional MMSE under a convex operator on a finite space.
    MmseFinite {
        /// JSON with prob, densities, penalties, p, partition labels.
        #[arg(long)]
        space: PathBuf,
        /// Payoff vector (CSV, one value per outcome).
        #[arg(long)]
        xi: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the bundled invariant suite and report pass/fail.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if cli.threads != 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    } else {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

struct Loaded {
    model: ModelCoefficients,
    grid: TimeGrid,
    ambiguity: AmbiguityBound,
    run: RunSettings,
}

fn load(cli: &Cli) -> Result<Loaded, Error> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => selfcheck::BUNDLED_CONFIG.to_string(),
    };
    let (model, grid, ambiguity, run) = load_config(&text)?;
    Ok(Loaded { model, grid, ambiguity, run })
}

/// Output-directory precedence: `--out-dir` flag, then the environment
/// variable, then the config's `run.out_dir`, then the working directory.
fn out_dir(cli: &Cli, run: Option<&RunSettings>) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| run.and_then(|r| r.out_dir.as_ref().map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(cli: &Cli, run: Option<&RunSettings>, path: &Path) -> Result<PathBuf, Error> {
    let full = if path.is_absolute() { path.to_path_buf() } else { out_dir(cli, run).join(path) };
    if let Some(parent) = full.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(full)
}

fn require_seed(cli: &Cli, run: &RunSettings) -> Result<u64, Error> {
    cli.seed
        .or(run.seed)
        .ok_or_else(|| Error::ConfigParse("a seed is required for stochastic subcommands".into()))
}

fn parse_generator(spec: &str, n: usize, m: usize) -> Result<GeneratorSpec, Error> {
    let mut parts = spec.splitn(2, ':');
    let kind = parts.next().unwrap_or_default();
    let param = parts.next();
    let kappa = |param: Option<&str>| -> Result<f64, Error> {
        param
            .ok_or_else(|| Error::ConfigParse(format!("generator `{spec}` needs a parameter")))?
            .parse::<f64>()
            .map_err(|e| Error::ConfigParse(format!("bad generator parameter in `{spec}`: {e}")))
    };
    match kind {
        "zero" => Ok(GeneratorSpec::zero(n, m)),
        "norm" => Ok(GeneratorSpec::scaled_norm(kappa(param)?, n, m)),
        "hyperbolic" => Ok(GeneratorSpec::hyperbolic(kappa(param)?, n, m)),
        other => Err(Error::ConfigParse(format!("unknown generator `{other}`"))),
    }
}

fn parse_theta(cli: &Cli, spec: &str, loaded: &Loaded) -> Result<ThetaPath, Error> {
    let (n, m) = (loaded.model.n(), loaded.model.m());
    if spec == "zero" {
        return Ok(ThetaPath::zero(n, m));
    }
    if let Some(values) = spec.strip_prefix("const:") {
        let vals: Vec<f64> = values
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::ConfigParse(format!("bad theta value `{s}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != n + m {
            return Err(Error::DimensionMismatch {
                field: "theta".into(),
                expected: format!("{} values", n + m),
                got: format!("{}", vals.len()),
            });
        }
        return Ok(ThetaPath::constant(vals[..n].to_vec(), vals[n..].to_vec()));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let full = if Path::new(path).is_absolute() {
            PathBuf::from(path)
        } else {
            out_dir(cli, Some(&loaded.run)).join(path)
        };
        let theta = csvio::read_theta_csv(&full, n, m, loaded.grid.steps())?;
        return Ok(ThetaPath::Deterministic(theta));
    }
    Err(Error::ConfigParse(format!(
        "unknown theta spec `{spec}`; use zero, const:.., or file:PATH"
    )))
}

fn dual_family(dual: &ConcaveDual, size: usize, n: usize, m: usize) -> Vec<DeterministicTheta> {
    let radius = match dual.ball_radius() {
        Some(r) => 0.98 * r,
        None => dual.box_radius(),
    };
    if radius == 0.0 || size <= 1 {
        return vec![DeterministicTheta::zero(n, m)];
    }
    (0..size)
        .map(|i| {
            let c = -radius + 2.0 * radius * i as f64 / (size - 1) as f64;
            let mut th1 = vec![0.0; n];
            th1[0] = c;
            DeterministicTheta::constant(th1, vec![0.0; m])
        })
        .collect()
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::Simulate { theta, paths, out, obs_out } => {
            let loaded = load(cli)?;
            let seed = require_seed(cli, &loaded.run)?;
            let theta = parse_theta(cli, theta, &loaded)?;
            let n_paths = paths.unwrap_or(loaded.run.n_paths);
            let batch = simulate_paths(
                &loaded.model,
                &loaded.grid,
                &theta,
                n_paths,
                seed,
                loaded.ambiguity.mu,
            )?;
            csvio::write_simulate_csv(&resolve(cli, Some(&loaded.run), out)?, &batch)?;
            if let Some(obs_path) = obs_out {
                let obs = rkb_core::kalman::ObservationPath::from_sample(
                    &batch.paths[0],
                    &loaded.grid,
                    loaded.model.m(),
                );
                csvio::write_observations_csv(&resolve(cli, Some(&loaded.run), obs_path)?, &obs)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Filter { obs, out } => {
            let loaded = load(cli)?;
            let obs = csvio::read_observations_csv(
                &resolve(cli, Some(&loaded.run), obs)?,
                &loaded.grid,
                loaded.model.m(),
            )?;
            let output = classical_filter(&loaded.model, &loaded.grid, &obs)?;
            csvio::write_filter_csv(
                &resolve(cli, Some(&loaded.run), out)?,
                &loaded.grid,
                loaded.model.n(),
                &output,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::RobustFilter { generator, mu, t_star, obs, out, report } => {
            let loaded = load(cli)?;
            let gen = parse_generator(generator, loaded.model.n(), loaded.model.m())?;
            let dual = concave_dual(&gen, 33);
            let mu = mu.unwrap_or(loaded.ambiguity.mu);
            let t_star = t_star.unwrap_or(loaded.grid.horizon());
            let problem = RobustProblem::new(&loaded.model, loaded.grid, &dual, mu, t_star)?;
            let audit_seed = cli.seed.or(loaded.run.seed).unwrap_or(0);
            let saddle = problem.certify_saddle(audit_seed)?;

            if let Some(report_path) = report {
                let k = loaded.grid.index_at(t_star).unwrap().max(1);
                let star = &saddle.theta_star;
                let time_varying = (1..k)
                    .any(|j| star.theta1_at(j) != star.theta1_at(0) || star.theta2_at(j) != star.theta2_at(0));
                let theta_doc = if time_varying {
                    json!({
                        "time_varying": true,
                        "theta1": (0..k).map(|j| star.theta1_at(j).to_vec()).collect::<Vec<_>>(),
                        "theta2": (0..k).map(|j| star.theta2_at(j).to_vec()).collect::<Vec<_>>(),
                    })
                } else {
                    json!({
                        "time_varying": false,
                        "theta1": star.theta1_at(0).to_vec(),
                        "theta2": star.theta2_at(0).to_vec(),
                    })
                };
                let doc = json!({
                    "generator": generator,
                    "mu": mu,
                    "t_star": t_star,
                    "seed": audit_seed,
                    "gap_tol": loaded.run.gap_tol,
                    "lower_value": saddle.lower_value,
                    "upper_value": saddle.upper_value,
                    "gap": saddle.gap,
                    "upper_bias": saddle.upper_bias,
                    "weak_duality_violation": saddle.weak_duality_violation,
                    "theta_star": theta_doc,
                });
                std::fs::write(resolve(cli, Some(&loaded.run), report_path)?, report::render(doc))?;
            }
            if let Some(obs_path) = obs {
                let obs = csvio::read_observations_csv(
                    &resolve(cli, Some(&loaded.run), obs_path)?,
                    &loaded.grid,
                    loaded.model.m(),
                )?;
                let filtered = problem
                    .robust_filter(&ThetaPath::Deterministic(saddle.theta_star.clone()), &obs)?;
                if let Some(out_path) = out {
                    csvio::write_filter_csv(
                        &resolve(cli, Some(&loaded.run), out_path)?,
                        &loaded.grid,
                        loaded.model.n(),
                        &filtered,
                    )?;
                }
            }
            println!(
                "lower {:.12e}  upper {:.12e}  gap {:.12e}",
                saddle.lower_value, saddle.upper_value, saddle.gap
            );
            if saddle.gap < -loaded.run.gap_tol {
                eprintln!("numerical check failed: saddle gap {} below -{}", saddle.gap, loaded.run.gap_tol);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DualCheck { generator, paths, family } => {
            let loaded = load(cli)?;
            let seed = require_seed(cli, &loaded.run)?;
            let gen = parse_generator(generator, loaded.model.n(), loaded.model.m())?;
            let dual = concave_dual(&gen, 33);
            let n_paths = paths.unwrap_or(loaded.run.n_paths);
            let bsde = bsde_solve(
                &gen,
                &|x: &[f64], _m: &[f64]| x[0],
                &loaded.model,
                &loaded.grid,
                n_paths,
                seed,
                16,
            )?;
            let fam = dual_family(&dual, *family, loaded.model.n(), loaded.model.m());
            let dv = dual_value(
                &|x: &[f64], _m: &[f64]| x[0],
                &dual,
                &loaded.model,
                &loaded.grid,
                &fam,
                n_paths,
                seed,
            )?;
            let dual_se = dv.per_theta[dv.argmax_index].std_error;
            let gap = bsde.y0 - dv.value;
            println!("bsde_value,bsde_se,dual_value,dual_se,gap,gap_se");
            println!(
                "{},{},{},{},{},{}",
                bsde.y0,
                bsde.std_error,
                dv.value,
                dual_se,
                gap,
                (bsde.std_error * bsde.std_error + dual_se * dual_se).sqrt()
            );
            if gap < -4.0 * (bsde.std_error * bsde.std_error + dual_se * dual_se).sqrt() {
                eprintln!("numerical check failed: dual bound exceeds the BSDE value");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::MmseFinite { space, xi, out } => {
            let text = std::fs::read_to_string(resolve(cli, None, space)?)?;
            let doc: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::ConfigParse(format!("space json: {e}")))?;
            let get_floats = |key: &str| -> Result<Vec<f64>, Error> {
                doc.get(key)
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| Error::MissingKey(key.into()))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| Error::ConfigParse(format!("bad `{key}`"))))
                    .collect()
            };
            let prob = get_floats("prob")?;
            let penalties = get_floats("penalties")?;
            let labels: Vec<usize> = doc
                .get("partition")
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::MissingKey("partition".into()))?
                .iter()
                .map(|v| v.as_u64().map(|u| u as usize).ok_or_else(|| Error::ConfigParse("bad `partition`".into())))
                .collect::<Result<_, _>>()?;
            let densities: Vec<Vec<f64>> = doc
                .get("densities")
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::MissingKey("densities".into()))?
                .iter()
                .map(|row| {
                    row.as_array()
                        .ok_or_else(|| Error::ConfigParse("bad `densities`".into()))?
                        .iter()
                        .map(|v| {
                            v.as_f64().ok_or_else(|| Error::ConfigParse("bad `densities`".into()))
                        })
                        .collect()
                })
                .collect::<Result<_, _>>()?;
            let p = doc.get("p").and_then(|v| v.as_f64()).unwrap_or(2.0);

            let space = FiniteSpace::new(prob)?;
            let op = FiniteConvexOperator::new(space, densities, penalties, p)?;
            let partition = Partition::from_labels(&labels)?;
            let xi = csvio::read_vector_csv(&resolve(cli, None, xi)?)?;
            let result = conditional_mmse(&op, &xi, &partition)?;
            let seed = cli.seed.unwrap_or(0);
            let props = property_suite(&op, &partition, seed, None)?;
            let doc = json!({
                "eta_hat": result.eta_hat,
                "eta_blocks": result.eta_blocks,
                "value": result.value,
                "lambda_star": result.lambda_star,
                "saddle_gap": result.saddle_gap,
                "eta_norm_2p": result.eta_norm_2p,
                "restriction_bound": result.restriction_bound,
                "seed": seed,
                "properties": {
                    "bound_violation": props.bound_violation,
                    "odd_symmetry_violation": props.odd_symmetry_violation,
                    "translation_violation": props.translation_violation,
                },
            });
            std::fs::write(resolve(cli, None, out)?, report::render(doc))?;
            if result.saddle_gap < -1e-10 || result.saddle_gap > 1e-6 {
                eprintln!("numerical check failed: saddle gap {}", result.saddle_gap);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selfcheck => {
            let loaded = load(cli)?;
            if selfcheck::run(&loaded.model, &loaded.grid, &loaded.ambiguity, &loaded.run) {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
    }
}
