use std::fs::File;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use spatiodeg::config::{
    format_float, read_observations_csv, write_observations_csv, write_paths_csv,
    write_reliability_csv, ModelConfig, ReliabilityRow,
};
use spatiodeg::error::{Error, Result};
use spatiodeg::estimation::{FitConfig, PinnedParams, StructuralParams};
use spatiodeg::model::simulate_paths;
use spatiodeg::reliability::{reliability, system_reliability};
use spatiodeg::spatial::{optimize_design, Algorithm, SearchConfig};
use spatiodeg::temporal::{next_time, CandidateSet, CriterionConfig, UnitHistory};

use spatiodeg_cli::replicate::run_scenario;
use spatiodeg_cli::scenario::{real_case_scenario, synthetic_scenario, Method, ScenarioConfig};
use spatiodeg_cli::table::ErrorTable;

#[derive(Parser)]
#[command(name = "spatiodeg", version, about = "Spatio-temporal degradation modeling and adaptive observation design")]
struct Cli {
    /// Worker threads for replication runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw joint degradation paths from a model document.
    Simulate {
        /// Model JSON (parameters and per-unit profiles).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_paths: usize,
        /// Last grid time (years).
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
        /// Grid step (years).
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV of path,unit,time,level rows.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit model parameters to an observation CSV by profile likelihood.
    Fit {
        /// Model JSON; its parameters seed the optimizer warm start.
        #[arg(long)]
        config: PathBuf,
        /// Observation CSV (unit,time,level).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 12)]
        starts: usize,
        #[arg(long, default_value_t = 4000)]
        max_evals: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pin the adjacency correlation to zero (independent-units fit).
        #[arg(long)]
        pin_rho_zero: bool,
        /// Pin the time-transform exponent to this value.
        #[arg(long)]
        pin_alpha: Option<f64>,
        /// Output JSON with the full fit result.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search for a uniform unit-by-epoch observation matrix.
    DesignUnits {
        #[arg(long)]
        units: usize,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        budget: usize,
        /// Search algorithm: ta (threshold accepting) or swap.
        #[arg(long, default_value = "ta")]
        algo: String,
        #[arg(long, default_value_t = 20000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV of the binary selection matrix (rows = units).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidate next-observation times for one unit.
    DesignTime {
        /// Model JSON with the fitted parameters and profiles.
        #[arg(long)]
        config: PathBuf,
        /// Observation CSV holding the unit's history.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        unit: usize,
        /// Candidate windows "lo:hi,lo:hi"; default is an open grid to t-max.
        #[arg(long)]
        windows: Option<String>,
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 0.5)]
        omega1: f64,
        #[arg(long, default_value_t = 0.5)]
        omega2: f64,
        /// Output CSV of the criterion trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict per-unit (and optionally joint) reliability curves.
    Predict {
        /// Model JSON; must include the reliability section.
        #[arg(long)]
        config: PathBuf,
        /// Observation CSV; with --from-last each unit restarts from its
        /// final observed level.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        from_last: bool,
        /// Also emit the joint series-system curve as unit 0.
        #[arg(long)]
        system: bool,
        /// Output CSV of unit,horizon,reliability rows.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a synthetic flag-scenario study and write its error table.
    Experiment {
        /// Scenario flags "s1,s2,s3,s4".
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated methods, e.g. "m0,m1,m2".
        #[arg(long, default_value = "m0,m1,m2")]
        methods: String,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Full scenario JSON; overrides --scenario/--reps/--seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the twelve-unit case study and write its error table.
    RealCase {
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate one synthetic observation dataset from a scenario.
    Sample {
        /// Scenario flags "s1,s2,s3,s4".
        #[arg(long, default_value = "1,0,1,0")]
        scenario: String,
        #[arg(long, default_value = "m2")]
        method: String,
        #[arg(long, default_value_t = 0)]
        rep: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output observation CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_flags(text: &str) -> Result<[u8; 4]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::invalid("scenario flags must be four comma-separated 0/1 values"));
    }
    let mut flags = [0u8; 4];
    for (k, p) in parts.iter().enumerate() {
        flags[k] = match p.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::invalid(format!("flag '{other}' is not 0 or 1"))),
        };
    }
    Ok(flags)
}

fn parse_methods(text: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for p in text.split(',') {
        let m = Method::parse(p.trim())?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("at least one method required"));
    }
    Ok(out)
}

fn parse_windows(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let (lo, hi) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("window '{part}' is not lo:hi")))?;
        let lo: f64 = lo.trim().parse().map_err(|_| Error::invalid("bad window bound"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| Error::invalid("bad window bound"))?;
        out.push((lo, hi));
    }
    Ok(out)
}

fn write_study(table: &ErrorTable, config: &ScenarioConfig, out_dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("table.json"), table.to_json_string()?)?;
    std::fs::write(out_dir.join("table.txt"), table.render_text())?;
    table.emit_plotdata(File::create(out_dir.join("plotdata.csv"))?)?;
    let meta = serde_json::json!({
        "config_hash": table.config_hash,
        "master_seed": table.master_seed,
        "replications": table.replications,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    std::fs::write(out_dir.join("scenario.json"), serde_json::to_string_pretty(config)?)?;
    print!("{}", table.render_text());
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, n_paths, t_max, step, seed, out } => {
            let model = ModelConfig::from_path(&config)?;
            if !(step > 0.0) || !(t_max >= step) {
                return Err(Error::invalid("need step > 0 and t_max >= step"));
            }
            let n = (t_max / step).floor() as usize;
            let grid: Vec<f64> = (1..=n).map(|k| k as f64 * step).collect();
            let paths = simulate_paths(&model.params, &model.profiles, &grid, n_paths, seed)?;
            write_paths_csv(&paths, File::create(&out)?)?;
            println!("wrote {} paths x {} units x {} times to {}", n_paths, model.profiles.len(), grid.len(), out.display());
            Ok(())
        }
        Command::Fit { config, data, starts, max_evals, seed, pin_rho_zero, pin_alpha, out } => {
            let model = ModelConfig::from_path(&config)?;
            let obs = read_observations_csv(File::open(&data)?, Some(model.profiles.len()))?;
            let fit_config = FitConfig {
                n_starts: starts,
                max_evals,
                fixed: PinnedParams {
                    alpha: pin_alpha,
                    rho: if pin_rho_zero { Some(0.0) } else { None },
                    ..PinnedParams::default()
                },
                init: Some(StructuralParams {
                    alpha: model.params.alpha,
                    kappa: model.params.kappa,
                    gamma1: model.params.gamma1,
                    gamma2: model.params.gamma2,
                    rho: model.params.rho,
                }),
                seed,
                ..FitConfig::default()
            };
            let result = spatiodeg::estimation::fit(&obs, &model.profiles, &fit_config)?;
            println!("{}", serde_json::to_string_pretty(&result.theta_hat)?);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
            }
            Ok(())
        }
        Command::DesignUnits { units, epochs, budget, algo, iters, seed, out } => {
            let algorithm = match algo.as_str() {
                "ta" => Algorithm::ThresholdAccepting,
                "swap" => Algorithm::RandomSwap,
                other => return Err(Error::invalid(format!("unknown algorithm '{other}'"))),
            };
            let search = SearchConfig { algorithm, iterations: iters, thresholds: None, seed };
            let (w, value) = optimize_design(epochs, units, budget, &search)?;
            let mut f = File::create(&out)?;
            for row in &w.w {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(f, "{}", line.join(","))?;
            }
            println!("wd2 = {}", format_float(value));
            Ok(())
        }
        Command::DesignTime { config, data, unit, windows, t_max, step, omega1, omega2, out } => {
            let model = ModelConfig::from_path(&config)?;
            let obs = read_observations_csv(File::open(&data)?, Some(model.profiles.len()))?;
            if unit == 0 || unit > model.profiles.len() {
                return Err(Error::invalid(format!("unit {unit} outside 1..={}", model.profiles.len())));
            }
            let candidates = match windows {
                Some(text) => CandidateSet::Windows { windows: parse_windows(&text)?, step },
                None => CandidateSet::Interval { t_max, delta: step, step },
            };
            let criterion = CriterionConfig {
                omega1,
                omega2,
                candidates,
                quadrature_nodes: 32,
                mc_draws: 50_000,
                seed: 0,
            };
            let history = UnitHistory::new(
                unit,
                obs.times(unit),
                obs.levels(unit),
                model.profiles[unit - 1].clone(),
            )?;
            let (t_star, trace) = next_time(&model.params, &history, &criterion)?;
            if let Some(path) = out {
                let mut w = csv::Writer::from_writer(File::create(&path)?);
                w.write_record(["t", "gamma", "info_term", "exploration_term"])?;
                for v in &trace {
                    w.write_record([
                        format_float(v.t),
                        format_float(v.gamma),
                        format_float(v.info_term),
                        format_float(v.exploration_term),
                    ])?;
                }
            }
            println!("next time = {}", format_float(t_star));
            Ok(())
        }
        Command::Predict { config, data, from_last, system, out } => {
            let model = ModelConfig::from_path(&config)?;
            let rel_config = model
                .reliability
                .clone()
                .ok_or_else(|| Error::invalid("model document lacks a reliability section"))?;
            let obs = match &data {
                Some(path) => Some(read_observations_csv(File::open(path)?, Some(model.profiles.len()))?),
                None => None,
            };
            let mut rows = Vec::new();
            let mut last_states = Vec::new();
            for (ix, profile) in model.profiles.iter().enumerate() {
                let last = if from_last {
                    obs.as_ref().and_then(|o| o.last_observation(ix + 1))
                } else {
                    None
                };
                last_states.push(last.unwrap_or((0.0, 0.0)));
                let curve = reliability(&model.params, profile, last, &rel_config)?;
                for (k, &h) in rel_config.horizons.iter().enumerate() {
                    rows.push(ReliabilityRow { unit: ix + 1, horizon: h, reliability: curve[k] });
                }
            }
            if system {
                let states = if from_last { Some(&last_states[..]) } else { None };
                let curve = system_reliability(&model.params, &model.profiles, states, &rel_config)?;
                for (k, &h) in rel_config.horizons.iter().enumerate() {
                    rows.push(ReliabilityRow { unit: 0, horizon: h, reliability: curve[k] });
                }
            }
            rows.sort_by(|a, b| a.unit.cmp(&b.unit).then(a.horizon.partial_cmp(&b.horizon).unwrap()));
            write_reliability_csv(&rows, File::create(&out)?)?;
            println!("wrote {} reliability rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Experiment { scenario, methods, reps, seed, config, out_dir } => {
            let scenario_config = match config {
                Some(path) => ScenarioConfig::from_json_str(&std::fs::read_to_string(&path)?)?,
                None => {
                    let flags = parse_flags(
                        scenario.as_deref().ok_or_else(|| Error::invalid("--scenario or --config required"))?,
                    )?;
                    synthetic_scenario(flags, reps, seed)
                }
            };
            let methods = parse_methods(&methods)?;
            let table = run_scenario(&scenario_config, &methods, Some(&out_dir))?;
            write_study(&table, &scenario_config, &out_dir)
        }
        Command::RealCase { reps, seed, out_dir } => {
            let scenario_config = real_case_scenario(reps, seed);
            let table = run_scenario(&scenario_config, &[Method::M0, Method::M1, Method::M2], Some(&out_dir))?;
            write_study(&table, &scenario_config, &out_dir)
        }
        Command::Sample { scenario, method, rep, seed, out } => {
            let flags = parse_flags(&scenario)?;
            let config = synthetic_scenario(flags, 1, seed);
            let method = Method::parse(&method)?;
            let plans = spatiodeg_cli::scenario::build_plans(&config, &[method])?;
            let field = spatiodeg_cli::replicate::LatentField::new(&config.true_params, &config.profiles)?;
            let paths = field.draw(config.master_seed, rep);
            let data = spatiodeg_cli::replicate::collect_data(&config, &plans[0], &paths, rep)?;
            write_observations_csv(&data, File::create(&out)?)?;
            println!("wrote {} observations to {}", data.len(), out.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .expect("thread pool built once");
    }
    if let Err(e) = run(cli.command) {
        let payload = serde_json::json!({ "error": e.to_string() });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
