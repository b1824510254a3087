//! `riskstack` command-line entry point: simulation, batch evaluation and
//! the offline tools behind the planner (tube learning, intent
//! classification, pairwise risk, temporal checks, single-decision audits).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;
use serde_json::json;

use riskstack::intent::classify_maneuver;
use riskstack::pft::{learn_library, ManeuverLibrary, Pft};
use riskstack::risk::{pft_collision_risk, Aggregation};
use riskstack::sim::{load_scenario, write_summary_csv, Scenario, Simulator, Snapshot};
use riskstack::stn::{relax_goals, stn_check, Stn, StnResult};

#[derive(Parser)]
#[command(name = "riskstack", version, about = "Risk-bounded driving planner and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Independent,
    UnionBound,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop episode.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        v2v: Option<Toggle>,
        #[arg(long)]
        delta: Option<f64>,
        /// Directory for trace.jsonl, summary.csv and scenario.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run episodes with seeds base_seed..base_seed+episodes-1.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        base_seed: u64,
        #[arg(long, value_enum)]
        v2v: Option<Toggle>,
        #[arg(long)]
        delta: Option<f64>,
        /// Directory for summary.csv, metrics.json and per-episode traces.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a maneuver library from demos laid out as DIR/<maneuver>/*.csv.
    LearnPft {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
    },
    /// Posterior over library maneuvers for an observed prefix.
    Classify {
        #[arg(long)]
        library: PathBuf,
        /// JSON list of [x, y] positions in the start frame, one per step.
        #[arg(long)]
        prefix: PathBuf,
        /// Isotropic observation noise variance, m^2.
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
    },
    /// Collision risk between two tubes.
    Risk {
        #[arg(long)]
        tube_a: PathBuf,
        #[arg(long)]
        tube_b: PathBuf,
        /// Footprint radii as RA,RB.
        #[arg(long)]
        radii: String,
        #[arg(long, value_enum, default_value = "independent")]
        aggregation: AggregationArg,
    },
    /// Consistency of a temporal network.
    StnCheck {
        #[arg(long)]
        file: PathBuf,
    },
    /// Re-run the planner on one captured decision problem.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        /// A snapshot, or a decision record taken from a trace.
        #[arg(long)]
        snapshot: PathBuf,
    },
}

/// Successful run whose verdict is negative.
struct Verdict(bool);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RISKSTACK_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Verdict(true)) => ExitCode::SUCCESS,
        Ok(Verdict(false)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulator(path: &Path, v2v: Option<Toggle>, delta: Option<f64>) -> Result<Simulator> {
    let mut scenario: Scenario = load_scenario(&read(path)?).with_context(|| format!("loading {}", path.display()))?;
    if let Some(t) = v2v {
        scenario.sensor.v2v_enabled = t == Toggle::On;
    }
    if let Some(d) = delta {
        scenario.planner.delta = d;
    }
    Ok(Simulator::new(scenario)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(command: Command) -> Result<Verdict> {
    match command {
        Command::Simulate {
            scenario,
            seed,
            v2v,
            delta,
            out,
        } => {
            let sim = simulator(&scenario, v2v, delta)?;
            let ep = sim.run_episode(seed)?;
            log::info!("episode {seed}: {}", ep.summary.outcome.as_str());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write(&dir.join("trace.jsonl"), &ep.trace_jsonl())?;
                write(&dir.join("scenario.json"), &sim.scenario().to_json())?;
                let mut csv = Vec::new();
                write_summary_csv(&mut csv, std::slice::from_ref(&ep.summary))?;
                fs::write(dir.join("summary.csv"), csv)?;
            }
            print_json(&ep.summary)?;
            Ok(Verdict(!ep.summary.infeasible))
        }
        Command::Batch {
            scenario,
            episodes,
            base_seed,
            v2v,
            delta,
            out,
        } => {
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            let sim = simulator(&scenario, v2v, delta)?;
            let report = sim.run_batch(episodes, base_seed, out.is_some());
            if let Some(dir) = out {
                let traces = dir.join("traces");
                fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
                for (seed, t) in &report.traces {
                    write(&traces.join(format!("{seed}.jsonl")), t)?;
                }
                let mut csv = Vec::new();
                write_summary_csv(&mut csv, &report.summaries)?;
                fs::write(dir.join("summary.csv"), csv)?;
                write(&dir.join("metrics.json"), &serde_json::to_string_pretty(&report.metrics)?)?;
                write(&dir.join("scenario.json"), &sim.scenario().to_json())?;
            }
            print_json(&report.metrics)?;
            if report.metrics.failed > 0 {
                bail!("{} episodes failed", report.metrics.failed);
            }
            // violated when even the optimistic end of the interval exceeds delta
            Ok(Verdict(report.metrics.collision_rate_ci95.0 <= sim.scenario().planner.delta))
        }
        Command::LearnPft { demos, steps, out, dt } => {
            let lib = learn_library(&demos, steps, dt)?;
            write(&out, &lib.to_json())?;
            print_json(&json!({ "maneuvers": lib.ids().collect::<Vec<_>>(), "steps": steps }))?;
            Ok(Verdict(true))
        }
        Command::Classify { library, prefix, noise } => {
            let lib = ManeuverLibrary::load(&library)?;
            let points: Vec<[f64; 2]> = read_json(&prefix)?;
            let points: Vec<Vector2<f64>> = points.into_iter().map(Vector2::from).collect();
            let c = classify_maneuver(&lib, &points, noise)?;
            print_json(&json!({
                "posterior": c.posterior,
                "argmax": c.posterior.argmax(),
                "degenerate": c.degenerate,
            }))?;
            Ok(Verdict(true))
        }
        Command::Risk {
            tube_a,
            tube_b,
            radii,
            aggregation,
        } => {
            let a: Pft = read_json(&tube_a)?;
            let b: Pft = read_json(&tube_b)?;
            a.validate().with_context(|| format!("tube {}", tube_a.display()))?;
            b.validate().with_context(|| format!("tube {}", tube_b.display()))?;
            let (ra, rb) = parse_radii(&radii)?;
            let aggregation = match aggregation {
                AggregationArg::Independent => Aggregation::Independent,
                AggregationArg::UnionBound => Aggregation::UnionBound,
            };
            let profile = pft_collision_risk(&a, &b, ra, rb, aggregation)?;
            print_json(&json!({ "total": profile.total, "per_step": profile.per_step }))?;
            Ok(Verdict(true))
        }
        Command::StnCheck { file } => {
            let stn: Stn = read_json(&file)?;
            match stn_check(&stn) {
                StnResult::Feasible(schedule) => {
                    print_json(&json!({ "feasible": true, "schedule": schedule }))?;
                    Ok(Verdict(true))
                }
                StnResult::Infeasible(cycle) => {
                    let relaxed = relax_goals(&stn).ok();
                    print_json(&json!({ "feasible": false, "conflict": cycle, "relaxed": relaxed }))?;
                    Ok(Verdict(false))
                }
            }
        }
        Command::Plan { scenario, snapshot } => {
            let sim = simulator(&scenario, None, None)?;
            let snap: Snapshot = read_json(&snapshot)?;
            let d = sim.audit(&snap)?;
            print_json(&d)?;
            Ok(Verdict(d.action.is_some()))
        }
    }
}

fn parse_radii(text: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        bail!("--radii expects RA,RB, got {text:?}");
    };
    let ra: f64 = a.parse().with_context(|| format!("radius {a:?}"))?;
    let rb: f64 = b.parse().with_context(|| format!("radius {b:?}"))?;
    Ok((ra, rb))
}
