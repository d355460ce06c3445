mod prompt;

use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sas_core::config::Config;
use sas_core::domain::ActionDomain;
use sas_core::goal_model::GoalModel;
use sas_core::monitor::Event;
use sas_core::orchestrator::{Orchestrator, Setup};
use sas_core::problem::ProblemSpec;
use sas_core::search::TraceFilter;
use sas_core::sim::{bundled_scenario, HumanPolicy, Scenario, Simulation};
use sas_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "sas", version, about = "Adaptive security loop for a simulated smart home")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario, by bundled name or JSON file.
    Run {
        scenario: String,
        /// Human answers as JSON; defaults to the scenario's own policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Ask the questions on the terminal instead.
        #[arg(long, conflicts_with = "policy")]
        interactive: bool,
        /// Write the run report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loop settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Feed a JSON Lines event log through the loop and print the anomalies.
    Replay {
        events: PathBuf,
        /// Take the device roster from this bundled scenario.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parse and validate a goal model, or an action domain (`.domain`).
    CheckModel { file: PathBuf },
    /// Compare bounded search with exhaustive enumeration on a problem file.
    Oracle {
        problem: PathBuf,
        #[arg(long)]
        horizon: Option<u32>,
    },
    /// Serve the HTTP interface.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_config(path: Option<&Path>) -> Res<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn load_scenario(arg: &str) -> Res<Scenario> {
    let path = Path::new(arg);
    if path.is_file() {
        Ok(Scenario::from_json(&read(path)?)?)
    } else {
        Ok(bundled_scenario(arg)?)
    }
}

fn run(scenario: &str, policy: Option<&Path>, interactive: bool, report: Option<&Path>, seed: Option<u64>, config: Option<&Path>) -> Res<bool> {
    let scenario = load_scenario(scenario)?;
    let config = load_config(config)?;
    let policy = match (policy, interactive) {
        (_, true) => None,
        (Some(p), false) => Some(HumanPolicy::from_json(&read(p)?)?),
        (None, false) => Some(scenario.policy.clone()),
    };
    let mut sim = Simulation::new(scenario, config, policy, seed)?;
    if interactive {
        let stdin = io::stdin();
        let mut input = stdin.lock();
        let mut out = io::stdout();
        'run: loop {
            let pending: Vec<_> = sim.orchestrator().pending_interventions().cloned().collect();
            for req in pending {
                match prompt::ask(&req, &mut input, &mut out)? {
                    Some(a) => {
                        sim.answer(&req.id, a)?;
                    }
                    None => break 'run,
                }
            }
            if sim.finished() {
                if sim.orchestrator().pending_interventions().next().is_none() {
                    break;
                }
                continue;
            }
            sim.advance(1)?;
        }
    } else {
        sim.run_to_end()?;
    }
    let r = sim.report();
    for c in &r.checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        let check = serde_json::to_string(&c.check)?;
        if c.detail.is_empty() {
            println!("{mark} {check}");
        } else {
            println!("{mark} {check}: {}", c.detail);
        }
    }
    println!(
        "{}: {} anomalies, {} interventions, {} audit records, model v{}, {}",
        r.scenario,
        r.anomalies.len(),
        r.interventions.len(),
        r.audit.len(),
        r.model_version,
        if r.quiescent { "quiescent" } else { "not quiescent" }
    );
    if let Some(p) = report {
        fs::write(p, r.to_json() + "\n").map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(r.passed)
}

fn replay(events: &Path, scenario: Option<&str>, config: Option<&Path>) -> Res<bool> {
    let mut setup = Setup::smart_home();
    if let Some(name) = scenario {
        let s = bundled_scenario(name)?;
        setup.devices = s.devices;
        if !s.positives.is_empty() {
            setup.positives = s.positives;
        }
    }
    let mut o = Orchestrator::new(load_config(config)?, setup);
    let file = fs::File::open(events).map_err(|e| format!("{}: {e}", events.display()))?;
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        for id in o.ingest(event)? {
            println!("{}", serde_json::to_string(&o.anomaly(&id).expect("ingest returns known ids"))?);
        }
    }
    for req in o.pending_interventions() {
        eprintln!("pending {} ({}): {}", req.id, req.key, req.question);
    }
    Ok(true)
}

fn check_model(file: &Path) -> Res<bool> {
    let src = read(file)?;
    if file.extension().is_some_and(|e| e == "domain") {
        let d = ActionDomain::parse(&src)?;
        println!(
            "ok: domain {} with {} agents, {} action schemas, {} ground actions",
            d.name(),
            d.agents().len(),
            d.schemas().len(),
            d.ground_actions().len()
        );
    } else {
        let m = GoalModel::parse(&src)?;
        m.validate()?;
        println!(
            "ok: {} goal nodes, {} assumptions ({} active), {} controls ({} enacted)",
            m.nodes.len(),
            m.assumptions.len(),
            m.active_assumptions().count(),
            m.controls.len(),
            m.enacted_controls().count()
        );
    }
    Ok(true)
}

fn oracle(problem: &Path, horizon: Option<u32>) -> Res<bool> {
    let spec = ProblemSpec::from_json(&read(problem)?)?;
    let mut p = spec.build()?;
    if let Some(h) = horizon {
        p = p.with_horizon(h);
    }
    let set = p.enumerate_traces(TraceFilter::Violating)?;
    let found = p.find_violating_trace()?;
    let agree = match &found {
        Some(t) => set.iter().any(|v| v.actions == t.actions),
        None => set.is_empty(),
    };
    let out = serde_json::json!({
        "problem": spec.name,
        "horizon": p.horizon,
        "violating": set.len(),
        "found": found.as_ref().map(|t| t.render()),
        "agree": agree,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(agree)
}

fn serve(config: Option<&Path>, bind: Option<String>, data_dir: Option<PathBuf>) -> Res<bool> {
    let mut cfg = match config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(b) = bind {
        cfg.bind = b;
    }
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    eprintln!("listening on http://{}", cfg.bind);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(sas_service::serve(cfg)).map_err(|e| e.to_string())?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run {
            scenario,
            policy,
            interactive,
            report,
            seed,
            config,
        } => run(&scenario, policy.as_deref(), interactive, report.as_deref(), seed, config.as_deref()),
        Cmd::Replay { events, scenario, config } => replay(&events, scenario.as_deref(), config.as_deref()),
        Cmd::CheckModel { file } => check_model(&file),
        Cmd::Oracle { problem, horizon } => oracle(&problem, horizon),
        Cmd::Serve { config, bind, data_dir } => serve(config.as_deref(), bind, data_dir),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
