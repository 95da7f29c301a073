//! Batch front end: run scenarios, compare controllers on identical
//! profiles, solve the frozen-time reference problem, validate fixtures,
//! and emit plot-ready CSV traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridofo::error::Error;
use gridofo::sim::{
    self, compare, metrics, ControllerKind, Scenario, ScenarioSpec, TraceWriter,
    VALIDATED_INVARIANTS,
};

const TWO_BUS: &str = include_str!("../fixtures/two_bus.json");
const FEEDER15: &str = include_str!("../fixtures/feeder15.json");

#[derive(Parser)]
#[command(
    name = "gridofo",
    version,
    about = "Closed-loop feedback optimization for small distribution feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop scenario and write trace.csv + summary.json
    Run(RunArgs),
    /// Run the QP and PG controllers on identical seeds and profiles
    Compare(CompareArgs),
    /// Solve the frozen-time reference problem at one step
    Opf(OpfArgs),
    /// Check a scenario file against the model and profile invariants
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Write the bundled example scenarios into a directory
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "inner-steps")]
    inner_steps: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long = "oracle-every")]
    oracle_every: Option<usize>,
    #[arg(long = "exact-pf-in-loop")]
    exact_pf_in_loop: bool,
}

impl Overrides {
    fn apply(&self, spec: &mut ScenarioSpec) {
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(n) = self.inner_steps {
            spec.n_inner = n;
        }
        if let Some(h) = self.horizon {
            spec.horizon = h;
        }
        if let Some(c) = self.oracle_every {
            spec.oracle_every = c;
        }
        if self.exact_pf_in_loop {
            spec.exact_pf_in_loop = true;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Controller override: qp, pg, or frozen
    #[arg(long)]
    controller: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_controller(name: &str) -> Result<ControllerKind, Error> {
    match name {
        "qp" => Ok(ControllerKind::Qp),
        "pg" => Ok(ControllerKind::Pg),
        "frozen" => Ok(ControllerKind::Frozen),
        other => Err(Error::Config(format!(
            "unknown controller '{other}' (expected qp, pg, or frozen)"
        ))),
    }
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OpfArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Step at which the frozen problem is taken
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Number of random restarts for stationary-point checks
    #[arg(long = "multi-start", default_value_t = 1)]
    multi_start: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("GRIDOFO_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Opf(args) => cmd_opf(args),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Fixtures { out } => cmd_fixtures(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(step) = e.step() {
                eprintln!("error at step {step}: {e}");
            } else {
                eprintln!("error: {e}");
            }
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_spec(path: &Path) -> Result<ScenarioSpec, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn base_dir(path: &Path) -> Option<PathBuf> {
    path.parent().map(PathBuf::from)
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.scenario)?;
    args.overrides.apply(&mut spec);
    if let Some(name) = &args.controller {
        spec.controller.controller = parse_controller(name)?;
    }
    let scenario = Scenario::from_spec(spec, base_dir(&args.scenario).as_deref())?;
    fs::create_dir_all(&args.out)?;

    let trace_path = args.out.join("trace.csv");
    let file = fs::File::create(&trace_path)?;
    let mut writer = TraceWriter::new(&scenario.model, file);
    let trace = sim::run_scenario_streaming(&scenario, &mut writer)?;

    let label = scenario.spec.controller.controller.to_string();
    let summary = metrics(&trace, &label);
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{label}: {} steps, final tracking error {}, max violation {:.4} p.u. -> {}",
        summary.horizon,
        summary
            .final_tracking_error
            .map(|e| format!("{e:.3e}"))
            .unwrap_or_else(|| "n/a".into()),
        summary.viol_max,
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.scenario)?;
    args.overrides.apply(&mut spec);
    let dir = base_dir(&args.scenario);
    fs::create_dir_all(&args.out)?;

    let mut spec_qp = spec.clone();
    spec_qp.controller.controller = ControllerKind::Qp;
    let mut spec_pg = spec;
    spec_pg.controller.controller = ControllerKind::Pg;

    let run_one = |spec: ScenarioSpec, name: &str| -> Result<sim::Summary, Error> {
        let scenario = Scenario::from_spec(spec, dir.as_deref())?;
        let file = fs::File::create(args.out.join(format!("trace_{name}.csv")))?;
        let mut writer = TraceWriter::new(&scenario.model, file);
        let trace = sim::run_scenario_streaming(&scenario, &mut writer)?;
        let summary = metrics(&trace, name);
        fs::write(
            args.out.join(format!("summary_{name}.json")),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(summary)
    };

    let (qp_summary, pg_summary) = std::thread::scope(|scope| {
        let qp = scope.spawn(|| run_one(spec_qp, "qp"));
        let pg = scope.spawn(|| run_one(spec_pg, "pg"));
        (
            qp.join().expect("qp run panicked"),
            pg.join().expect("pg run panicked"),
        )
    });
    let report = compare(qp_summary?, pg_summary?);
    fs::write(
        args.out.join("comparison.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    match (&report.ratio_steps_to_1e3, &report.reason) {
        (Some(r), _) => println!(
            "qp settles in {:?} steps, pg in {:?}; ratio {r:.1}",
            report.qp.steps_to.to_1e3, report.pg.steps_to.to_1e3
        ),
        (None, Some(reason)) => println!("no ratio: {reason}"),
        _ => {}
    }
    Ok(())
}

fn cmd_opf(args: OpfArgs) -> Result<(), Error> {
    let spec = load_spec(&args.scenario)?;
    let scenario = Scenario::from_spec(spec, base_dir(&args.scenario).as_deref())?;
    let t = args.step;
    if t >= scenario.spec.horizon {
        return Err(Error::Config(format!(
            "step {t} outside horizon {}",
            scenario.spec.horizon
        )));
    }
    let theta = gridofo::Theta {
        d: scenario.d_profiles.at(t),
        lo: scenario.lo_profiles.at(t),
        hi: scenario.hi_profiles.at(t),
    };
    let sol = if args.multi_start > 1 {
        gridofo::oracle::solve_acopf_multistart(
            &scenario.model,
            &theta,
            &scenario.ofo,
            1e-9,
            500,
            args.multi_start,
            scenario.spec.seed,
        )?
    } else {
        gridofo::oracle::solve_acopf(&scenario.model, &theta, &scenario.ofo, 1e-9, 500)?
    };
    let out = serde_json::json!({
        "step": t,
        "u_star": sol.u_star.as_slice(),
        "f_star": sol.f_star,
        "kkt_residual": sol.kkt_residual,
        "active_set": sol.active_set,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Error> {
    match Scenario::from_path(path) {
        Ok(scenario) => {
            for name in VALIDATED_INVARIANTS {
                println!("ok: {name}");
            }
            println!(
                "OK: {} buses, {} inputs, {} disturbances, horizon {}",
                scenario.model.n_buses(),
                scenario.model.n_inputs(),
                scenario.model.n_disturbances(),
                scenario.spec.horizon
            );
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn cmd_fixtures(out: &Path) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    for (name, text) in [("two_bus.json", TWO_BUS), ("feeder15.json", FEEDER15)] {
        fs::write(out.join(name), text)?;
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}
