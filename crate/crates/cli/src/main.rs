use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use bouss::config::{Config, Fields};
use bouss::io::{self, Manifest, RunDir};
use bouss::localization::{localized_plan, Node};
use bouss::solver::{solve, NoMeanFlow, SolverParams, State, SteadyForcing};
use bouss::spectral::SpectralField;
use bouss::steering::{
    emit_velocity_form, uniformity_spread, Experiment, Forces, ScheduleRow, Setup, SteeringProblem, SweepInputs,
    VelocityOption,
};
use bouss::verify::{self, Suite, VerifyInputs};

#[derive(Parser)]
#[command(name = "bouss", version, about = "Small-time steering of the 2D Boussinesq system on the torus")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root, overriding `output.dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Uncontrolled run from `(w0, theta0)` to `T`.
    Simulate {
        /// Trajectory sample spacing.
        #[arg(long, default_value_t = 0.01)]
        record_every: f64,
    },
    /// Linear pipeline only: localized control for `(w_T, theta_T)`.
    Synthesize {
        /// Control snapshots per parking window.
        #[arg(long, default_value_t = 4)]
        per_window: usize,
    },
    /// Staged plan from `(w0, theta0)` to `(w_T, theta_T)` with a ladder over `delta_0`.
    Steer {
        #[arg(long, value_enum, default_value_t = EmitForm::Vertical)]
        emit: EmitForm,
    },
    /// Discrepancy against `delta` over the ladder.
    Sweep {
        #[arg(long, value_enum)]
        experiment: ExperimentArg,
        /// Extra forcing amplitudes; each adds a sweep and the spread is reported.
        #[arg(long, value_delimiter = ',')]
        forcing_amplitudes: Vec<f64>,
    },
    /// Invariant suites.
    Verify {
        /// Suites to run; all when omitted.
        #[arg(long, value_delimiter = ',')]
        suite: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitForm {
    /// Temperature control plus a vertical velocity control.
    Vertical,
    /// Temperature control alone, with the mean-velocity feedback terms.
    Temperature,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    TemperatureStep,
    VorticityStep,
    ScaledControlIdentity,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::TemperatureStep => Experiment::TemperatureStep,
            ExperimentArg::VorticityStep => Experiment::VorticityStep,
            ExperimentArg::ScaledControlIdentity => Experiment::ScaledControlIdentity,
        }
    }
}

struct Ctx {
    cfg: Config,
    base: PathBuf,
    hash: String,
    root: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let (cfg, base) = match &cli.config {
            Some(p) => (
                Config::load(p).with_context(|| format!("reading {}", p.display()))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (Config::default(), PathBuf::from(".")),
        };
        let hash = cfg.hash()?;
        let root = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        Ok(Ctx { cfg, base, hash, root })
    }

    fn run_dir(&self, command: &str, setup: Option<&Setup>) -> Result<RunDir> {
        let dir = RunDir::create(&self.root, command, &self.hash)?;
        dir.write_config(&self.cfg.to_toml()?)?;
        dir.write_manifest(&Manifest::new(command, &self.hash, setup.map(|s| &s.partition)))?;
        info!("writing to {}", dir.path.display());
        Ok(dir)
    }

    fn fields(&self) -> Result<Fields> {
        Ok(self.cfg.fields(&self.base)?)
    }

    fn setup(&self) -> Result<Setup> {
        let t = Instant::now();
        let c = &self.cfg;
        let s = Setup::new(c.grid.n, c.omega, &c.geometry, &c.flow, &c.synthesis)?;
        info!("setup in {:.1?}", t.elapsed());
        Ok(s)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let ctx = Ctx::load(cli)?;
    match &cli.command {
        Command::Simulate { record_every } => simulate(&ctx, *record_every),
        Command::Synthesize { per_window } => synthesize(&ctx, *per_window),
        Command::Steer { emit } => steer(&ctx, *emit),
        Command::Sweep { experiment, forcing_amplitudes } => sweep(&ctx, (*experiment).into(), forcing_amplitudes),
        Command::Verify { suite, seed } => verify_cmd(&ctx, suite, *seed),
    }
}

fn snapshot(dir: &RunDir, name: &str, f: &SpectralField, m: usize) -> Result<()> {
    Ok(io::write_field(&dir.file(name), f, m)?)
}

fn simulate(ctx: &Ctx, record_every: f64) -> Result<bool> {
    let c = &ctx.cfg;
    let f = ctx.fields()?;
    let dir = ctx.run_dir("simulate", None)?;
    let m = c.grid.m_max;
    let params = SolverParams { record_every, m, ..c.steer_params().solver() };
    let forcing = SteadyForcing { h1: f.forces.phi.clone(), h2: f.forces.psi.clone() };
    let init = State::new(0.0, f.w0.clone(), f.theta0.clone());
    let t = Instant::now();
    let run = solve(&init, c.physics.t_end, &c.physics(), &forcing, &NoMeanFlow, &params)?;
    info!("{} steps in {:.1?}", run.steps, t.elapsed());
    io::write_rows(&dir.file("trajectory.csv"), &run.samples)?;
    let s = &run.final_state;
    io::write_metrics(
        &dir.file("metrics.csv"),
        &[
            ("steps".into(), run.steps as f64),
            ("final_w_norm".into(), s.w.norm(m - 1)),
            ("final_theta_norm".into(), s.theta.norm(m)),
            ("w_error".into(), s.w.sub(&f.w_t).norm(m - 1)),
            ("theta_error".into(), s.theta.sub(&f.theta_t).norm(m)),
        ],
    )?;
    snapshot(&dir, "w_final.txt", &s.w, m)?;
    snapshot(&dir, "theta_final.txt", &s.theta, m)?;
    Ok(true)
}

fn synthesize(ctx: &Ctx, per_window: usize) -> Result<bool> {
    let c = &ctx.cfg;
    let f = ctx.fields()?;
    let setup = ctx.setup()?;
    let planner = setup.planner()?;
    let dir = ctx.run_dir("synthesize", Some(&setup))?;
    let m = c.grid.m_max;
    let mut v1 = f.w_t.clone();
    v1.set_mean(0.0);
    let mut th1 = f.theta1.clone().unwrap_or_else(|| f.theta_t.clone());
    th1.set_mean(0.0);
    let t = Instant::now();
    let plan = localized_plan(&v1, &th1, &planner.synth, &setup.partition, Some(c.targets.epsilon))?;
    info!("plan in {:.1?}", t.elapsed());
    if per_window == 0 || plan.samples % per_window != 0 {
        bail!("per_window {per_window} must divide {} samples", plan.samples);
    }
    let stride = plan.samples / per_window;
    let mut rows = Vec::new();
    let mut coeffs = csv::Writer::from_path(dir.file("coefficients.csv"))?;
    let mut header = vec!["j".to_string(), "i".into(), "t".into()];
    header.extend((1..=12).map(|l| format!("alpha_{l}")));
    coeffs.write_record(&header)?;
    for j in 0..plan.intervals() {
        for i in (0..=plan.samples).step_by(stride) {
            let nd = Node { j, i };
            let t = plan.time(nd);
            rows.push(ScheduleRow { t, gamma_bar: setup.conv.y2(t), gamma: t, gammas: plan.gammas(nd) });
            if plan.window(j).is_some() {
                let mut rec = vec![j.to_string(), i.to_string(), format!("{t:e}")];
                rec.extend(plan.alpha[i].iter().map(|a| format!("{a:e}")));
                coeffs.write_record(&rec)?;
            }
        }
    }
    coeffs.flush()?;
    io::write_schedule(&dir.file("schedule.csv"), &rows)?;
    let snaps = dir.file("eta");
    std::fs::create_dir_all(&snaps)?;
    for j in (0..plan.intervals()).filter(|&j| plan.window(j).is_some()) {
        let nd = Node { j, i: plan.samples / 2 };
        io::write_values(&snaps.join(format!("eta_{j:02}.txt")), setup.n, m, &plan.eta_physical(nd))?;
    }
    let ends = plan.linear_endpoints();
    snapshot(&dir, "v_endpoint.txt", &ends.v, m)?;
    snapshot(&dir, "theta_endpoint.txt", &ends.theta, m)?;
    let r = &plan.report;
    io::write_metrics(
        &dir.file("metrics.csv"),
        &[
            ("theta_sharp_rel".into(), r.theta_sharp_rel),
            ("endpoint_preservation_rel".into(), r.endpoint_preservation_rel),
            ("v_identity_rel".into(), r.v_identity_rel),
            ("f_average".into(), r.f_average),
            ("max_outside".into(), r.max_outside),
            ("max_mean_rel".into(), r.max_mean_rel),
            ("v_error".into(), r.v_error),
            ("theta_error".into(), r.theta_error),
            ("target_norm".into(), r.target_norm),
        ],
    )?;
    Ok(!r.failed)
}

fn steer(ctx: &Ctx, emit: EmitForm) -> Result<bool> {
    let c = &ctx.cfg;
    let f = ctx.fields()?;
    let setup = ctx.setup()?;
    let planner = setup.planner()?;
    let dir = ctx.run_dir("steer", Some(&setup))?;
    let params = c.steer_params();
    let m = params.m;
    let mut w0 = f.w0.clone();
    w0.set_mean(0.0);
    let mut w_t = f.w_t.clone();
    w_t.set_mean(0.0);
    let problem = SteeringProblem {
        physics: c.physics(),
        t_end: c.physics.t_end,
        w0,
        w_t,
        theta0: f.theta0.clone(),
        theta_t: f.theta_t.clone(),
        forces: f.forces.clone(),
        epsilon: c.targets.epsilon,
    };
    let t = Instant::now();
    let (plan, res) = planner.plan_and_steer(&problem, &params)?;
    info!("steered in {:.1?}: error {:.4e} against baseline {:.4e}", t.elapsed(), res.final_error, res.baseline_error);
    io::write_rows(&dir.file("ladder.csv"), &res.ladder)?;
    io::write_schedule(&dir.file("schedule.csv"), &plan.schedule(params.emit_per_window)?)?;
    let mut metrics: Vec<(String, f64)> = vec![
        ("baseline_error".into(), res.baseline_error),
        ("final_error".into(), res.final_error),
        ("w_error".into(), res.w_error),
        ("theta_error".into(), res.theta_error),
        ("unreachable_residual".into(), res.unreachable_residual),
        ("velocity_error".into(), res.velocity_error),
        ("c0_hat".into(), res.c0_hat),
        ("reduction_holds".into(), res.reduction_holds as u8 as f64),
        ("improved".into(), res.improved as u8 as f64),
        ("within_epsilon".into(), res.within_epsilon as u8 as f64),
    ];
    for (k, d) in res.deltas.iter().enumerate() {
        metrics.push((format!("delta_{k}"), *d));
    }
    let times = plan.emission_times(params.emit_per_window)?;
    let option = match emit {
        EmitForm::Vertical => VelocityOption::VerticalVelocity,
        EmitForm::Temperature => VelocityOption::TemperatureOnly,
    };
    let trajectory = (res.trajectory.len() == times.len()).then_some(res.trajectory.as_slice());
    let emitted = emit_velocity_form(&plan, option, c.physics.tau, &times, trajectory)?;
    let snaps = dir.file("controls");
    std::fs::create_dir_all(&snaps)?;
    let mut outside = 0.0f64;
    for (q, e) in emitted.iter().enumerate() {
        outside = outside.max(e.max_outside);
        io::write_values(&snaps.join(format!("temperature_{q:04}.txt")), setup.n, m, &e.temperature)?;
        if let Some(v) = &e.velocity2 {
            io::write_values(&snaps.join(format!("velocity2_{q:04}.txt")), setup.n, m, v)?;
        }
    }
    metrics.push(("control_max_outside".into(), outside));
    io::write_metrics(&dir.file("metrics.csv"), &metrics)?;
    if let Some(s) = &res.final_state {
        snapshot(&dir, "w_final.txt", &s.w, m)?;
        snapshot(&dir, "theta_final.txt", &s.theta, m)?;
    }
    snapshot(&dir, "xi.txt", &plan.xi, m)?;
    Ok(res.improved)
}

fn sweep(ctx: &Ctx, experiment: Experiment, amplitudes: &[f64]) -> Result<bool> {
    let c = &ctx.cfg;
    let f = ctx.fields()?;
    let setup = ctx.setup()?;
    let planner = setup.planner()?;
    let dir = ctx.run_dir("sweep", Some(&setup))?;
    let params = c.steer_params();
    let theta1 = match (&f.theta1, experiment) {
        (Some(t), _) => t.clone(),
        (None, Experiment::VorticityStep) => f.theta0.clone(),
        (None, _) => f.theta_t.clone(),
    };
    let xi = f.xi.clone().unwrap_or_else(|| SpectralField::from_fn(setup.n, |x, _| x.cos()));
    let mut w0 = f.w0.clone();
    w0.set_mean(0.0);
    let inputs = SweepInputs { physics: c.physics(), w0, theta0: f.theta0.clone(), theta1, xi, forces: f.forces.clone() };
    let mut tables = vec![planner.sweep_delta(experiment, &params.ladder, &inputs, &params)?];
    for &a in amplitudes {
        let forces = Forces {
            phi: Some(SpectralField::from_fn(setup.n, |x, y| a * (x + y).sin())),
            psi: Some(SpectralField::from_fn(setup.n, |x, y| a * (2.0 * y - x).cos())),
        };
        let inp = SweepInputs { forces, ..inputs.clone() };
        tables.push(planner.sweep_delta(experiment, &params.ladder, &inp, &params)?);
    }
    let mut w = csv::Writer::from_path(dir.file("sweep.csv"))?;
    w.write_record(["forcing", "delta", "discrepancy", "secondary", "steps", "failed"])?;
    for (q, t) in tables.iter().enumerate() {
        let label = if q == 0 { "config".to_string() } else { format!("{:e}", amplitudes[q - 1]) };
        for r in &t.rows {
            w.write_record([
                label.clone(),
                format!("{:e}", r.delta),
                format!("{:e}", r.discrepancy),
                format!("{:e}", r.secondary),
                r.steps.to_string(),
                r.failed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let first = &tables[0];
    let mut metrics = vec![
        ("strictly_decreasing".into(), first.strictly_decreasing() as u8 as f64),
        ("slope".into(), first.slope.unwrap_or(f64::NAN)),
    ];
    if tables.len() > 1 {
        metrics.push(("uniformity_spread".into(), uniformity_spread(&tables)));
    }
    io::write_metrics(&dir.file("metrics.csv"), &metrics)?;
    for r in &first.rows {
        println!("delta {:<8} discrepancy {:.6e}{}", r.delta, r.discrepancy, if r.failed { " (failed)" } else { "" });
    }
    Ok(first.strictly_decreasing())
}

fn verify_cmd(ctx: &Ctx, names: &[String], seed: u64) -> Result<bool> {
    let suites: Vec<Suite> = if names.is_empty() {
        Suite::ALL.to_vec()
    } else {
        names.iter().map(|s| Suite::parse(s).with_context(|| format!("unknown suite {s}"))).collect::<Result<_>>()?
    };
    let setup = if suites.contains(&Suite::Localization) { Some(ctx.setup()?) } else { None };
    let dir = ctx.run_dir("verify", setup.as_ref())?;
    let inputs = VerifyInputs { n: ctx.cfg.grid.n, physics: ctx.cfg.physics(), setup: setup.as_ref(), seed };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(verify::run(s, &inputs)?);
    }
    for c in &checks {
        println!("{} {:<12} {:<36} {:.3e} (tol {:.0e})", if c.pass { "PASS" } else { "FAIL" }, c.suite, c.name, c.value, c.tol);
    }
    io::write_rows(&dir.file("checks.csv"), &checks)?;
    Ok(checks.iter().all(|c| c.pass))
}
