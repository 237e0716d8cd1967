use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use torus_vm::experiments::{
    run_absorb, run_approx, run_bending, run_characteristics, run_control, run_gcc_plan, run_geometry, run_maxwell,
    run_scaling, run_strip, Check, Outcome, RunConfig,
};

#[derive(Parser)]
#[command(name = "torus-vm", version, about = "Vlasov-Maxwell experiments on the unit torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration; missing blocks and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for report.json and the CSV artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for particle pushes and censuses.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replaces the seed of every stochastic experiment.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Control-condition census, bad directions and the constant-field certificate.
    CheckGeometry,
    /// Well-prepared identity, closed form against RK4, and energy conservation.
    MaxwellEvolve,
    /// Large-light-speed error sweep.
    ApproxSweep,
    /// Steering the fields with a current supported in the control set.
    ControlMaxwell,
    /// Characteristic checks and the bending census.
    BendVerify,
    /// Reference plan for the strip or the ball-union control set.
    ReferenceBuild {
        #[arg(long, value_enum, default_value = "strip")]
        case: Case,
    },
    /// Picard iteration with absorption on the strip plan.
    AbsorbRun,
    /// Time reversal, rescaling and the large-time pipeline.
    RescaleCheck,
}

#[derive(ValueEnum, Clone, Copy)]
enum Case {
    Strip,
    Gcc,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::CheckGeometry => "check-geometry",
            Self::MaxwellEvolve => "maxwell-evolve",
            Self::ApproxSweep => "approx-sweep",
            Self::ControlMaxwell => "control-maxwell",
            Self::BendVerify => "bend-verify",
            Self::ReferenceBuild { case: Case::Strip } => "reference-build --case strip",
            Self::ReferenceBuild { case: Case::Gcc } => "reference-build --case gcc",
            Self::AbsorbRun => "absorb-run",
            Self::RescaleCheck => "rescale-check",
        }
    }
}

/// Failure kinds mapped to exit codes.
enum Failure {
    Config(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Run(e)
    }
}

fn lib(e: torus_vm::Error) -> Failure {
    match e {
        torus_vm::Error::InvalidInput(_) | torus_vm::Error::InvalidGrid(_) => Failure::Config(e.to_string()),
        other => Failure::Run(other.into()),
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Failure::Config(format!("{}: at `{at}`: {}", path.display(), e.inner()))
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = create(dir, name)?;
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// Checks and serialized details of one experiment.
struct Section {
    checks: Vec<Check>,
    details: Value,
}

fn section<T: serde::Serialize>(name: &str, o: &Outcome<T>) -> Result<(Vec<Check>, (String, Value))> {
    let v = json!({ "seconds": o.seconds, "checks": o.checks, "details": o.details });
    Ok((o.checks.clone(), (name.to_string(), v)))
}

fn collect(parts: Vec<(Vec<Check>, (String, Value))>) -> Section {
    let mut checks = Vec::new();
    let mut details = serde_json::Map::new();
    for (c, (k, v)) in parts {
        checks.extend(c);
        details.insert(k, v);
    }
    Section { checks, details: Value::Object(details) }
}

fn execute(cmd: Command, cfg: &RunConfig, out: &Path, verbose: bool) -> std::result::Result<Section, Failure> {
    let parts = match cmd {
        Command::CheckGeometry => {
            let o = run_geometry(&cfg.geometry).map_err(lib)?;
            let oracle = &o.details.oracle_directions;
            write_csv(
                out,
                "bad_directions.csv",
                "p,q,in_oracle",
                o.details.bad_directions.iter().map(|d| format!("{},{},{}", d[0], d[1], u8::from(oracle.contains(d)))),
            )?;
            vec![section("geometry", &o)?]
        }
        Command::MaxwellEvolve => {
            let o = run_maxwell(&cfg.maxwell).map_err(lib)?;
            write_csv(out, "energy.csv", "t,energy", o.details.energy.iter().map(|s| format!("{},{}", s.t, s.energy)))?;
            write_csv(
                out,
                "oracle_modes.csv",
                "k1,k2,difference",
                o.details.modes.iter().map(|m| format!("{},{},{}", m.k[0], m.k[1], m.difference)),
            )?;
            vec![section("maxwell", &o)?]
        }
        Command::ApproxSweep => {
            let o = run_approx(&cfg.approx).map_err(lib)?;
            let t = &o.details;
            write_csv(
                out,
                "errors.csv",
                "c,t,errE,errB,bound,boundB",
                t.rows.iter().map(|r| format!("{},{},{},{},{},{}", r.c, r.t, r.err_e, r.err_b, r.bound_e, r.bound_b)),
            )?;
            write_csv(
                out,
                "summary.csv",
                "c,supErrE,supErrB,scaledErrE,scaledErrB",
                t.summary.iter().map(|s| format!("{},{},{},{},{}", s.c, s.sup_err_e, s.sup_err_b, s.scaled_err_e, s.scaled_err_b)),
            )?;
            vec![section("approx", &o)?]
        }
        Command::ControlMaxwell => {
            let o = run_control(&cfg.control).map_err(lib)?;
            write_csv(
                out,
                "mode_residuals.csv",
                "k1,k2,residual",
                o.details.solution.mode_residuals.iter().map(|m| format!("{},{},{}", m.k[0], m.k[1], m.residual)),
            )?;
            vec![section("control", &o)?]
        }
        Command::BendVerify => {
            let ch = run_characteristics(&cfg.characteristics).map_err(lib)?;
            write_csv(
                out,
                "gyro.csv",
                "c,radius_error,speed_drift",
                ch.details.gyro.iter().map(|g| format!("{},{},{}", g.c.map_or("inf".to_string(), |c| c.to_string()), g.radius_error, g.speed_drift)),
            )?;
            let bend = run_bending(&cfg.bending).map_err(lib)?;
            let mut w = create(out, "census.csv")?;
            bend.details.census.write_csv(&mut w).map_err(lib)?;
            w.flush().map_err(anyhow::Error::from)?;
            vec![section("characteristics", &ch)?, section("bending", &bend)?]
        }
        Command::ReferenceBuild { case: Case::Strip } => {
            let o = run_strip(&cfg.strip).map_err(lib)?;
            write_csv(
                out,
                "deviation.csv",
                "c,position,velocity,compounded,remnant_velocity_bound",
                o.details
                    .sweep
                    .rows
                    .iter()
                    .map(|r| format!("{},{},{},{},{}", r.c, r.position, r.velocity, r.compounded, r.remnant_velocity_bound)),
            )?;
            vec![section("strip", &o)?]
        }
        Command::ReferenceBuild { case: Case::Gcc } => {
            let o = run_gcc_plan(&cfg.gcc).map_err(lib)?;
            let misses = o.details.census.misses.iter().chain(&o.details.idle.misses);
            write_csv(out, "misses.csv", "x1,x2,v1,v2", misses.map(|s| format!("{},{},{},{}", s.x[0], s.x[1], s.v[0], s.v[1])))?;
            vec![section("gcc", &o)?]
        }
        Command::AbsorbRun => {
            let o = run_absorb(&cfg.absorb, &cfg.absorb_limits, |r| {
                if verbose {
                    eprintln!("iteration {}: residual {:.3e} (relative {:.3e})", r.iteration, r.residual, r.relative_residual);
                }
            })
            .map_err(lib)?;
            let r = &o.details;
            write_csv(
                out,
                "iterations.csv",
                "iteration,residual,relative_residual,max_speed",
                r.iterations.iter().map(|i| format!("{},{},{},{}", i.iteration, i.residual, i.relative_residual, i.max_speed)),
            )?;
            write_csv(
                out,
                "charge.csv",
                "iteration,initial,surviving,absorbed,relative_defect,extension_defect",
                r.iterations.iter().map(|i| {
                    let l = &i.ledger;
                    format!("{},{},{},{},{},{}", i.iteration, l.initial, l.surviving, l.absorbed, l.relative_defect, l.extension_defect)
                }),
            )?;
            let mut w = create(out, "particles.bin")?;
            for p in r.last.iter().flat_map(|it| &it.ensemble.particles) {
                for x in [p.x[0], p.x[1], p.v[0], p.v[1], p.w] {
                    w.write_all(&x.to_le_bytes()).map_err(anyhow::Error::from)?;
                }
            }
            w.flush().map_err(anyhow::Error::from)?;
            let census = serde_json::to_string_pretty(&r.census).map_err(anyhow::Error::from)?;
            fs::write(out.join("census.json"), census + "\n").map_err(anyhow::Error::from)?;
            vec![section("absorb", &o)?]
        }
        Command::RescaleCheck => {
            let o = run_scaling(&cfg.scaling).map_err(lib)?;
            let r = &o.details;
            write_csv(
                out,
                "residuals.csv",
                "case,position,velocity,electric,magnetic",
                [("base", &r.base_residual), ("reversed", &r.reversed_residual), ("rescaled", &r.rescaled_residual)]
                    .into_iter()
                    .map(|(n, t)| format!("{n},{},{},{},{}", t.position, t.velocity, t.electric, t.magnetic)),
            )?;
            vec![section("scaling", &o)?]
        }
    };
    Ok(collect(parts))
}

fn run(cli: &Cli) -> std::result::Result<bool, Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed_override {
        cfg.override_seed(seed);
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Run(anyhow::anyhow!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let start = Instant::now();
    let section = execute(cli.command, &cfg, &cli.out, cli.verbose)?;
    let seconds = start.elapsed().as_secs_f64();
    let pass = section.checks.iter().all(|c| c.pass);
    let mut criteria: Vec<u8> = section.checks.iter().filter_map(|c| c.criterion).collect();
    criteria.dedup();
    let per_criterion: Vec<Value> = criteria
        .iter()
        .map(|&k| json!({ "criterion": k, "pass": section.checks.iter().filter(|c| c.criterion == Some(k)).all(|c| c.pass) }))
        .collect();
    for c in &section.checks {
        let tag = c.criterion.map_or(String::from("  "), |k| format!("{k:>2}"));
        println!("{} [{tag}] {}: {:.6e} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.measured, c.requirement);
    }
    let report = json!({
        "command": cli.command.name(),
        "config": cfg,
        "pass": pass,
        "criteria": per_criterion,
        "checks": section.checks,
        "results": section.details,
        "wall_clock_seconds": seconds,
        "versions": { "torus-vm-cli": env!("CARGO_PKG_VERSION"), "torus-vm": torus_vm::VERSION },
    });
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(cli.out.join("report.json"), text + "\n").context("writing report.json")?;
    if cli.verbose {
        eprintln!("{} finished in {seconds:.1} s; artifacts in {}", cli.command.name(), cli.out.display());
    }
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
