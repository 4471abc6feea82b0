//! Command-line front end.
//!
//! Each run writes `<stem>.<command>.csv` (one row per estimate or check, preceded by a
//! `#` line holding the resolved configuration) and `<stem>.<command>.json` into the
//! output directory. Exit status: 0 when every check passes, 1 on a statistical
//! failure, 2 on a configuration error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::concat::{ConcatPath, ConcatenationPlan};
use crate::config::{EngineKind, ExperimentConfig, Overrides, Start};
use crate::error::{Error, Result};
use crate::estimate::{
    dynkin_residual, mc_lifetime, mc_resolvent, mc_semigroup, post_widder_chain, revival_formula_test, GSpec,
    Model, ModelGenerator,
};
use crate::functions::FunctionSpec;
use crate::oracle::{exact_resolvent, exact_semigroup};
use crate::pasting::{check_consistency, projection_criterion_test, ConsistencyFunctions, Engine, Verdict};
use crate::rng::RngStream;
use crate::state_space::SpacePoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Sample composite paths and write them out.
    Simulate,
    Resolvent,
    Semigroup,
    CheckDynkin,
    CheckRevival,
    CheckPasting,
    CheckProjection,
    InvertLaplace,
}

impl Command {
    /// The command with this command-line name.
    pub fn from_name(name: &str) -> Option<Command> {
        Command::value_variants().iter().copied().find(|c| c.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Resolvent => "resolvent",
            Command::Semigroup => "semigroup",
            Command::CheckDynkin => "check-dynkin",
            Command::CheckRevival => "check-revival",
            Command::CheckPasting => "check-pasting",
            Command::CheckProjection => "check-projection",
            Command::InvertLaplace => "invert-laplace",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "concatmc", version, about = "Concatenate and paste killed Markov processes")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment file (JSON).
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long)]
    pub max_revivals: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub tolerance_sigma: Option<f64>,
    #[arg(long, env = "CONCATMC_OUT_DIR", default_value = "concatmc-out")]
    pub out_dir: PathBuf,
    /// Worker threads for replication; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Args {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            samples: self.samples,
            alpha: self.alpha,
            time: self.time,
            max_revivals: self.max_revivals,
            horizon: self.horizon,
            tolerance_sigma: self.tolerance_sigma,
        }
    }
}

/// One result line. The first six columns are fixed; `case` says what was estimated
/// and `reference` holds the exact value when one is known.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub command: &'static str,
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
    pub pass: bool,
    pub case: String,
    pub reference: Option<f64>,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub details: serde_json::Value,
    pub paths: Option<Vec<u8>>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Parses `argv`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&args) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Runs a parsed command and writes its artifacts; `Ok(pass)`.
pub fn run(args: &Args) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&args.overrides());
    cfg.validate()?;
    let outcome = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| execute(args.command, &cfg))?,
        None => execute(args.command, &cfg)?,
    };
    let stem = args
        .config
        .file_stem()
        .map_or("run".into(), |s| s.to_string_lossy().into_owned());
    write_artifacts(&args.out_dir, &stem, args.command, &cfg, &outcome)?;
    for r in &outcome.rows {
        println!(
            "{} {} estimate={} stderr={} pass={}",
            r.command, r.case, r.estimate, r.stderr, r.pass
        );
    }
    Ok(outcome.pass())
}

fn write_artifacts(dir: &FsPath, stem: &str, cmd: Command, cfg: &ExperimentConfig, out: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = |ext: &str| dir.join(format!("{stem}.{}.{ext}", cmd.name()));
    let config_line = serde_json::to_string(cfg)?;
    let mut csv_file = BufWriter::new(File::create(file("csv"))?);
    write_rows(&mut csv_file, &config_line, &out.rows)?;
    csv_file.flush()?;
    if let Some(paths) = &out.paths {
        let mut f = BufWriter::new(File::create(dir.join(format!("{stem}.paths.csv")))?);
        writeln!(f, "# config: {config_line}")?;
        f.write_all(paths)?;
        f.flush()?;
    }
    let report = json!({
        "command": cmd.name(),
        "seed": cfg.seed,
        "config": cfg,
        "pass": out.pass(),
        "rows": out.rows,
        "details": out.details,
    });
    let mut f = BufWriter::new(File::create(file("json"))?);
    serde_json::to_writer_pretty(&mut f, &report)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// The CSV body: a `# config:` line, the header, the rows.
pub fn write_rows<W: Write>(out: &mut W, config_line: &str, rows: &[Row]) -> Result<()> {
    writeln!(out, "# config: {config_line}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["command", "estimate", "stderr", "n", "seed", "pass", "case", "reference"])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs a command against a resolved configuration without touching the filesystem.
pub fn execute(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let plan = cfg.build_plan()?;
    match cmd {
        Command::Simulate => simulate(cfg, &plan),
        Command::Resolvent | Command::Semigroup => estimate_values(cmd, cfg, &plan),
        Command::CheckDynkin => check_dynkin(cfg, &plan),
        Command::CheckRevival => check_revival(cfg, &plan),
        Command::CheckPasting => check_pasting(cfg),
        Command::CheckProjection => check_projection(cfg, &plan),
        Command::InvertLaplace => invert_laplace(cfg, &plan),
    }
}

fn model<'a>(cfg: &ExperimentConfig, plan: &'a ConcatenationPlan, s: &Start) -> Result<Model<'a>> {
    let m = Model::new(plan, s.stage, s.point)?;
    Ok(if cfg.is_pasting() { m.projected() } else { m })
}

/// The serialized name of a unit enum variant.
fn variant_name(v: impl Serialize) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn start_name(s: &Start) -> String {
    format!("({},{})", s.stage, s.point)
}

/// Disjoint stream ranges for the `k`-th estimate of a run.
fn block(cfg: &ExperimentConfig, k: usize) -> crate::estimate::McConfig {
    let mc = cfg.mc();
    mc.with_offset(4 * (k * mc.samples) as u64)
}

fn simulate(cfg: &ExperimentConfig, plan: &ConcatenationPlan) -> Result<Outcome> {
    let starts = cfg.resolved_starts(plan)?;
    let mut rows = Vec::new();
    let mut paths = csv::Writer::from_writer(Vec::new());
    paths.write_record(["path", "start", "time", "tag", "state"])?;
    for (k, s) in starts.iter().enumerate() {
        let m = model(cfg, plan, s)?;
        let mc = block(cfg, k);
        for i in 0..mc.samples as u64 {
            let cp = m.sample(&mut RngStream::new(mc.seed, mc.stream_offset + i).generator())?;
            write_path(&mut paths, k * mc.samples + i as usize, &start_name(s), &cp)?;
        }
        let life = mc_lifetime(&m, &mc)?;
        rows.push(Row {
            command: "simulate",
            estimate: life.value,
            stderr: life.stderr,
            n: life.n_samples,
            seed: life.seed,
            pass: true,
            case: format!("lifetime x={}", start_name(s)),
            reference: None,
        });
    }
    Ok(Outcome {
        rows,
        details: serde_json::Value::Null,
        paths: Some(paths.into_inner().map_err(|e| Error::Io(e.into_error()))?),
    })
}

fn write_path<W: Write>(w: &mut csv::Writer<W>, id: usize, start: &str, cp: &ConcatPath) -> Result<()> {
    let id = id.to_string();
    for (j, seg) in cp.segments().iter().enumerate() {
        let offset = cp.offset(j);
        for e in seg.path.events() {
            if let SpacePoint::Regular { tag, value } = e.state {
                w.write_record([&id, start, &(offset + e.time).to_string(), &tag.to_string(), &value.to_string()])?;
            }
        }
    }
    let end = match cp.censor_time() {
        Some(c) => Some((c, "censored")),
        None if cp.lifetime().is_finite() => Some((cp.lifetime(), "Δ")),
        None => None,
    };
    if let Some((t, what)) = end {
        w.write_record([&id, start, &t.to_string(), "", what])?;
    }
    Ok(())
}

fn reference_values(
    cmd: Command,
    cfg: &ExperimentConfig,
    m: &Model,
    f: &FunctionSpec,
) -> Result<Option<f64>> {
    let gen = match ModelGenerator::new(m) {
        Ok(g) => g,
        Err(Error::Unsupported(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let fv = gen.vector(f);
    let values = match cmd {
        Command::Resolvent => exact_resolvent(gen.sub_generator(), cfg.params.alpha, &fv)?,
        _ => exact_semigroup(gen.sub_generator(), cfg.params.time, &fv)?,
    };
    Ok(gen.index(&m.start).map(|i| values[i]))
}

fn estimate_values(cmd: Command, cfg: &ExperimentConfig, plan: &ConcatenationPlan) -> Result<Outcome> {
    let sigma = cfg.params.tolerance_sigma;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut k = 0;
    for s in cfg.resolved_starts(plan)? {
        let m = model(cfg, plan, &s)?;
        for (fi, f) in cfg.resolved_functions().iter().enumerate() {
            let mc = block(cfg, k);
            k += 1;
            let report = match cmd {
                Command::Resolvent => mc_resolvent(&m, cfg.params.alpha, f, &mc)?,
                _ => mc_semigroup(&m, cfg.params.time, f, &mc)?,
            };
            let reference = reference_values(cmd, cfg, &m, f)?;
            let pass = match reference {
                Some(r) => report.agrees_with(r, sigma),
                None => !report.flagged,
            };
            rows.push(Row {
                command: cmd.name(),
                estimate: report.value,
                stderr: report.stderr,
                n: report.n_samples,
                seed: report.seed,
                pass,
                case: format!("x={} f={fi}", start_name(&s)),
                reference,
            });
            reports.push(report);
        }
    }
    Ok(Outcome {
        rows,
        details: json!({ "reports": reports }),
        paths: None,
    })
}

fn check_dynkin(cfg: &ExperimentConfig, plan: &ConcatenationPlan) -> Result<Outcome> {
    let sigma = cfg.params.tolerance_sigma;
    let mut rows = Vec::new();
    let mut k = 0;
    for s in cfg.resolved_starts(plan)? {
        let m = model(cfg, plan, &s)?;
        for (fi, f) in cfg.resolved_functions().iter().enumerate() {
            let mc = block(cfg, k);
            k += 1;
            let r = dynkin_residual(&m, &cfg.dynkin.stopping, cfg.params.alpha, f, cfg.dynkin.continuation, &mc)?;
            rows.push(Row {
                command: "check-dynkin",
                estimate: r.value,
                stderr: r.stderr,
                n: r.n_samples,
                seed: r.seed,
                pass: r.agrees_with(0.0, sigma),
                case: format!("x={} f={fi}", start_name(&s)),
                reference: Some(0.0),
            });
        }
    }
    Ok(Outcome {
        rows,
        details: serde_json::Value::Null,
        paths: None,
    })
}

fn check_revival(cfg: &ExperimentConfig, plan: &ConcatenationPlan) -> Result<Outcome> {
    let sigma = cfg.params.tolerance_sigma;
    let gs = if cfg.revival.g.is_empty() {
        vec![GSpec::one()]
    } else {
        cfg.revival.g.clone()
    };
    // starts already past stage n have no n-th revival
    let starts: Vec<Start> = cfg
        .resolved_starts(plan)?
        .into_iter()
        .filter(|s| s.stage <= cfg.revival.n)
        .collect();
    if starts.is_empty() {
        return Err(Error::config(format!("no start lies at or before stage {}", cfg.revival.n)));
    }
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    let mut k = 0;
    for s in starts {
        let m = model(cfg, plan, &s)?;
        for (fi, f) in cfg.resolved_functions().iter().enumerate() {
            for (gi, g) in gs.iter().enumerate() {
                let mc = block(cfg, k);
                k += 1;
                let r = revival_formula_test(&m, cfg.revival.n, f, g, &mc)?;
                rows.push(Row {
                    command: "check-revival",
                    estimate: r.gap.value,
                    stderr: r.gap.stderr,
                    n: r.gap.n_samples,
                    seed: r.gap.seed,
                    pass: r.gap.agrees_with(0.0, sigma),
                    case: format!("x={} n={} f={fi} g={gi}", start_name(&s), cfg.revival.n),
                    reference: Some(0.0),
                });
                gaps.push(r);
            }
        }
    }
    Ok(Outcome {
        rows,
        details: json!({ "gaps": gaps }),
        paths: None,
    })
}

fn check_pasting(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ps = cfg.pasting_spec()?;
    let section = cfg.pasting.as_ref().expect("pasting_spec succeeded");
    let horizon = cfg.params.horizon.unwrap_or(f64::INFINITY);
    let engine = match section.engine {
        EngineKind::Oracle => Engine::Oracle,
        EngineKind::MonteCarlo => Engine::MonteCarlo {
            config: cfg.mc(),
            horizon,
        },
    };
    let functions = ConsistencyFunctions {
        f: cfg.resolved_functions(),
        g_minus: section.g_minus.clone(),
        g_plus: section.g_plus.clone(),
    };
    let points = (!section.points.is_empty()).then_some(section.points.as_slice());
    let sigma = cfg.params.tolerance_sigma;
    let report = check_consistency(&ps, cfg.params.alpha, &functions, engine, points, sigma)?;
    let n = match engine {
        Engine::Oracle => 0,
        Engine::MonteCarlo { config, .. } => config.samples,
    };
    let rows = report
        .residuals
        .iter()
        .map(|r| Row {
            command: "check-pasting",
            estimate: r.residual,
            stderr: match engine {
                Engine::Oracle => 0.0,
                Engine::MonteCarlo { .. } => r.tolerance / sigma,
            },
            n,
            seed: cfg.seed,
            pass: r.pass,
            case: format!(
                "x={} condition={} f={}",
                r.point,
                variant_name(r.condition),
                r.function
            ),
            reference: Some(0.0),
        })
        .collect();
    Ok(Outcome {
        rows,
        details: serde_json::to_value(&report)?,
        paths: None,
    })
}

fn check_projection(cfg: &ExperimentConfig, plan: &ConcatenationPlan) -> Result<Outcome> {
    let ps = cfg.pasting_spec()?;
    let points = match &cfg.pasting.as_ref().expect("pasting_spec succeeded").points {
        p if !p.is_empty() => p.clone(),
        _ => ps
            .shared_points()
            .ok_or_else(|| Error::config("field `pasting.points`: required for interval spaces"))?,
    };
    let [odd, even] = cfg.projection.copies;
    let sigma = cfg.params.tolerance_sigma;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (fi, f) in cfg.resolved_functions().iter().enumerate() {
        let mc = block(cfg, fi * points.len());
        let r = projection_criterion_test(plan, cfg.params.alpha, f, &points, (odd, even), &mc, sigma)?;
        for p in &r.points {
            rows.push(Row {
                command: "check-projection",
                estimate: p.difference,
                stderr: p.pooled_stderr,
                n: mc.samples,
                seed: cfg.seed,
                pass: p.verdict != Verdict::Fail,
                case: format!(
                    "x={} copies=({odd},{even}) f={fi} verdict={}",
                    p.point,
                    variant_name(p.verdict)
                ),
                reference: Some(0.0),
            });
        }
        reports.push(r);
    }
    Ok(Outcome {
        rows,
        details: json!({ "reports": reports }),
        paths: None,
    })
}

fn invert_laplace(cfg: &ExperimentConfig, plan: &ConcatenationPlan) -> Result<Outcome> {
    let t = cfg.params.time;
    let mut rows = Vec::new();
    for s in cfg.resolved_starts(plan)? {
        let m = model(cfg, plan, &s)?;
        let gen = ModelGenerator::new(&m)?;
        let i = gen
            .index(&m.start)
            .ok_or_else(|| Error::domain(format!("{} is not a state", start_name(&s))))?;
        for (fi, f) in cfg.resolved_functions().iter().enumerate() {
            let fv = gen.vector(f);
            let exact = exact_semigroup(gen.sub_generator(), t, &fv)?[i];
            for &k in &cfg.laplace.k {
                let v = post_widder_chain(gen.sub_generator(), &fv, t, k)?[i];
                let rel = if exact == 0.0 { v.abs() } else { ((v - exact) / exact).abs() };
                rows.push(Row {
                    command: "invert-laplace",
                    estimate: v,
                    stderr: 0.0,
                    n: k,
                    seed: cfg.seed,
                    pass: rel <= cfg.laplace.rel_tol,
                    case: format!("x={} f={fi} k={k} t={t}", start_name(&s)),
                    reference: Some(exact),
                });
            }
        }
    }
    Ok(Outcome {
        rows,
        details: serde_json::Value::Null,
        paths: None,
    })
}
