//! Acceptance suite. Prints one line per criterion and exits non-zero if any fails.
//!
//! Frozen reference values were computed independently (exact rational arithmetic for
//! the chains, a coarse random-walk brute force for the Brownian exit time) before the
//! estimators existed.

use std::path::Path as FsPath;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use concatmc::cli::{execute, write_rows, Command};
use concatmc::concat::{ConcatenationPlan, Stage, Truncation};
use concatmc::config::ExperimentConfig;
use concatmc::estimate::{
    dynkin_residual, mc_lifetime, mc_resolvent, post_widder_chain, post_widder_invert, revival_formula_test,
    Continuation, GSpec, McConfig, Model, Stopping,
};
use concatmc::functions::FunctionSpec;
use concatmc::oracle::{assemble_alternating, assemble_concatenated, assemble_instant_revival, exact_resolvent, exact_semigroup, SubGenerator};
use concatmc::pasting::{
    check_consistency, make_alternating_plan, projection_criterion_test, Condition, ConsistencyFunctions, Engine,
    Verdict,
};
use concatmc::process::{sample_path, FiniteChain, IntervalDiffusion, ProcessSpec};
use concatmc::rng::RngStream;
use concatmc::state_space::{SpacePoint, Value};
use concatmc::transfer::KernelSpec;

type Check = Result<String, String>;

const SIGMA: f64 = 3.0;

fn chain(tag: u32, labels: &[&str], jumps: &[(&str, &str, f64)], kills: &[(&str, f64)]) -> ProcessSpec {
    ProcessSpec::FiniteChain(FiniteChain::from_lists(tag, labels, jumps, kills).unwrap())
}

fn example(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&FsPath::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(format!("{name}.json")))
        .unwrap()
}

fn within(label: &str, got: f64, target: f64, se: f64, sigma: f64) -> Check {
    let z = (got - target).abs() / se;
    let line = format!("{label} {got:.6} vs {target:.6} ({z:.2} se)");
    if (got - target).abs() <= sigma * se {
        Ok(line)
    } else {
        Err(line)
    }
}

fn all(lines: Vec<Check>) -> Check {
    let failed: Vec<String> = lines.iter().filter_map(|l| l.clone().err()).collect();
    if failed.is_empty() {
        Ok(format!("{} comparisons", lines.len()))
    } else {
        Err(failed.join("; "))
    }
}

fn timed(budget: Duration, start: Instant, c: Check) -> Check {
    let t = start.elapsed();
    match c {
        Ok(m) if t <= budget => Ok(m),
        Ok(m) => Err(format!("{m}, but took {t:?} > {budget:?}")),
        e => e,
    }
}

fn exponential_baseline() -> Check {
    let t = Instant::now();
    let plan = ConcatenationPlan::single(chain(1, &["x"], &[], &[("x", 1.0)]), Truncation::new(0, f64::INFINITY).unwrap()).unwrap();
    let r = mc_resolvent(&Model::new(&plan, 1, "x").unwrap(), 1.0, &FunctionSpec::constant(1.0), &McConfig::new(100_000, 1)).map_err(|e| e.to_string())?;
    timed(Duration::from_secs(10), t, within("U1(x)", r.value, 0.5, r.stderr, SIGMA))
}

fn two_stage_plan() -> ConcatenationPlan {
    ConcatenationPlan::new(
        vec![
            Stage {
                process: chain(1, &["x"], &[], &[("x", 1.0)]),
                kernel: Some(KernelSpec::dirac(SpacePoint::regular(0, "x")).unwrap()),
            },
            Stage {
                process: chain(2, &["x"], &[], &[("x", 2.0)]),
                kernel: None,
            },
        ],
        Truncation::new(1, f64::INFINITY).unwrap(),
    )
    .unwrap()
}

fn two_stage() -> Check {
    let t = Instant::now();
    let plan = two_stage_plan();
    let sg = assemble_concatenated(&plan, 2).map_err(|e| e.to_string())?;
    let exact = exact_resolvent(&sg, 1.0, &DVector::from_element(2, 1.0)).map_err(|e| e.to_string())?[0];
    if (exact - 2.0 / 3.0).abs() > 1e-12 {
        return Err(format!("oracle {exact} differs from 2/3"));
    }
    let r = mc_resolvent(&Model::new(&plan, 1, "x").unwrap(), 1.0, &FunctionSpec::constant(1.0), &McConfig::new(100_000, 2)).map_err(|e| e.to_string())?;
    timed(Duration::from_secs(30), t, within("U1(1,x)", r.value, 2.0 / 3.0, r.stderr, SIGMA))
}

fn four_state_plan() -> ConcatenationPlan {
    example("four_state").build_plan().unwrap()
}

fn generator_assembly() -> Check {
    let t = Instant::now();
    let plan = four_state_plan();
    let sg = assemble_concatenated(&plan, 2).map_err(|e| e.to_string())?;
    // rows a, b, c, d of U_1 1_y, solved exactly by hand
    let frozen: [(&str, [f64; 4]); 4] = [
        ("a", [1.0 / 2.0, 1.0 / 4.0, 0.0, 0.0]),
        ("b", [1.0 / 8.0, 5.0 / 16.0, 0.0, 0.0]),
        ("c", [21.0 / 230.0, 7.0 / 92.0, 7.0 / 23.0, 1.0 / 23.0]),
        ("d", [59.0 / 920.0, 35.0 / 368.0, 3.0 / 23.0, 7.0 / 23.0]),
    ];
    let starts = [(1, "a"), (1, "b"), (2, "c"), (2, "d")];
    let mut lines = Vec::new();
    for (fk, (y, col)) in frozen.iter().enumerate() {
        let f = FunctionSpec::indicator(*y);
        let exact = exact_resolvent(&sg, 1.0, &sg.vector(|p| f.eval(p))).map_err(|e| e.to_string())?;
        for (i, (stage, x)) in starts.iter().enumerate() {
            if (exact[i] - col[i]).abs() > 1e-12 {
                return Err(format!("oracle U1 1_{y}({x}) = {} but hand solve gives {}", exact[i], col[i]));
            }
            let cfg = McConfig::new(100_000, 3).with_offset(((fk * 4 + i) * 100_000) as u64);
            let r = mc_resolvent(&Model::new(&plan, *stage, *x).unwrap(), 1.0, &f, &cfg).map_err(|e| e.to_string())?;
            lines.push(within(&format!("U1 1_{y}({x})"), r.value, exact[i], r.stderr, SIGMA));
        }
    }
    timed(Duration::from_secs(120), t, all(lines))
}

fn lifetime_shift_law() -> Check {
    let spec = chain(
        0,
        &["x", "y", "z"],
        &[("x", "y", 1.0), ("y", "x", 0.5), ("y", "z", 2.0), ("z", "x", 0.5)],
        &[("x", 0.2), ("z", 1.0)],
    );
    let rs = [0.0, 0.1, 0.5, 1.0, 2.0, 3.5, 5.0, 8.0, 13.0, 40.0];
    let mut violations = 0;
    for i in 0..10_000 {
        let p = sample_path(&spec, &SpacePoint::regular(0, "x"), f64::INFINITY, &mut RngStream::new(4, i).generator())
            .map_err(|e| e.to_string())?;
        for r in rs {
            let want = (p.lifetime() - r).max(0.0);
            if p.shift(r).lifetime().to_bits() != want.to_bits() {
                violations += 1;
            }
        }
    }
    if violations == 0 {
        Ok("0 violations in 100000 (path, r) pairs".into())
    } else {
        Err(format!("{violations} violations"))
    }
}

fn revival_formula() -> Check {
    let cfg = example("revival_table");
    let plan = cfg.build_plan().map_err(|e| e.to_string())?;
    let model = Model::new(&plan, 1, "a1").unwrap();
    let fs = cfg.resolved_functions();
    let gs = cfg.revival.g.clone();
    if fs.len() != 4 || gs.len() != 3 {
        return Err("the revival battery needs 4 f's and 3 g's".into());
    }
    let mut lines = Vec::new();
    for (i, f) in fs.iter().enumerate() {
        for (j, g) in gs.iter().enumerate() {
            let mc = McConfig::new(100_000, 5).with_offset(((i * 3 + j) * 100_000) as u64);
            let r = revival_formula_test(&model, 1, f, g, &mc).map_err(|e| e.to_string())?;
            lines.push(within(&format!("gap f{i} g{j}"), r.gap.value, 0.0, r.gap.stderr, SIGMA));
        }
    }
    // a point-mass kernel leaves nothing to average: the gap is zero on every path
    let dirac = two_stage_plan();
    let dm = Model::new(&dirac, 1, "x").unwrap();
    for f in [FunctionSpec::indicator("x"), FunctionSpec::constant(2.5), FunctionSpec::table(&[("x", -0.75)])] {
        for g in [GSpec::one(), GSpec::new(vec![0.3], vec![FunctionSpec::indicator("x")]).unwrap()] {
            let r = revival_formula_test(&dm, 1, &f, &g, &McConfig::new(10_000, 6)).map_err(|e| e.to_string())?;
            lines.push(if r.gap.value == 0.0 && r.gap.stderr == 0.0 {
                Ok("dirac gap 0".into())
            } else {
                Err(format!("dirac gap {} (stderr {})", r.gap.value, r.gap.stderr))
            });
        }
    }
    all(lines)
}

fn dynkin() -> Check {
    let plan = four_state_plan();
    let mut lines = Vec::new();
    let fs = [
        FunctionSpec::indicator("a"),
        FunctionSpec::indicator("b"),
        FunctionSpec::indicator("c"),
        FunctionSpec::indicator("d"),
        FunctionSpec::constant(1.0),
    ];
    let stop = Stopping::Revival { n: 1 };
    for (k, x) in ["a", "b"].iter().enumerate() {
        let model = Model::new(&plan, 1, *x).unwrap();
        for (i, f) in fs.iter().enumerate() {
            let mc = McConfig::new(100_000, 7).with_offset(((k * 5 + i) * 100_000) as u64);
            let r = dynkin_residual(&model, &stop, 1.0, f, Continuation::Oracle, &mc).map_err(|e| e.to_string())?;
            lines.push(within(&format!("residual x={x} f{i}"), r.value, 0.0, r.stderr, SIGMA));
        }
        let zero = dynkin_residual(&model, &stop, 1.0, &FunctionSpec::Zero, Continuation::Oracle, &McConfig::new(1_000, 7))
            .map_err(|e| e.to_string())?;
        lines.push(if zero.value == 0.0 {
            Ok("f=0 residual 0".into())
        } else {
            Err(format!("f=0 residual {}", zero.value))
        });
    }
    all(lines)
}

fn instant_revival() -> Check {
    let cfg = example("identical_iterations");
    let ps = cfg.pasting_spec().map_err(|e| e.to_string())?;
    let plan = cfg.build_plan().map_err(|e| e.to_string())?;
    let base = ps.minus().as_chain().unwrap();
    let sg = assemble_instant_revival(base, ps.kernel_minus()).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let fs = [FunctionSpec::indicator("a"), FunctionSpec::indicator("b")];
    let mut k = 0u64;
    for f in &fs {
        let exact = exact_resolvent(&sg, 1.0, &sg.vector(|p| f.eval(p))).map_err(|e| e.to_string())?;
        for (i, x) in ["a", "b"].iter().enumerate() {
            for stage in [1, 2] {
                let mc = McConfig::new(100_000, 8).with_offset(k * 100_000);
                k += 1;
                let model = Model::new(&plan, stage, *x).unwrap().projected();
                let r = mc_resolvent(&model, 1.0, f, &mc).map_err(|e| e.to_string())?;
                lines.push(within(&format!("U1 f({stage},{x})"), r.value, exact[i], r.stderr, SIGMA));
            }
        }
    }
    for (j, f) in fs.iter().enumerate() {
        let mc = McConfig::new(100_000, 9).with_offset(j as u64 * 1_000_000);
        let rep = projection_criterion_test(&plan, 1.0, f, &[Value::label("a"), Value::label("b")], (1, 2), &mc, SIGMA)
            .map_err(|e| e.to_string())?;
        for p in rep.points {
            lines.push(if p.verdict == Verdict::Pass {
                Ok("projection pass".into())
            } else {
                Err(format!("projection at {} failed: {} ± {}", p.point, p.difference, p.pooled_stderr))
            });
        }
    }
    all(lines)
}

fn pasting_consistency() -> Check {
    let mut lines = Vec::new();
    let ident = example("identical_iterations");
    let fs = ConsistencyFunctions {
        f: ident.resolved_functions(),
        ..Default::default()
    };
    let rep = check_consistency(&ident.pasting_spec().unwrap(), 1.0, &fs, Engine::Oracle, None, SIGMA).map_err(|e| e.to_string())?;
    let worst = rep.residuals.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    lines.push(if rep.pass && worst < 1e-9 {
        Ok(format!("identical: worst residual {worst:.1e}"))
    } else {
        Err(format!("identical: pass={} worst residual {worst:.1e}", rep.pass))
    });

    let viol = example("violating_pair");
    let ps = viol.pasting_spec().unwrap();
    let f = FunctionSpec::indicator("s");
    let rep = check_consistency(
        &ps,
        1.0,
        &ConsistencyFunctions {
            f: vec![f.clone()],
            ..Default::default()
        },
        Engine::Oracle,
        None,
        SIGMA,
    )
    .map_err(|e| e.to_string())?;
    // hold rates 1 and 2 at the shared state: 1/(1+1) − 1/(1+2)
    let hand = 1.0 / 2.0 - 1.0 / 3.0;
    let cond1 = rep.residuals.iter().find(|r| r.condition == Condition::Integral).unwrap();
    lines.push(if (cond1.residual - hand).abs() < 1e-9 && !cond1.pass {
        Ok(format!("violating: integral residual {:.12}", cond1.residual))
    } else {
        Err(format!("violating: integral residual {} (flagged {})", cond1.residual, !cond1.pass))
    });

    // predicted sign of U(f∘π)(odd, s) − U(f∘π)(even, s)
    let (m, p) = (ps.minus().as_chain().unwrap(), ps.plus().as_chain().unwrap());
    let cycle = assemble_alternating(m, p, ps.kernel_minus(), ps.kernel_plus()).map_err(|e| e.to_string())?;
    let u = exact_resolvent(&cycle, 1.0, &cycle.vector(|q| f.eval(&q.untagged()))).map_err(|e| e.to_string())?;
    let s = |tag| cycle.index_of(&SpacePoint::regular(tag, "s")).unwrap();
    let predicted = u[s(1)] - u[s(2)];
    if (predicted - 1.0 / 11.0).abs() > 1e-12 {
        return Err(format!("oracle gap {predicted} differs from 1/11"));
    }
    let plan = make_alternating_plan(&ps, viol.truncation().unwrap()).unwrap();
    let rep = projection_criterion_test(&plan, 1.0, &f, &[Value::label("s")], (1, 2), &McConfig::new(100_000, 10), SIGMA)
        .map_err(|e| e.to_string())?;
    let pt = &rep.points[0];
    let z = pt.difference / pt.pooled_stderr;
    lines.push(if pt.verdict == Verdict::Fail && z.abs() > 5.0 && z.signum() == predicted.signum() {
        Ok(format!("violating: projection gap {:.4} ({z:.1} pooled se)", pt.difference))
    } else {
        Err(format!("violating: projection gap {} ({z:.1} pooled se, predicted {predicted:+})", pt.difference))
    });
    all(lines)
}

fn post_widder() -> Check {
    // φ(α) = 1/(1+α): φ^(j)(α) = (−1)^j j! / (1+α)^{j+1}
    let phi = |alpha: f64, k: usize| {
        let mut out = Vec::with_capacity(k + 1);
        let mut fact = 1.0;
        for j in 0..=k {
            if j > 0 {
                fact *= j as f64;
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            out.push(sign * fact / (1.0 + alpha).powi(j as i32 + 1));
        }
        Ok(out)
    };
    let target = (-1.0f64).exp();
    let v64 = post_widder_invert(phi, 1.0, 64).map_err(|e| e.to_string())?;
    let v16 = post_widder_invert(phi, 1.0, 16).map_err(|e| e.to_string())?;
    let (e64, e16) = ((v64 - target).abs() / target, (v16 - target).abs() / target);
    let mut lines = vec![
        if e64 < 0.01 && e64 < e16 {
            Ok(format!("k=64 error {e64:.4}, k=16 error {e16:.4}"))
        } else {
            Err(format!("k=64 error {e64}, k=16 error {e16}"))
        },
        // (k/(k+1))^{k+1}
        if (v64 - 0.3650313185486516).abs() < 1e-12 {
            Ok("closed form".into())
        } else {
            Err(format!("k=64 gives {v64}, closed form 0.3650313185486516"))
        },
    ];
    let c = FiniteChain::from_lists(
        0,
        &["x", "y", "z"],
        &[("x", "y", 1.0), ("y", "x", 0.5), ("y", "z", 2.0), ("z", "x", 0.5)],
        &[("x", 0.2), ("z", 1.0)],
    )
    .unwrap();
    let sg = SubGenerator::from_chain(&c, 0);
    for (name, f) in [
        ("1_x", FunctionSpec::indicator("x")),
        ("1_y", FunctionSpec::indicator("y")),
        ("1_z", FunctionSpec::indicator("z")),
        ("1", FunctionSpec::constant(1.0)),
    ] {
        let fv = sg.vector(|p| f.eval(p));
        let exact = exact_semigroup(&sg, 1.0, &fv).map_err(|e| e.to_string())?;
        let inv = post_widder_chain(&sg, &fv, 1.0, 64).map_err(|e| e.to_string())?;
        for i in 0..3 {
            let rel = ((inv[i] - exact[i]) / exact[i]).abs();
            lines.push(if rel < 0.02 {
                Ok(String::new())
            } else {
                Err(format!("chain {name} state {i}: relative error {rel:.4}"))
            });
        }
    }
    all(lines)
}

fn diffusion_sanity() -> Check {
    let bm = ProcessSpec::IntervalDiffusion(IntervalDiffusion::brownian(1, 0.0, 1.0, 1e-4).unwrap());
    let plan = ConcatenationPlan::single(bm, Truncation::new(0, f64::INFINITY).unwrap()).unwrap();
    let r = mc_lifetime(&Model::new(&plan, 1, 0.5).unwrap(), &McConfig::new(10_000, 11)).map_err(|e| e.to_string())?;
    let rel = (r.value - 0.25).abs() / 0.25;
    let line = format!("mean exit time {:.5} ± {:.5}, {:.2}% from 0.25", r.value, r.stderr, 100.0 * rel);
    if rel < 0.05 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn reproducibility() -> Check {
    let runs: [(&str, Command, usize); 5] = [
        ("four_state", Command::Resolvent, 5_000),
        ("revival_table", Command::CheckRevival, 5_000),
        ("violating_pair", Command::CheckProjection, 5_000),
        ("two_stage", Command::Simulate, 200),
        ("brownian", Command::Simulate, 50),
    ];
    let render = |name: &str, cmd: Command, n: usize, threads: usize| -> Result<Vec<u8>, String> {
        let mut cfg = example(name);
        cfg.params.samples = n;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| execute(cmd, &cfg)).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_rows(&mut buf, &serde_json::to_string(&cfg).unwrap(), &out.rows).map_err(|e| e.to_string())?;
        buf.extend(out.paths.unwrap_or_default());
        Ok(buf)
    };
    let mut lines = Vec::new();
    for (name, cmd, n) in runs {
        let a = render(name, cmd, n, 1)?;
        let b = render(name, cmd, n, 4)?;
        let c = render(name, cmd, n, 4)?;
        lines.push(if a == b && b == c {
            Ok(String::new())
        } else {
            Err(format!("{name} {}: outputs differ", cmd.name()))
        });
    }
    all(lines)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("exponential baseline", exponential_baseline),
        ("two-stage concatenation", two_stage),
        ("generator assembly", generator_assembly),
        ("lifetime shift law", lifetime_shift_law),
        ("revival formula", revival_formula),
        ("dynkin residual at first revival", dynkin),
        ("instant revival", instant_revival),
        ("pasting consistency", pasting_consistency),
        ("post-widder inversion", post_widder),
        ("diffusion exit time", diffusion_sanity),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = check();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {:>2} {name} [{secs:.1}s] {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1}s] {msg}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
