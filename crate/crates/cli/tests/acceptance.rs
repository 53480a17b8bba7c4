//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --release --test acceptance -- 1 2 3`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use bict::par::Exec;
use bict::training::SequenceVariant;
use bict::verify::{gradient_suites, map_oracle_gap, reduction_checks};
use bict_cli::config::{ExperimentConfig, Scenario};
use bict_cli::experiments::{self as ex, median, UpgradeRun};

const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_INSTANCES: usize = 20;
const MAP_TOL: f64 = 1e-12;
const MAP_INSTANCES: usize = 100;
const GAP: f64 = 0.005;
const DIM_INVERSION: f64 = 0.01;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed.as_secs_f64() < budget_s as f64
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suites = gradient_suites(2024, GRAD_INSTANCES, Exec::default()).expect("gradient suites");
    let elapsed = start.elapsed();
    let worst = suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = suites
        .iter()
        .filter(|s| s.max_rel_err.is_nan() || s.max_rel_err >= GRAD_REL_TOL)
        .map(|s| s.name)
        .collect();
    outcome(
        failing.is_empty() && within(elapsed, 30),
        format!(
            "{} suites x {GRAD_INSTANCES}, worst rel err {worst:.1e}, failing {failing:?}, {:.1}s",
            suites.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn map_oracle() -> Outcome {
    let start = Instant::now();
    let gap = map_oracle_gap(77, MAP_INSTANCES).expect("map oracle");
    let elapsed = start.elapsed();
    outcome(
        gap < MAP_TOL && within(elapsed, 5),
        format!(
            "{MAP_INSTANCES} instances, max abs diff {gap:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn reductions() -> Outcome {
    let checks = reduction_checks(5).expect("reduction checks");
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    outcome(
        failing.is_empty(),
        format!("{} identities, failing {failing:?}", checks.len()),
    )
}

fn ordering(runs: &[UpgradeRun], elapsed: Duration) -> Outcome {
    let m = ex::notation_medians(&runs.iter().map(|r| &r.notations).collect::<Vec<_>>());
    let chain = [m.m_o2o, m.m_bct, m.m_fct, m.m_n2n];
    let alignment = median(&runs.iter().map(|r| r.alignment).collect::<Vec<_>>());
    let ok = chain.windows(2).all(|w| w[1] - w[0] > GAP);
    outcome(
        ok && within(elapsed, 600),
        format!(
            "o2o {:.4} < bct {:.4} < fct {:.4} < n2n {:.4}, held-out psi alignment {alignment:.3}, {:.0}s",
            m.m_o2o,
            m.m_bct,
            m.m_fct,
            m.m_n2n,
            elapsed.as_secs_f64()
        ),
    )
}

fn lambda_peak() -> Outcome {
    let cfg = ExperimentConfig::preset(Scenario::LambdaSweep);
    let start = Instant::now();
    let rows = ex::sweep_lambda(&cfg, Exec::default()).expect("lambda sweep");
    let elapsed = start.elapsed();
    let summary = ex::summarize_lambda(&rows);
    let dims = &cfg.sweep.lambda_psi_dims;
    let (small, large) = (*dims.iter().min().unwrap(), *dims.iter().max().unwrap());
    let at = |lambda: f64, dim: usize| {
        summary
            .iter()
            .find(|s| s.lambda == lambda && s.psi_dim == dim)
            .expect("summary row")
    };
    let grid = &cfg.sweep.lambdas;
    let nonzero: Vec<f64> = grid.iter().copied().filter(|&l| l > 0.0).collect();
    let (first, last) = (nonzero[0], *nonzero.last().unwrap());
    let one_dim: Vec<_> = summary
        .iter()
        .filter(|s| s.psi_dim == small)
        .cloned()
        .collect();
    let peak = ex::lambda_peak(&one_dim).expect("peak");
    let interior = peak > first && peak < last;
    let zero = at(0.0, small);
    let collapse = zero.median_m_bct < 0.5 * zero.median_m_o2o;
    let rise = nonzero
        .iter()
        .any(|&l| at(l, small).median_m_fct > zero.median_m_fct);
    let best_small = nonzero
        .iter()
        .map(|&l| at(l, small).median_m_fct)
        .fold(f64::MIN, f64::max);
    let decline = at(last, large).median_m_fct < at(0.0, large).median_m_fct;
    outcome(
        interior && collapse && rise && decline && within(elapsed, 2700),
        format!(
            "peak at lambda {peak}; M_BCT(0) {:.4} vs M_o2o/2 {:.4}; psi{small} M_FCT {:.4} -> best {:.4}; \
             psi{large} M_FCT(0) {:.4} -> M_FCT({last}) {:.4}; {:.0}s",
            zero.median_m_bct,
            0.5 * zero.median_m_o2o,
            zero.median_m_fct,
            best_small,
            at(0.0, large).median_m_fct,
            at(last, large).median_m_fct,
            elapsed.as_secs_f64()
        ),
    )
}

fn dim_trend() -> Outcome {
    let cfg = ExperimentConfig::preset(Scenario::DimSweep);
    let start = Instant::now();
    let rows = ex::sweep_dim(&cfg, Exec::default()).expect("dim sweep");
    let elapsed = start.elapsed();
    let med = |dim: usize, f: fn(&ex::DimRow) -> f64| {
        median(
            &rows
                .iter()
                .filter(|r| r.dim == dim)
                .map(f)
                .collect::<Vec<_>>(),
        )
    };
    let fct: Vec<f64> = cfg
        .sweep
        .dims
        .iter()
        .map(|&d| med(d, |r| r.m_fct))
        .collect();
    let drops: Vec<f64> = fct
        .windows(2)
        .map(|w| w[0] - w[1])
        .filter(|&d| d > 0.0)
        .collect();
    let monotone = drops.len() <= 1 && drops.iter().all(|&d| d <= DIM_INVERSION);
    let largest = *cfg.sweep.dims.last().unwrap();
    let gain = med(largest, |r| r.m_fct) - med(largest, |r| r.m_bct);
    let shown: Vec<String> = cfg
        .sweep
        .dims
        .iter()
        .zip(&fct)
        .map(|(d, f)| format!("{d}:{f:.4}"))
        .collect();
    outcome(
        monotone && gain > GAP && within(elapsed, 1200),
        format!(
            "M_FCT {}; gain at {largest} {gain:.4}; {:.0}s",
            shown.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn refresh(cfg: &ExperimentConfig, runs: &[UpgradeRun]) -> Outcome {
    let curves = ex::refresh_runs(cfg, runs, Exec::default()).expect("hot refresh");
    let mut exact = true;
    let mut deltas = Vec::new();
    for r in &curves {
        let (head, tail) = (r.curve.first().unwrap(), r.curve.last().unwrap());
        exact &= head.map.to_bits() == r.m_bct.to_bits() && tail.map.to_bits() == r.m_fct.to_bits();
        deltas.push(tail.map - head.map);
    }
    let rise = median(&deltas);
    outcome(
        exact && rise > 0.0,
        format!(
            "{} curves, endpoints exact {exact}, median rise {rise:.4}",
            curves.len()
        ),
    )
}

fn sequential() -> Outcome {
    let cfg = ExperimentConfig::preset(Scenario::Sequential);
    let start = Instant::now();
    let outcomes = ex::sequential(&cfg, Exec::default()).expect("sequential");
    let elapsed = start.elapsed();
    let gen2 = |variant: SequenceVariant, f: fn(&bict::training::GenerationReport) -> f64| {
        median(
            &outcomes
                .iter()
                .filter(|(_, o)| o.report.variant == variant)
                .map(|(_, o)| {
                    f(o.report
                        .generations
                        .iter()
                        .find(|g| g.generation == 2)
                        .expect("generation 2"))
                })
                .collect::<Vec<_>>(),
        )
    };
    let bct_only = gen2(SequenceVariant::BctOnly, |g| g.m_bct);
    let bict = gen2(SequenceVariant::Bict, |g| g.m_bct);
    let fct_bict = gen2(SequenceVariant::Bict, |g| g.m_fct.unwrap_or(f64::NAN));
    let fct_momentum = gen2(SequenceVariant::BictMomentum, |g| {
        g.m_fct.unwrap_or(f64::NAN)
    });
    outcome(
        bict - bct_only > GAP,
        format!(
            "gen-2 M_BCT bict {bict:.4} vs bct-only {bct_only:.4}; gen-2 M_FCT bict {fct_bict:.4}, \
             bict+momentum {fct_momentum:.4} (recorded); {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny(dir.path());
    let mut mismatched = Vec::new();
    let mut files = 0;
    for cmd in common::COMMANDS {
        let first = dir.path().join(format!("{cmd}-a"));
        let second = dir.path().join(format!("{cmd}-b"));
        let a = common::bict(&[
            cmd,
            "--config",
            &cfg,
            "--jobs",
            "1",
            "--out",
            first.to_str().unwrap(),
        ]);
        let snapshot = first.join("config.snapshot");
        let b = common::bict(&[
            cmd,
            "--config",
            snapshot.to_str().unwrap(),
            "--jobs",
            "3",
            "--out",
            second.to_str().unwrap(),
        ]);
        if !a.status.success() || !b.status.success() {
            mismatched.push(format!("{cmd} (failed to run)"));
            continue;
        }
        let (ta, tb) = (read_tree(&first), read_tree(&second));
        files += ta.len();
        if ta != tb {
            mismatched.push(cmd.to_string());
        }
    }
    outcome(
        mismatched.is_empty(),
        format!(
            "{} commands, {files} files compared, mismatched {mismatched:?}",
            common::COMMANDS.len()
        ),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wants = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n} [{name}]: {} ({})",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    if wants(1) {
        report(1, "gradient correctness", gradients());
    }
    if wants(2) {
        report(2, "mAP oracle", map_oracle());
    }
    if wants(3) {
        report(3, "reduction identities", reductions());
    }
    if wants(4) || wants(7) {
        let cfg = ExperimentConfig::preset(Scenario::ExtendedData);
        let start = Instant::now();
        let runs = ex::run_upgrade(&cfg, Exec::default()).expect("upgrade runs");
        let elapsed = start.elapsed();
        if wants(4) {
            report(4, "ordering chain", ordering(&runs, elapsed));
        }
        if wants(7) {
            report(7, "hot refresh", refresh(&cfg, &runs));
        }
    }
    if wants(5) {
        report(5, "lambda peak", lambda_peak());
    }
    if wants(6) {
        report(6, "hidden-dim trend", dim_trend());
    }
    if wants(8) {
        report(8, "sequential", sequential());
    }
    if wants(9) {
        report(9, "determinism", determinism());
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    if failed.is_empty() {
        println!("acceptance: {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
