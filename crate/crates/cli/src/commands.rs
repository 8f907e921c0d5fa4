//! The four subcommands. Each resolves its config, writes the manifest, runs,
//! then writes its data files and returns an exit code.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use doran_core::checks::{run_identity_check, IdentityCheckConfig};
use doran_core::estimation::{
    adversarial_curve, frozen_fingerprint_data, rate_curves_csv, rate_sweep, train_toy,
    AdversarialConfig, AdversarialCurve, RateCurve, SweepConfig, ToyConfig, ToyCurves,
};
use doran_core::gradients::{run_grad_check, GradCheckConfig};
use doran_core::moe::MeasureKind;

use crate::assertions::{evaluate, Assertion, Outcome};
use crate::error::{CliError, CliResult, EXIT_ASSERTION, EXIT_PASS};
use crate::svg::{render, Plot, Series};

pub const TOOL: &str = "doranlab";

/// Where a command writes and what it was asked for.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub subcommand: &'static str,
}

impl Context {
    fn path(&self, suffix: &str) -> PathBuf {
        self.out.join(format!("{}{suffix}", self.subcommand.replace('-', "_")))
    }

    fn write(&self, suffix: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.path(suffix);
        std::fs::write(&path, contents).map_err(|source| CliError::Output {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, suffix: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push('\n');
        self.write(suffix, &text)
    }

    /// Written before any work so an interrupted run can be replayed.
    fn manifest<C: Serialize>(&self, config: &C, seeds: Vec<u64>, frozen_sha256: Option<String>) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|source| CliError::Output {
            path: self.out.display().to_string(),
            source,
        })?;
        self.write_json(
            ".manifest.json",
            &Manifest {
                tool: TOOL,
                code_version: env!("CARGO_PKG_VERSION"),
                subcommand: self.subcommand,
                config,
                seeds,
                frozen_sha256,
            },
        )?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a, C> {
    tool: &'static str,
    code_version: &'static str,
    subcommand: &'a str,
    config: &'a C,
    seeds: Vec<u64>,
    /// SHA-256 of the frozen `C_Q, C_K, C_V` entries (little-endian f64).
    frozen_sha256: Option<String>,
}

fn sha256_hex(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn print_outcomes(outcomes: &[Outcome]) {
    for o in outcomes {
        let observed = o.observed.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "assert {:<28} observed {:>10}  {}",
            o.assertion,
            observed,
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
}

fn parse_assertions(texts: &[String]) -> CliResult<Vec<Assertion>> {
    texts.iter().map(|t| Assertion::parse(t)).collect()
}

fn assertion_exit(outcomes: &[Outcome]) -> i32 {
    if outcomes.iter().all(|o| o.passed) {
        EXIT_PASS
    } else {
        EXIT_ASSERTION
    }
}

pub fn grad_check(ctx: &Context, cfg: &GradCheckConfig) -> CliResult<i32> {
    cfg.validate()?;
    ctx.manifest(cfg, vec![cfg.seed], None)?;
    let report = run_grad_check(cfg)?;
    ctx.write_json(".json", &report)?;
    for (name, p) in &report.params {
        println!(
            "{name:<8} max rel err {:.3e}  violations {}/{}",
            p.max_rel_err, p.violations, p.entries_checked
        );
        if p.violations > 0 {
            println!(
                "  worst: trial {} entry [{}, {}] analytic {:.9e} numeric {:.9e}",
                p.worst_trial, p.worst_coord[0], p.worst_coord[1], p.analytic, p.numeric
            );
        }
    }
    println!("grad-check {}", if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed { EXIT_PASS } else { EXIT_ASSERTION })
}

pub fn identity_check(ctx: &Context, cfg: &IdentityCheckConfig) -> CliResult<i32> {
    cfg.validate()?;
    ctx.manifest(cfg, vec![cfg.seed], None)?;
    let report = run_identity_check(cfg)?;
    ctx.write_json(".json", &report)?;
    for (name, p) in &report.probes {
        println!(
            "{name:<20} trials {:>5}  worst {:.3e} (trial {})  {}",
            p.trials,
            p.worst,
            p.worst_trial,
            if p.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("identity-check {}", if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed { EXIT_PASS } else { EXIT_ASSERTION })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KindSelection {
    #[default]
    Both,
    Shared,
    NonShared,
}

impl KindSelection {
    fn kinds(self) -> Vec<MeasureKind> {
        match self {
            KindSelection::Both => vec![MeasureKind::Shared, MeasureKind::NonShared],
            KindSelection::Shared => vec![MeasureKind::Shared],
            KindSelection::NonShared => vec![MeasureKind::NonShared],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Fit and score every `(n, seed)` cell.
    #[default]
    Fit,
    /// Evaluate the adversarial sequence; no fitting.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RateSweepRun {
    pub mode: SweepMode,
    pub kinds: KindSelection,
    pub sweep: SweepConfig,
    pub adversarial: AdversarialConfig,
    /// `METRIC OP VALUE` checks, e.g. `slope<=-0.25`.
    pub assertions: Vec<String>,
}

#[derive(Serialize)]
struct CurveSummary {
    kind: MeasureKind,
    medians: Vec<(usize, f64)>,
    slope: Option<f64>,
    intercept: Option<f64>,
    failures: usize,
}

#[derive(Serialize)]
struct SweepSummary {
    curves: Vec<CurveSummary>,
    metrics: BTreeMap<String, Option<f64>>,
    assertions: Vec<Outcome>,
}

/// `slope` needs every requested kind to satisfy it, so it is the maximum
/// (shallowest) slope; `gap` is non-shared minus shared.
fn sweep_metrics(curves: &[RateCurve]) -> BTreeMap<String, Option<f64>> {
    let slope_of = |k: MeasureKind| curves.iter().find(|c| c.kind == k).and_then(|c| c.slope);
    let mut m = BTreeMap::new();
    let slopes: Vec<Option<f64>> = curves.iter().map(|c| c.slope).collect();
    let all: Option<Vec<f64>> = slopes.into_iter().collect();
    m.insert("slope".into(), all.map(|v| v.into_iter().fold(f64::NEG_INFINITY, f64::max)));
    m.insert("shared.slope".into(), slope_of(MeasureKind::Shared));
    m.insert("non-shared.slope".into(), slope_of(MeasureKind::NonShared));
    let gap = slope_of(MeasureKind::NonShared).zip(slope_of(MeasureKind::Shared)).map(|(a, b)| a - b);
    m.insert("gap".into(), gap);
    m.insert(
        "failures".into(),
        Some(curves.iter().map(RateCurve::failures).sum::<usize>() as f64),
    );
    m
}

fn sweep_plot(curves: &[RateCurve]) -> Plot {
    Plot {
        title: "Voronoi loss vs sample size (median over seeds)".into(),
        x_label: "n".into(),
        y_label: "median loss".into(),
        log_x: true,
        log_y: true,
        series: curves
            .iter()
            .map(|c| Series {
                label: c.kind.tag().into(),
                points: c.medians.iter().map(|&(n, v)| (n as f64, v)).collect(),
            })
            .collect(),
        notes: curves
            .iter()
            .map(|c| match c.slope {
                Some(s) => format!("{} slope {s:.3}", c.kind.tag()),
                None => format!("{} slope n/a", c.kind.tag()),
            })
            .collect(),
    }
}

fn adversarial_plot(curve: &AdversarialCurve) -> Plot {
    Plot {
        title: "Adversarial sequence: L2 distance over Voronoi loss".into(),
        x_label: "n".into(),
        y_label: "ratio".into(),
        log_x: true,
        log_y: true,
        series: vec![Series {
            label: "ratio".into(),
            points: curve.points.iter().map(|p| (p.n as f64, p.ratio)).collect(),
        }],
        notes: vec![match curve.decay() {
            Some(d) => format!("final/initial {d:.3}"),
            None => "final/initial n/a".into(),
        }],
    }
}

pub fn rate_sweep_cmd(ctx: &Context, run: &RateSweepRun) -> CliResult<i32> {
    let assertions = parse_assertions(&run.assertions)?;
    match run.mode {
        SweepMode::Adversarial => {
            let cfg = &run.adversarial;
            let (frozen, _) = cfg.instance()?;
            let mut fp = Vec::new();
            for m in [&frozen.c_q, &frozen.c_k, &frozen.c_v] {
                fp.extend_from_slice(m.as_slice());
            }
            ctx.manifest(run, vec![cfg.seed], Some(sha256_hex(&fp)))?;
            let curve = adversarial_curve(cfg)?;
            ctx.write(".csv", &curve.to_csv(cfg.seed)?)?;
            ctx.write(".svg", &render(&adversarial_plot(&curve)))?;
            let mut metrics = BTreeMap::new();
            metrics.insert("decay".to_string(), curve.decay());
            metrics.insert(
                "monotone".to_string(),
                Some(if curve.strictly_decreasing() { 1.0 } else { 0.0 }),
            );
            let outcomes = evaluate(&assertions, &metrics)?;
            ctx.write_json(".json", &serde_json::json!({
                "points": curve.points,
                "metrics": metrics,
                "assertions": outcomes,
            }))?;
            for p in &curve.points {
                println!(
                    "n {:>4}  D {:.4e}  L2 {:.4e} (se {:.1e})  ratio {:.4}",
                    p.n, p.loss, p.l2, p.l2_std_err, p.ratio
                );
            }
            println!(
                "strictly decreasing: {}  final/initial: {}",
                curve.strictly_decreasing(),
                curve.decay().map_or("n/a".into(), |d| format!("{d:.4}"))
            );
            print_outcomes(&outcomes);
            Ok(assertion_exit(&outcomes))
        }
        SweepMode::Fit => {
            let cfg = &run.sweep;
            cfg.validate()?;
            let fp = frozen_fingerprint_data(&cfg.problem, &cfg.seeds)?;
            ctx.manifest(run, cfg.seeds.clone(), Some(sha256_hex(&fp)))?;
            let curves = run
                .kinds
                .kinds()
                .into_iter()
                .map(|k| rate_sweep(k, cfg))
                .collect::<doran_core::Result<Vec<_>>>()?;
            ctx.write(".csv", &rate_curves_csv(&curves)?)?;
            ctx.write(".svg", &render(&sweep_plot(&curves)))?;
            let metrics = sweep_metrics(&curves);
            let outcomes = evaluate(&assertions, &metrics)?;
            for c in &curves {
                let med: Vec<String> = c.medians.iter().map(|(n, v)| format!("{n}:{v:.4}")).collect();
                println!(
                    "{:<10} slope {}  failures {}  medians {}",
                    c.kind.tag(),
                    c.slope.map_or("n/a".into(), |s| format!("{s:.4}")),
                    c.failures(),
                    med.join(" ")
                );
            }
            print_outcomes(&outcomes);
            ctx.write_json(
                ".json",
                &SweepSummary {
                    curves: curves
                        .iter()
                        .map(|c| CurveSummary {
                            kind: c.kind,
                            medians: c.medians.clone(),
                            slope: c.slope,
                            intercept: c.intercept,
                            failures: c.failures(),
                        })
                        .collect(),
                    metrics,
                    assertions: outcomes.clone(),
                },
            )?;
            Ok(assertion_exit(&outcomes))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainToyRun {
    pub toy: ToyConfig,
    /// Checks on `wins` (seeds where the shared model's test error is at most
    /// the non-shared one's at the smallest fraction) and `seeds`.
    pub assertions: Vec<String>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

fn toy_medians(curves: &ToyCurves, cfg: &ToyConfig, method: &str) -> Vec<(f64, usize, Option<f64>)> {
    cfg.fractions
        .iter()
        .map(|&f| {
            let vals: Vec<f64> = curves
                .records
                .iter()
                .filter(|r| r.method == method && r.fraction == f)
                .filter_map(|r| r.test_mse)
                .collect();
            (f, cfg.train_size(f), median(vals))
        })
        .collect()
}

pub fn train_toy_cmd(ctx: &Context, run: &TrainToyRun) -> CliResult<i32> {
    let assertions = parse_assertions(&run.assertions)?;
    let cfg = &run.toy;
    cfg.validate()?;
    let fp = frozen_fingerprint_data(&cfg.problem, &cfg.seeds)?;
    ctx.manifest(run, cfg.seeds.clone(), Some(sha256_hex(&fp)))?;
    let curves = train_toy(cfg)?;
    ctx.write(".csv", &curves.to_csv()?)?;

    let methods = doran_core::estimation::TOY_METHODS;
    let series: Vec<Series> = methods
        .iter()
        .map(|(name, _)| Series {
            label: (*name).into(),
            points: toy_medians(&curves, cfg, name)
                .into_iter()
                .filter_map(|(_, n, m)| Some((n as f64, m?)))
                .collect(),
        })
        .collect();
    ctx.write(
        ".svg",
        &render(&Plot {
            title: "Test MSE vs training size (median over seeds)".into(),
            x_label: "training samples".into(),
            y_label: "test MSE".into(),
            log_x: true,
            log_y: true,
            series,
            notes: Vec::new(),
        }),
    )?;

    let smallest = cfg.fractions[0];
    let (wins, total) = curves.shared_wins(smallest);
    let metrics = BTreeMap::from([
        ("wins".to_string(), Some(wins as f64)),
        ("seeds".to_string(), Some(total as f64)),
    ]);
    let outcomes = evaluate(&assertions, &metrics)?;
    let per_method: BTreeMap<&str, Vec<(f64, usize, Option<f64>)>> =
        methods.iter().map(|(name, _)| (*name, toy_medians(&curves, cfg, name))).collect();
    ctx.write_json(
        ".json",
        &serde_json::json!({
            "median_test_mse": per_method,
            "smallest_fraction": smallest,
            "metrics": metrics,
            "assertions": outcomes,
        }),
    )?;
    for (name, rows) in &per_method {
        let cells: Vec<String> = rows
            .iter()
            .map(|(f, n, m)| format!("{f}({n}):{}", m.map_or("n/a".into(), |v| format!("{v:.5}"))))
            .collect();
        println!("{name:<6} median test MSE {}", cells.join(" "));
    }
    println!("shared+tau wins at fraction {smallest}: {wins}/{total}");
    print_outcomes(&outcomes);
    Ok(assertion_exit(&outcomes))
}
