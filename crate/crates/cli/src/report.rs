//! `eval`, `bench` and `gradcheck`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use motionpose::annotation::{joint_index, JOINT_NAMES};
use motionpose::convnet::{forward_oneshot, forward_patchwise, ModelParams};
use motionpose::datagen::Split;
use motionpose::evaluation::{
    emit_results, format_table, mean_precision, parse_radii, pck_curve, DEFAULT_TORSO_NORM,
};
use motionpose::gradcheck::{run_gradcheck, FAULT_TARGETS};
use motionpose::image_ops::{ChannelKind, Image, NormalizationParams};
use motionpose::pipeline::prepare_input;
use motionpose::workflow::{prediction_from_entry, read_predictions};
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::data::load_dataset;
use crate::manifest::{exit, CmdResult, Failure, Run};
use crate::model::{fc_widths, network_config, ModelSize};

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Predictions JSON; repeat to compare several runs.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Curve label per `--pred`; defaults to the predictions' directory name.
    #[arg(long)]
    pub label: Vec<String>,
    /// Ground-truth dataset.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// start:end:step in torso-normalized pixels.
    #[arg(long, default_value = "0:30:1")]
    pub radii: String,
    /// `all`, `wrists`, `elbows`, `shoulders` or a comma list of joint names.
    #[arg(long, default_value = "all")]
    pub joints: String,
    #[arg(long, default_value_t = DEFAULT_TORSO_NORM)]
    pub torso_norm: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_joints(spec: &str) -> CmdResult<Vec<usize>> {
    let names: Vec<&str> = match spec {
        "all" => JOINT_NAMES.to_vec(),
        "wrists" => vec!["l_wrist", "r_wrist"],
        "elbows" => vec!["l_elbow", "r_elbow"],
        "shoulders" => vec!["l_shoulder", "r_shoulder"],
        list => list.split(',').map(str::trim).collect(),
    };
    names
        .iter()
        .map(|n| joint_index(n).ok_or_else(|| Failure::usage(format!("unknown joint {n:?}"))))
        .collect()
}

/// One evaluated run in `summary.json`.
#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub label: String,
    pub pck5: Option<f64>,
    pub pck10: Option<f64>,
    /// Mean detection rate over radii 0..=20.
    pub mean_precision_0_20: Option<f64>,
}

fn rate_at(radii: &[f64], rate: &[f64], r: f64) -> Option<f64> {
    radii.iter().position(|&x| x == r).map(|i| rate[i])
}

pub fn eval_cmd(a: &EvalArgs, argv: &[String]) -> CmdResult {
    let radii = parse_radii(&a.radii).map_err(|e| Failure::usage(e.to_string()))?;
    let joints = parse_joints(&a.joints)?;
    if !a.label.is_empty() && a.label.len() != a.pred.len() {
        return Err(Failure::usage("give one --label per --pred or none"));
    }
    let ds = load_dataset(&a.gt)?;
    let gt = ds.split(a.split);
    let gt_ids: BTreeSet<&str> = gt.iter().map(|s| s.record.id.as_str()).collect();
    let gts: Vec<_> = gt.iter().map(|s| s.annotation.clone()).collect();

    let mut curves = Vec::new();
    for (i, path) in a.pred.iter().enumerate() {
        let file = read_predictions(path).map_err(|e| Failure::usage(e.to_string()))?;
        let pred_ids: BTreeSet<&str> = file.keys().map(String::as_str).collect();
        let extra: Vec<_> = pred_ids.difference(&gt_ids).collect();
        let missing: Vec<_> = gt_ids.difference(&pred_ids).collect();
        if !extra.is_empty() || !missing.is_empty() {
            return Err(Failure::new(
                exit::EVAL_MISMATCH,
                format!(
                    "{}: sample ids do not match the {} split\n  not in ground truth: {extra:?}\n  missing predictions: {missing:?}",
                    path.display(),
                    a.split.as_str()
                ),
            ));
        }
        let preds = gt
            .iter()
            .map(|s| prediction_from_entry(&file[&s.record.id]))
            .collect::<motionpose::Result<Vec<_>>>()
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let label = a
            .label
            .get(i)
            .cloned()
            .unwrap_or_else(|| default_label(path, i));
        curves.push(pck_curve(
            &preds,
            &gts,
            &joints,
            &radii,
            a.torso_norm,
            &label,
        )?);
    }
    let mut labels = BTreeSet::new();
    for c in &mut curves {
        // Column names must stay distinct.
        while !labels.insert(c.label.clone()) {
            c.label.push('\'');
        }
    }

    let mut run = Run::start(&a.out, "eval", argv, a, None)?;
    emit_results(&curves, &run.path("pck"))?;
    run.artifact("pck.csv");
    run.artifact("pck.svg");
    let summary: Vec<EvalSummary> = curves
        .iter()
        .map(|c| EvalSummary {
            label: c.label.clone(),
            pck5: rate_at(&c.radii, &c.rate, 5.0),
            pck10: rate_at(&c.radii, &c.rate, 10.0),
            mean_precision_0_20: mean_precision(c, 0.0, 20.0).ok(),
        })
        .collect();
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                fmt(s.pck5),
                fmt(s.pck10),
                fmt(s.mean_precision_0_20),
            ]
        })
        .collect();
    let table = format_table(&["run", "pck@5", "pck@10", "mean[0,20]"], &rows);
    std::fs::write(run.path("summary.txt"), &table)?;
    std::fs::write(
        run.path("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    run.artifact("summary.txt");
    run.artifact("summary.json");
    run.finish()?;
    print!("{table}");
    Ok(())
}

fn default_label(path: &std::path::Path, i: usize) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("run{i}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BenchSize {
    pub width: usize,
    pub height: usize,
}

impl std::str::FromStr for BenchSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad size {s:?}, expected N or WxH"))
        };
        let (width, height) = match s.split_once('x') {
            Some((w, h)) => (parse(w)?, parse(h)?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        if width == 0 || height == 0 {
            return Err(format!("bad size {s:?}"));
        }
        Ok(Self { width, height })
    }
}

impl std::fmt::Display for BenchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

pub const EQUIVALENCE_TOLERANCE: f32 = 1e-4;

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Input sizes, each `N` (square) or `WxH`.
    #[arg(long, value_delimiter = ',', default_value = "96,128,240x180")]
    pub sizes: Vec<BenchSize>,
    #[arg(long, value_enum, default_value = "small")]
    pub model: ModelSize,
    #[arg(long, default_value_t = 3)]
    pub banks: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [512, 256])]
    pub fc: Vec<usize>,
    /// Channels of the random input stack (3 appearance, the rest motion).
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Timed repetitions per size; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Writes `bench.csv` and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturbs the patchwise output to exercise the equivalence check.
    #[arg(long, hide = true)]
    pub inject_mismatch: bool,
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub size: String,
    pub cells: usize,
    pub oneshot_ms: f64,
    pub patchwise_ms: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

fn fastest<R>(repeats: usize, mut f: impl FnMut() -> motionpose::Result<R>) -> CmdResult<(R, f64)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
        out = Some(r);
    }
    Ok((out.expect("at least one repeat"), best))
}

pub fn bench_cmd(a: &BenchArgs, argv: &[String]) -> CmdResult {
    if a.channels < 3 {
        return Err(Failure::usage("--channels must be at least 3"));
    }
    let net = network_config(a.model, a.channels, fc_widths(&a.fc)?, a.banks);
    net.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let mut run = a
        .out
        .as_ref()
        .map(|o| Run::start(o, "bench", argv, a, Some(a.seed)))
        .transpose()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let params: ModelParams<f32> = ModelParams::build(&net, &mut rng)?;
    let mut kinds = vec![ChannelKind::Appearance; 3];
    kinds.resize(a.channels, ChannelKind::Motion);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for size in &a.sizes {
        let img = Image::from_fn(size.height, size.width, a.channels, |_, _, _| {
            rng.gen::<f32>()
        });
        let input = prepare_input::<f32>(&img, &kinds, &net, &NormalizationParams::default())?;
        let (one, t1) = fastest(a.repeats, || forward_oneshot(&params, &input.pyramid))?;
        let (mut patch, t2) = fastest(a.repeats, || forward_patchwise(&params, &input.pyramid))?;
        if a.inject_mismatch {
            patch.maps.data_mut()[0] += 1e-2;
        }
        let diff = one.maps.max_abs_diff(&patch.maps)?;
        if !(diff <= EQUIVALENCE_TOLERANCE) {
            failures.push(format!("{size}: max |one-shot - patchwise| = {diff:e}"));
        }
        rows.push(BenchRow {
            size: size.to_string(),
            cells: one.rows() * one.cols(),
            oneshot_ms: t1,
            patchwise_ms: t2,
            speedup: t2 / t1,
            max_abs_diff: diff as f64,
        });
    }
    let table = format_table(
        &[
            "size",
            "cells",
            "oneshot_ms",
            "patchwise_ms",
            "speedup",
            "max_abs_diff",
        ],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.size.clone(),
                    r.cells.to_string(),
                    format!("{:.1}", r.oneshot_ms),
                    format!("{:.1}", r.patchwise_ms),
                    format!("{:.2}", r.speedup),
                    format!("{:.2e}", r.max_abs_diff),
                ]
            })
            .collect::<Vec<_>>(),
    );
    print!("{table}");
    if let Some(run) = run.as_mut() {
        let mut w = csv::Writer::from_path(run.path("bench.csv"))
            .map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
        for r in &rows {
            w.serialize(r)
                .map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
        }
        w.flush()?;
        run.artifact("bench.csv");
    }
    if let Some(run) = run {
        run.finish()?;
    }
    if !failures.is_empty() {
        return Err(Failure::new(
            exit::EQUIVALENCE,
            format!(
                "equivalence check failed (tolerance {EQUIVALENCE_TOLERANCE:e}):\n  {}",
                failures.join("\n  ")
            ),
        ));
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts one analytic gradient to test the audit itself.
    #[arg(long, hide = true, value_parser = clap::builder::PossibleValuesParser::new(FAULT_TARGETS))]
    pub fault: Option<String>,
    /// Writes `gradcheck.csv` and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gradcheck_cmd(a: &GradcheckArgs, argv: &[String]) -> CmdResult {
    let mut run = a
        .out
        .as_ref()
        .map(|o| Run::start(o, "gradcheck", argv, a, Some(a.seed)))
        .transpose()?;
    let report = run_gradcheck(a.seed, a.fault.as_deref())?;
    let rows: Vec<Vec<String>> = report
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                format!("{:.3e}", c.max_rel_error),
                format!("{:.0e}", c.tolerance),
                c.entries.to_string(),
                if c.passed() { "ok" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    let table = format_table(
        &["check", "max_rel_error", "tolerance", "entries", "status"],
        &rows,
    );
    print!("{table}");
    if let Some(run) = run.as_mut() {
        let mut by_name = BTreeMap::new();
        for c in &report {
            by_name.insert(c.name.clone(), (c.max_rel_error, c.tolerance, c.passed()));
        }
        std::fs::write(
            run.path("gradcheck.json"),
            serde_json::to_string_pretty(&by_name)?,
        )?;
        run.artifact("gradcheck.json");
    }
    if let Some(run) = run {
        run.finish()?;
    }
    let worst = report
        .iter()
        .filter(|c| !c.passed())
        .max_by(|x, y| (x.max_rel_error / x.tolerance).total_cmp(&(y.max_rel_error / y.tolerance)));
    match worst {
        Some(c) => Err(Failure::new(
            exit::FAILURE,
            format!(
                "gradient check failed; worst offender {} (relative error {:.3e} > {:.0e})",
                c.name, c.max_rel_error, c.tolerance
            ),
        )),
        None => {
            println!("all {} checks passed", report.len());
            Ok(())
        }
    }
}
