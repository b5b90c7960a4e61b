use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motionpose::annotation::JOINT_NAMES;
use motionpose::datagen::{camouflage_report, read_dataset, render_clip, CamouflageReport, Split};
use motionpose::evaluation::read_results_csv;
use motionpose::training::load_checkpoint;
use motionpose::workflow::{read_predictions, write_predictions, PredictionFile};
use motionpose::Image;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motionpose"));
    c.env("MOTIONPOSE_THREADS", "2");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn motionpose")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run(dir, args);
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Relative path -> bytes for every file except run manifests.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn small_dataset(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec![
        "datagen", "--out", name, "--train", "4", "--test", "2", "--seed", "7",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

const TINY_TRAIN: [&str; 8] = [
    "--epochs", "1", "--crop", "6", "--fc", "32,16", "--banks", "2",
];

#[test]
fn datagen_is_deterministic_and_validates_flags() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path(), "a", &[]);
    small_dataset(d.path(), "b", &[]);
    assert_eq!(tree(&d.path().join("a")), tree(&d.path().join("b")));
    let ds = read_dataset(&d.path().join("a")).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 4);
    assert_eq!(ds.samples[0].record.offsets, vec![0, 1, 3, 10]);

    assert_eq!(code(d.path(), &["datagen", "--train", "1"]).0, 2);
    assert_eq!(
        code(d.path(), &["datagen", "--out", "x", "--mode", "stripes"]).0,
        2
    );
    assert_eq!(
        code(d.path(), &["datagen", "--out", "x", "--people", "3"]).0,
        2
    );
    assert_eq!(
        code(d.path(), &["datagen", "--out", "x", "--delta", "5"]).0,
        2
    );
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "datagen");
    assert_eq!(m["seed"], 7);
    assert!(m["timings"]["render"].as_f64().unwrap() >= 0.0);
}

#[test]
fn camouflage_dataset_is_measurable() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "datagen",
            "--out",
            "ds",
            "--train",
            "6",
            "--test",
            "0",
            "--mode",
            "camouflage",
            "--seed",
            "3",
        ],
    );
    let ds = read_dataset(&d.path().join("ds")).unwrap();
    let mut reports = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let clip = render_clip(&ds.scene, i, &s.record.offsets).unwrap();
        // The files on disk are the clip that the report measures, up to
        // 8-bit quantization.
        let disk = ds.frame(s, 3).unwrap();
        let diff = disk
            .data()
            .iter()
            .zip(clip.frame(3).unwrap().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(diff <= 0.5 / 255.0 + 1e-6, "{diff}");
        reports.push(camouflage_report(&clip, ds.delta).unwrap());
    }
    let mean = CamouflageReport::mean(&reports).unwrap();
    assert!(mean.passes(), "{mean:?}");
}

fn motion_energy(stack: &Image, mask: &[bool]) -> f64 {
    let plane = stack.height() * stack.width();
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 3..stack.channels() {
        for (v, &m) in stack.plane(c).iter().zip(mask) {
            if m {
                sum += (*v as f64).abs();
                n += 1;
            }
        }
    }
    assert!(n > plane / 4);
    sum / n as f64
}

#[test]
fn features_cover_static_pan_and_delta_cases() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    small_dataset(root, "ds", &["--mode", "cluttered"]);
    // A static copy: frame 3 replaced by frame 0.
    ok(
        root,
        &[
            "datagen",
            "--out",
            "still",
            "--train",
            "4",
            "--test",
            "2",
            "--seed",
            "7",
            "--mode",
            "cluttered",
        ],
    );
    for e in fs::read_dir(root.join("still/clips")).unwrap() {
        let dir = e.unwrap().path();
        fs::copy(dir.join("f0.png"), dir.join("f3.png")).unwrap();
    }
    ok(
        root,
        &[
            "features",
            "--dataset",
            "still",
            "--kind",
            "flowmag",
            "--flow-iters",
            "50",
            "--out",
            "fs",
        ],
    );
    let stack = Image::read_f32p(&root.join("fs/stacks/c00000.f32p")).unwrap();
    assert_eq!(stack.channels(), 4);
    assert!(stack.plane(3).iter().all(|&v| v.abs() <= 1e-6));

    ok(
        root,
        &[
            "features",
            "--dataset",
            "ds",
            "--kind",
            "diff",
            "--delta",
            "1",
            "--out",
            "d1",
        ],
    );
    ok(
        root,
        &[
            "features",
            "--dataset",
            "ds",
            "--kind",
            "diff",
            "--delta",
            "10",
            "--out",
            "d10",
        ],
    );
    let a = fs::read(root.join("d1/stacks/c00001.f32p")).unwrap();
    let b = fs::read(root.join("d10/stacks/c00001.f32p")).unwrap();
    assert_ne!(a, b);

    assert_eq!(
        code(
            root,
            &[
                "features",
                "--dataset",
                "ds",
                "--kind",
                "optical",
                "--out",
                "x"
            ]
        )
        .0,
        2
    );
    assert_eq!(
        code(
            root,
            &[
                "features",
                "--dataset",
                "ds",
                "--kind",
                "diff",
                "--delta",
                "2",
                "--out",
                "x"
            ]
        )
        .0,
        2
    );
    assert_eq!(
        code(
            root,
            &[
                "features",
                "--dataset",
                "ds",
                "--kind",
                "diff",
                "--out",
                "ds"
            ]
        )
        .0,
        2
    );
    assert!(!root.join("ds/features.json").exists());

    // Panning camera: compensation removes the background motion.
    ok(
        root,
        &[
            "datagen",
            "--out",
            "pan",
            "--train",
            "3",
            "--test",
            "0",
            "--camera",
            "pan",
            "--mode",
            "cluttered",
            "--seed",
            "5",
        ],
    );
    ok(
        root,
        &[
            "features",
            "--dataset",
            "pan",
            "--kind",
            "diff",
            "--compensate",
            "off",
            "--out",
            "raw",
        ],
    );
    ok(
        root,
        &[
            "features",
            "--dataset",
            "pan",
            "--kind",
            "diff",
            "--compensate",
            "on",
            "--out",
            "comp",
        ],
    );
    let ds = read_dataset(&root.join("pan")).unwrap();
    for (i, s) in ds.samples.iter().enumerate() {
        let clip = render_clip(&ds.scene, i, &s.record.offsets).unwrap();
        let (w, h) = (ds.scene.width, ds.scene.height);
        let border = 16;
        let mask: Vec<bool> = (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                let inner = y >= border && y < h - border && x >= border && x < w - border;
                inner
                    && [0, 3].iter().all(|&o| {
                        clip.figure_coverage[clip.offsets.iter().position(|&k| k == o).unwrap()]
                            .data()[p]
                            <= 0.01
                    })
            })
            .collect();
        let id = &s.record.id;
        let raw = motion_energy(
            &Image::read_f32p(&root.join(format!("raw/stacks/{id}.f32p"))).unwrap(),
            &mask,
        );
        let comp = motion_energy(
            &Image::read_f32p(&root.join(format!("comp/stacks/{id}.f32p"))).unwrap(),
            &mask,
        );
        assert!(raw >= 5.0 * comp, "{id}: {raw} vs {comp}");
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    small_dataset(root, "ds", &[]);
    ok(
        root,
        &[
            "features",
            "--dataset",
            "ds",
            "--kind",
            "diff",
            "--out",
            "fd",
        ],
    );
    let mut args = vec!["train", "--features", "fd", "--seed", "4", "--out", "t1"];
    args.extend_from_slice(&TINY_TRAIN);
    ok(root, &args);
    args[6] = "t2";
    ok(root, &args);
    assert_eq!(
        fs::read(root.join("t1/loss.csv")).unwrap(),
        fs::read(root.join("t2/loss.csv")).unwrap()
    );
    assert_eq!(
        fs::read(root.join("t1/model.ckpt")).unwrap(),
        fs::read(root.join("t2/model.ckpt")).unwrap()
    );
    let ck = load_checkpoint::<f32>(&root.join("t1/model.ckpt")).unwrap();
    assert_eq!(ck.params.config().conv_features, 16);
    assert_eq!(ck.params.config().input_channels, 6);
    assert_eq!(ck.epoch, 1);
    assert_eq!(
        fs::read_to_string(root.join("t1/loss.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    ok(
        root,
        &[
            "infer",
            "--ckpt",
            "t1/model.ckpt",
            "--features",
            "fd",
            "--dump-maps",
            "--out",
            "inf",
        ],
    );
    let preds = read_predictions(&root.join("inf/predictions.json")).unwrap();
    assert_eq!(preds.len(), 2);
    assert!(preds.values().all(|p| p.len() == JOINT_NAMES.len()));
    let maps = Image::read_f32p(&root.join("inf/maps/c00004.f32p")).unwrap();
    assert_eq!((maps.channels(), maps.height(), maps.width()), (6, 45, 60));

    // Features recomputed from the dataset give the same predictions.
    ok(
        root,
        &[
            "infer",
            "--ckpt",
            "t1/model.ckpt",
            "--dataset",
            "ds",
            "--out",
            "inf2",
        ],
    );
    assert_eq!(
        fs::read(root.join("inf/predictions.json")).unwrap(),
        fs::read(root.join("inf2/predictions.json")).unwrap()
    );
    ok(
        root,
        &[
            "infer",
            "--ckpt",
            "t1/model.ckpt",
            "--dataset",
            "ds",
            "--spatial-model",
            "off",
            "--out",
            "off",
        ],
    );

    // Checkpoint and feature mismatches.
    ok(
        root,
        &[
            "features",
            "--dataset",
            "ds",
            "--kind",
            "rgb",
            "--out",
            "fr",
        ],
    );
    assert_eq!(
        code(
            root,
            &[
                "infer",
                "--ckpt",
                "t1/model.ckpt",
                "--features",
                "fr",
                "--out",
                "x"
            ]
        )
        .0,
        4
    );
    fs::write(root.join("bad.ckpt"), b"MPOSECK\0garbage").unwrap();
    assert_eq!(
        code(
            root,
            &[
                "infer",
                "--ckpt",
                "bad.ckpt",
                "--dataset",
                "ds",
                "--out",
                "x"
            ]
        )
        .0,
        4
    );
    let bytes = fs::read(root.join("t1/model.ckpt")).unwrap();
    fs::write(root.join("short.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(
        code(
            root,
            &[
                "infer",
                "--ckpt",
                "short.ckpt",
                "--dataset",
                "ds",
                "--spatial-model",
                "off",
                "--out",
                "x"
            ]
        )
        .0,
        4
    );

    let out = ok(
        root,
        &[
            "eval",
            "--pred",
            "inf/predictions.json",
            "--pred",
            "off/predictions.json",
            "--gt",
            "ds",
            "--radii",
            "0:20:1",
            "--out",
            "ev",
        ],
    );
    assert!(out.contains("mean[0,20]"));
    let curves = read_results_csv(&root.join("ev/pck.csv")).unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0].label, "inf");
    assert_eq!(curves[1].label, "off");
    assert_eq!(curves[0].radii.len(), 21);
    let svg = fs::read_to_string(root.join("ev/pck.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("ev/summary.json")).unwrap()).unwrap();
    assert!(summary[0]["mean_precision_0_20"].as_f64().is_some());
}

#[test]
fn eval_reports_perfect_runs_and_mismatched_ids() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    small_dataset(root, "ds", &[]);
    let ds = read_dataset(&root.join("ds")).unwrap();
    let mut perfect = PredictionFile::new();
    for s in ds.split(Split::Test) {
        let entry = JOINT_NAMES
            .iter()
            .zip(&s.annotation.joints)
            .map(|(n, j)| (n.to_string(), j.unwrap_or([0.0, 0.0])))
            .collect();
        perfect.insert(s.record.id.clone(), entry);
    }
    write_predictions(&root.join("perfect.json"), &perfect).unwrap();
    ok(
        root,
        &[
            "eval",
            "--pred",
            "perfect.json",
            "--label",
            "gt",
            "--gt",
            "ds",
            "--out",
            "ev",
        ],
    );
    let curves = read_results_csv(&root.join("ev/pck.csv")).unwrap();
    assert!(curves[0].rate.iter().all(|&r| r == 1.0));
    assert_eq!(curves[0].radii.len(), 31);

    let mut wrong = perfect.clone();
    let first = wrong.keys().next().unwrap().clone();
    let entry = wrong.remove(&first).unwrap();
    wrong.insert("c99999".into(), entry);
    write_predictions(&root.join("wrong.json"), &wrong).unwrap();
    let (c, err) = code(
        root,
        &["eval", "--pred", "wrong.json", "--gt", "ds", "--out", "ev2"],
    );
    assert_eq!(c, 5);
    assert!(err.contains("c99999") && err.contains(&first), "{err}");
    assert!(!root.join("ev2/pck.csv").exists());
    assert_eq!(
        code(
            root,
            &[
                "eval",
                "--pred",
                "perfect.json",
                "--gt",
                "ds",
                "--radii",
                "5:1:1",
                "--out",
                "ev3"
            ]
        )
        .0,
        2
    );
    assert_eq!(
        code(
            root,
            &[
                "eval",
                "--pred",
                "perfect.json",
                "--gt",
                "ds",
                "--joints",
                "knee",
                "--out",
                "ev3"
            ]
        )
        .0,
        2
    );
}

#[test]
fn divergence_exits_with_code_3() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    small_dataset(root, "ds", &[]);
    ok(
        root,
        &["features", "--dataset", "ds", "--kind", "rgb", "--out", "f"],
    );
    let args = [
        "train",
        "--features",
        "f",
        "--lr",
        "1e30",
        "--out",
        "t",
        "--epochs",
        "3",
        "--crop",
        "6",
        "--fc",
        "32,16",
        "--banks",
        "2",
    ];
    let (c, err) = code(root, &args);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn bench_rows_and_equivalence_failure() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let out = ok(
        root,
        &[
            "bench", "--sizes", "64,72x80", "--banks", "2", "--fc", "32,16", "--out", "b",
        ],
    );
    assert!(out.contains("64x64") && out.contains("72x80"));
    let csv = fs::read_to_string(root.join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let (c, err) = code(
        root,
        &[
            "bench",
            "--sizes",
            "64",
            "--banks",
            "1",
            "--fc",
            "16,8",
            "--inject-mismatch",
        ],
    );
    assert_eq!(c, 6);
    assert!(err.contains("equivalence"), "{err}");
    assert_eq!(code(root, &["bench", "--sizes", "0x5"]).0, 2);
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["gradcheck", "--out", "g"]);
    assert!(out.contains("max_rel_error") && out.contains("conv2d"));
    let (c, err) = code(d.path(), &["gradcheck", "--fault", "maxpool2"]);
    assert_ne!(c, 0);
    assert!(err.contains("worst offender maxpool2"), "{err}");
}

#[test]
fn replay_and_batch_reproduce_outputs() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    small_dataset(root, "ds", &[]);
    let list = serde_json::json!([
        [
            "features",
            "--dataset",
            "ds",
            "--kind",
            "diff",
            "--delta",
            "1",
            "--out",
            "f"
        ],
        [
            "train",
            "--features",
            "f",
            "--seed",
            "2",
            "--out",
            "t",
            "--epochs",
            "1",
            "--crop",
            "6",
            "--fc",
            "32,16",
            "--banks",
            "2"
        ],
        [
            "infer",
            "--ckpt",
            "t/model.ckpt",
            "--features",
            "f",
            "--out",
            "i"
        ],
        [
            "eval",
            "--pred",
            "i/predictions.json",
            "--gt",
            "ds",
            "--out",
            "e"
        ]
    ]);
    fs::write(root.join("list.json"), list.to_string()).unwrap();
    ok(root, &["batch", "list.json"]);
    for (dir, again) in [
        ("ds", "ds2"),
        ("f", "f2"),
        ("t", "t2"),
        ("i", "i2"),
        ("e", "e2"),
    ] {
        ok(
            root,
            &["replay", &format!("{dir}/manifest.json"), "--out", again],
        );
        assert_eq!(tree(&root.join(dir)), tree(&root.join(again)), "{dir}");
    }
    fs::write(root.join("nested.json"), r#"[["batch", "list.json"]]"#).unwrap();
    assert_eq!(code(root, &["batch", "nested.json"]).0, 2);
}
