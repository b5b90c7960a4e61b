//! `datagen` and `features`.

use std::path::{Path, PathBuf};

use clap::Args;
use motionpose::datagen::{
    generate_dataset, read_dataset, write_dataset, CameraMode, DatasetIndex, SceneConfig, Split,
    TextureMode,
};
use motionpose::image_ops::Image;
use motionpose::motion::{FeatureKind, FlowParams, MotionFeatureConfig};
use motionpose::training::TrainSample;
use motionpose::workflow::{sample_features, train_sample};
use serde::{Deserialize, Serialize};

use crate::manifest::{exit, CmdResult, Failure, Run};
use crate::{ensure_disjoint, par, Switch};

#[derive(Args, Debug, Serialize)]
pub struct DatagenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value = "plain")]
    pub mode: TextureMode,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub people: u8,
    #[arg(long, default_value = "none")]
    pub camera: CameraMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frame numbers stored per clip; must include 0.
    #[arg(long, value_delimiter = ',', default_value = "0,1,3,10")]
    pub offsets: Vec<usize>,
    /// Default motion frame offset recorded in the index.
    #[arg(long, default_value_t = 3)]
    pub delta: usize,
    #[arg(long, default_value_t = 240)]
    pub width: usize,
    #[arg(long, default_value_t = 180)]
    pub height: usize,
}

pub fn datagen(a: &DatagenArgs, argv: &[String]) -> CmdResult {
    let mut offsets = a.offsets.clone();
    offsets.sort_unstable();
    offsets.dedup();
    if offsets.first() != Some(&0) {
        return Err(Failure::usage("--offsets must include 0"));
    }
    if !offsets.contains(&a.delta) {
        return Err(Failure::usage(format!(
            "--delta {} is not among --offsets",
            a.delta
        )));
    }
    let cfg = SceneConfig {
        width: a.width,
        height: a.height,
        people: a.people as usize,
        texture: a.mode,
        camera: a.camera,
        frames: offsets[offsets.len() - 1] + 1,
        seed: a.seed,
        ..SceneConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let mut run = Run::start(&a.out, "datagen", argv, a, Some(a.seed))?;
    run.phase("render");
    let index = write_dataset(
        generate_dataset(&cfg, a.train, a.test, &offsets),
        run.out(),
        a.delta,
        &cfg,
    )?;
    run.artifact("index.json");
    for s in &index.samples {
        run.artifact(format!("clips/{}", s.id));
    }
    run.finish()?;
    println!("wrote {} clips to {}", index.samples.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// rgb, pair, diff, flow or flowmag.
    #[arg(long)]
    pub kind: FeatureKind,
    /// Frame offset; defaults to the dataset's.
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long, default_value = "off")]
    pub compensate: Switch,
    #[arg(long, default_value_t = FlowParams::default().alpha)]
    pub flow_alpha: f64,
    #[arg(long, default_value_t = FlowParams::default().iters)]
    pub flow_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub const FEATURES_FILE: &str = "features.json";
pub const FEATURES_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSettings {
    pub alpha: f64,
    pub iters: usize,
    pub presmooth_sigma: f64,
}

impl From<FlowParams> for FlowSettings {
    fn from(p: FlowParams) -> Self {
        Self {
            alpha: p.alpha,
            iters: p.iters,
            presmooth_sigma: p.presmooth_sigma,
        }
    }
}

impl From<&FlowSettings> for FlowParams {
    fn from(s: &FlowSettings) -> Self {
        FlowParams {
            alpha: s.alpha,
            iters: s.iters,
            presmooth_sigma: s.presmooth_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub id: String,
    pub split: Split,
    /// Relative to the feature directory.
    pub file: String,
    /// Whether camera compensation ran and succeeded for this sample.
    pub compensated: bool,
}

/// `features.json`: how the stacks were made and where they are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub version: u32,
    pub dataset: PathBuf,
    pub feature: MotionFeatureConfig,
    pub flow: FlowSettings,
    pub samples: Vec<FeatureEntry>,
}

pub fn features(a: &FeaturesArgs, argv: &[String]) -> CmdResult {
    let ds = load_dataset(&a.dataset)?;
    ensure_disjoint(&a.out, &a.dataset)?;
    let delta = a.delta.unwrap_or(ds.delta);
    let feat = MotionFeatureConfig::new(a.kind, delta as i32, a.compensate.on())
        .map_err(|e| Failure::usage(e.to_string()))?;
    if a.kind.uses_motion()
        && ds
            .samples
            .iter()
            .any(|s| !s.record.offsets.contains(&delta))
    {
        return Err(Failure::usage(format!(
            "dataset does not store frame {delta} for every clip"
        )));
    }
    let flow = FlowParams {
        alpha: a.flow_alpha,
        iters: a.flow_iters,
        ..FlowParams::default()
    };
    let mut run = Run::start(&a.out, "features", argv, a, None)?;
    std::fs::create_dir_all(run.path("stacks"))?;
    run.phase("features");
    let out = run.out().to_path_buf();
    let samples: Vec<_> = ds.samples.iter().collect();
    let entries = par::map(&samples, |s| -> CmdResult<FeatureEntry> {
        let stack = sample_features(&ds, s, &feat, &flow)?;
        let file = format!("stacks/{}.f32p", s.record.id);
        stack.image.write_f32p(&out.join(&file))?;
        Ok(FeatureEntry {
            id: s.record.id.clone(),
            split: s.record.split,
            file,
            compensated: stack.camera.is_some(),
        })
    })
    .into_iter()
    .collect::<CmdResult<Vec<_>>>()?;
    let index = FeatureIndex {
        version: FEATURES_VERSION,
        dataset: std::fs::canonicalize(&a.dataset)?,
        feature: feat,
        flow: flow.into(),
        samples: entries,
    };
    std::fs::write(
        run.path(FEATURES_FILE),
        serde_json::to_string_pretty(&index)?,
    )?;
    run.artifact(FEATURES_FILE);
    for e in &index.samples {
        run.artifact(e.file.clone());
    }
    run.finish()?;
    println!(
        "wrote {} {} stacks to {}",
        index.samples.len(),
        a.kind,
        a.out.display()
    );
    Ok(())
}

pub fn load_dataset(root: &Path) -> CmdResult<DatasetIndex> {
    read_dataset(root).map_err(|e| Failure::new(exit::USAGE, format!("cannot read dataset: {e}")))
}

/// A feature directory with its dataset.
pub struct FeatureSet {
    pub dir: PathBuf,
    pub index: FeatureIndex,
    pub dataset: DatasetIndex,
}

impl FeatureSet {
    pub fn open(dir: &Path) -> CmdResult<Self> {
        let p = dir.join(FEATURES_FILE);
        let text = std::fs::read_to_string(&p)
            .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        let index: FeatureIndex = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        if index.version != FEATURES_VERSION {
            return Err(Failure::usage(format!(
                "{}: unsupported version {}",
                p.display(),
                index.version
            )));
        }
        let dataset = load_dataset(&index.dataset)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            dataset,
        })
    }

    /// Training samples of `split` in index order, at most `limit` of them.
    pub fn load(&self, split: Split, limit: Option<usize>) -> CmdResult<Vec<TrainSample>> {
        let feat = &self.index.feature;
        let chosen: Vec<_> = self
            .index
            .samples
            .iter()
            .filter(|e| e.split == split)
            .take(limit.unwrap_or(usize::MAX))
            .collect();
        chosen
            .iter()
            .map(|e| {
                let sample = self
                    .dataset
                    .samples
                    .iter()
                    .find(|s| s.record.id == e.id)
                    .ok_or_else(|| {
                        Failure::usage(format!("sample {} is not in the dataset", e.id))
                    })?;
                let stack = Image::read_f32p(&self.dir.join(&e.file))?;
                if stack.channels() != feat.kind.channels() {
                    return Err(Failure::usage(format!("{}: wrong channel count", e.file)));
                }
                Ok(train_sample(stack, feat, sample))
            })
            .collect()
    }
}
