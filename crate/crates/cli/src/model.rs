//! `train` and `infer`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use motionpose::annotation::NUM_JOINTS;
use motionpose::convnet::{ModelParams, NetworkConfig};
use motionpose::datagen::Split;
use motionpose::image_ops::Image;
use motionpose::motion::{FlowParams, MotionFeatureConfig};
use motionpose::spatial::{build_masks, JointMasks, DEFAULT_BIN, DEFAULT_BLUR_SIGMA};
use motionpose::training::{
    load_checkpoint, loss_csv, train, OptimizerState, SigmaUnits, TrainConfig, TrainSample,
};
use motionpose::workflow::{
    load_features, predict_sample, prediction_entry, write_predictions, PredictionFile,
};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, FeatureSet, FlowSettings};
use crate::manifest::{exit, CmdResult, Failure, Run};
use crate::{ensure_disjoint, par, Switch};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MASKS_FILE: &str = "masks.f32p";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Small,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Pixels,
    Cells,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Feature directory written by `features`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    pub model: ModelSize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Epochs between learning-rate halvings; 0 keeps it constant.
    #[arg(long, default_value_t = 20)]
    pub lr_decay_every: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output cells per side of the training window; 0 trains on whole images.
    #[arg(long, default_value_t = 24)]
    pub crop: usize,
    /// Standard deviation of the target Gaussians.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value = "pixels")]
    pub sigma_units: Units,
    /// Widths of the two fully-connected stages.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 256])]
    pub fc: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub banks: usize,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Joint-mask histogram bin and blur, in pixels.
    #[arg(long, default_value_t = DEFAULT_BIN)]
    pub mask_bin: usize,
    #[arg(long, default_value_t = DEFAULT_BLUR_SIGMA)]
    pub mask_blur: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Stored in the checkpoint header so inference can rebuild the features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub feature: MotionFeatureConfig,
    pub flow: FlowSettings,
    pub train: TrainConfig,
}

pub fn fc_widths(fc: &[usize]) -> CmdResult<[usize; 2]> {
    match fc {
        [a, b] => Ok([*a, *b]),
        _ => Err(Failure::usage(format!(
            "--fc takes two widths, got {}",
            fc.len()
        ))),
    }
}

pub fn network_config(
    size: ModelSize,
    channels: usize,
    fc: [usize; 2],
    banks: usize,
) -> NetworkConfig {
    let base = match size {
        ModelSize::Small => NetworkConfig::small(channels, NUM_JOINTS),
        ModelSize::Big => NetworkConfig::big(channels, NUM_JOINTS),
    };
    NetworkConfig {
        fc_widths: fc,
        banks,
        ..base
    }
}

pub fn train_cmd(a: &TrainArgs, argv: &[String]) -> CmdResult {
    if a.epochs == 0 {
        return Err(Failure::usage("--epochs must be positive"));
    }
    let fs = FeatureSet::open(&a.features)?;
    ensure_disjoint(&a.out, &a.features)?;
    ensure_disjoint(&a.out, &fs.index.dataset)?;
    let net = network_config(
        a.model,
        fs.index.feature.kind.channels(),
        fc_widths(&a.fc)?,
        a.banks,
    );
    net.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        lr_decay_every: a.lr_decay_every,
        target_sigma: a.sigma,
        sigma_units: match a.sigma_units {
            Units::Pixels => SigmaUnits::InputPixels,
            Units::Cells => SigmaUnits::GridCells,
        },
        crop_cells: (a.crop > 0).then_some(a.crop),
        seed: a.seed,
        checkpoint: None,
        threads: par::threads(),
        ..TrainConfig::default()
    };
    let mut run = Run::start(&a.out, "train", argv, a, Some(a.seed))?;
    run.phase("load");
    let data = fs.load(Split::Train, a.limit)?;
    if data.is_empty() {
        return Err(Failure::usage("no training samples"));
    }
    let meta = ModelMeta {
        feature: fs.index.feature,
        flow: fs.index.flow.clone(),
        train: cfg.clone(),
    };
    run.phase("masks");
    let anns: Vec<_> = data.iter().map(|s| s.annotation.clone()).collect();
    let masks = build_masks(&anns, a.mask_bin, a.mask_blur)?;
    masks.save(&run.path(MASKS_FILE))?;
    run.artifact(MASKS_FILE);
    run.artifact("masks.txt");

    run.phase("train");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let mut params: ModelParams<f32> = ModelParams::build(&net, &mut rng)?;
    let mut state = OptimizerState::new(&params, cfg.lr, cfg.momentum);
    let cfg = TrainConfig {
        checkpoint: Some(run.path(CHECKPOINT_FILE)),
        ..cfg
    };
    let trace = train(
        &mut params,
        &mut state,
        &data,
        &cfg,
        &serde_json::to_value(&meta)?,
        |epoch, loss| println!("epoch {epoch:>3}  loss {loss:.6}"),
    );
    // Keep the loss history of a diverged run next to the diagnostic.
    let trace = match trace {
        Ok(t) => t,
        Err(e) => {
            let _ = run.finish();
            return Err(e.into());
        }
    };
    std::fs::write(run.path("loss.csv"), loss_csv(&trace))?;
    run.artifact(CHECKPOINT_FILE);
    run.artifact("loss.csv");
    run.finish()?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset to compute features from; defaults to the dataset of `--features`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Precomputed feature directory.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Mask response maps around the ground-truth torso.
    #[arg(long, default_value = "on")]
    pub spatial_model: Switch,
    /// Joint masks; defaults to the ones saved beside the checkpoint.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Also write each sample's response maps under `maps/`.
    #[arg(long)]
    pub dump_maps: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn mismatch(msg: impl Into<String>) -> Failure {
    Failure::new(exit::CHECKPOINT, msg)
}

fn load_model(path: &Path) -> CmdResult<(ModelParams<f32>, ModelMeta)> {
    let ck =
        load_checkpoint::<f32>(path).map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    let meta: ModelMeta = serde_json::from_value(ck.meta).map_err(|e| {
        mismatch(format!(
            "{}: checkpoint lacks training metadata: {e}",
            path.display()
        ))
    })?;
    Ok((ck.params, meta))
}

fn inference_samples(a: &InferArgs, meta: &ModelMeta) -> CmdResult<Vec<TrainSample>> {
    match (&a.features, &a.dataset) {
        (Some(dir), _) => {
            let fs = FeatureSet::open(dir)?;
            if fs.index.feature != meta.feature || fs.index.flow != meta.flow {
                return Err(mismatch(format!(
                    "features in {} ({} delta {}) do not match the checkpoint ({} delta {})",
                    dir.display(),
                    fs.index.feature.kind,
                    fs.index.feature.delta,
                    meta.feature.kind,
                    meta.feature.delta
                )));
            }
            fs.load(a.split, a.limit)
        }
        (None, Some(root)) => {
            let ds = load_dataset(root)?;
            let chosen: Vec<_> = ds
                .split(a.split)
                .into_iter()
                .take(a.limit.unwrap_or(usize::MAX))
                .collect();
            let flow = FlowParams::from(&meta.flow);
            let parts = par::map(&chosen, |s| load_features(&ds, &[*s], &meta.feature, &flow));
            let mut out = Vec::with_capacity(chosen.len());
            for p in parts {
                out.extend(p?);
            }
            Ok(out)
        }
        (None, None) => Err(Failure::usage("one of --features or --dataset is required")),
    }
}

pub fn infer_cmd(a: &InferArgs, argv: &[String]) -> CmdResult {
    for input in [Some(&a.ckpt), a.dataset.as_ref(), a.features.as_ref()]
        .into_iter()
        .flatten()
    {
        ensure_disjoint(&a.out, input)?;
    }
    let (params, meta) = load_model(&a.ckpt)?;
    let net = params.config();
    if net.input_channels != meta.feature.kind.channels() {
        return Err(mismatch(format!(
            "network takes {} channels but {} features have {}",
            net.input_channels,
            meta.feature.kind,
            meta.feature.kind.channels()
        )));
    }
    let masks = if a.spatial_model.on() {
        let p = a
            .masks
            .clone()
            .unwrap_or_else(|| a.ckpt.parent().unwrap_or(Path::new(".")).join(MASKS_FILE));
        let m = JointMasks::load(&p).map_err(|e| mismatch(format!("joint masks: {e}")))?;
        if m.joints() != net.joints {
            return Err(mismatch(format!(
                "masks have {} joints, network {}",
                m.joints(),
                net.joints
            )));
        }
        Some(m)
    } else {
        None
    };
    let mut run = Run::start(&a.out, "infer", argv, a, None)?;
    run.phase("features");
    let samples = inference_samples(a, &meta)?;
    run.phase("infer");
    let norm = meta.train.normalization;
    let results = par::map(&samples, |s| {
        predict_sample(&params, s, &norm, masks.as_ref())
    });
    let mut preds = PredictionFile::new();
    let mut grids = BTreeMap::new();
    let mut low = 0;
    if a.dump_maps {
        std::fs::create_dir_all(run.path("maps"))?;
    }
    for (s, r) in samples.iter().zip(results) {
        let (p, maps) = r?;
        low += p.low_confidence.iter().filter(|&&l| l).count();
        preds.insert(s.clip_id.clone(), prediction_entry(&p)?);
        if a.dump_maps {
            let rel = format!("maps/{}.f32p", s.clip_id);
            Image::from_tensor(&maps.maps)?.write_f32p(&run.path(&rel))?;
            run.artifact(rel);
            let g = maps.grid;
            grids.insert(s.clip_id.clone(), [g.stride as f64, g.origin_y, g.origin_x]);
        }
    }
    write_predictions(&run.path("predictions.json"), &preds)?;
    run.artifact("predictions.json");
    if a.dump_maps {
        // stride, origin_y, origin_x: cell (y, x) is centred at
        // (origin_y + stride*y, origin_x + stride*x).
        std::fs::write(
            run.path("maps/grid.json"),
            serde_json::to_string_pretty(&grids)?,
        )?;
        run.artifact("maps/grid.json");
    }
    run.finish()?;
    println!(
        "{} predictions, {} low-confidence joints, spatial model {}",
        preds.len(),
        low,
        if a.spatial_model.on() { "on" } else { "off" }
    );
    Ok(())
}
