//! Dataset-level glue: feature stacks per sample, batch prediction and the
//! predictions file format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::annotation::{Point, JOINT_NAMES};
use crate::convnet::{ModelParams, ResponseMaps};
use crate::datagen::{DatasetIndex, Sample};
use crate::error::{Error, Result};
use crate::image_ops::{Image, NormalizationParams};
use crate::motion::{make_feature, FeatureKind, FeatureStack, FlowParams, MotionFeatureConfig};
use crate::pipeline::infer;
use crate::scalar::Scalar;
use crate::spatial::{apply_masks, predict_joints, JointMasks, Prediction};
use crate::training::TrainSample;

/// Feature stack of one dataset sample: frame 0 against frame `delta`.
pub fn sample_features(
    ds: &DatasetIndex,
    sample: &Sample,
    feat: &MotionFeatureConfig,
    flow: &FlowParams,
) -> Result<FeatureStack> {
    if feat.delta <= 0 {
        return Err(Error::invalid(format!(
            "datasets store frames after the reference only; delta {} unsupported",
            feat.delta
        )));
    }
    let f0 = ds.frame(sample, 0)?;
    if feat.kind == FeatureKind::Rgb {
        return make_feature(feat, &f0, &f0, flow);
    }
    let fj = ds.frame(sample, feat.delta as usize)?;
    make_feature(feat, &f0, &fj, flow)
}

pub fn train_sample(stack: Image, feat: &MotionFeatureConfig, sample: &Sample) -> TrainSample {
    TrainSample {
        stack,
        kinds: feat.kind.channel_kinds(),
        flow_u: feat.kind.flow_u_channel(),
        annotation: sample.annotation.clone(),
        clip_id: sample.record.id.clone(),
    }
}

/// Feature stacks for `samples`, in order.
pub fn load_features(
    ds: &DatasetIndex,
    samples: &[&Sample],
    feat: &MotionFeatureConfig,
    flow: &FlowParams,
) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(train_sample(
                sample_features(ds, s, feat, flow)?.image,
                feat,
                s,
            ))
        })
        .collect()
}

/// Response maps for a sample and their argmax readout. With `masks`, the
/// maps are masked around the ground-truth torso center first.
pub fn predict_sample<T: Scalar>(
    params: &ModelParams<T>,
    sample: &TrainSample,
    norm: &NormalizationParams,
    masks: Option<&JointMasks>,
) -> Result<(Prediction, ResponseMaps<T>)> {
    let maps = infer(params, &sample.stack, &sample.kinds, norm)?;
    let maps = match masks {
        Some(m) => apply_masks(&maps, sample.annotation.torso_center(), m)?,
        None => maps,
    };
    Ok((predict_joints(&maps), maps))
}

/// Sample id -> joint name -> `[x, y]`.
pub type PredictionFile = BTreeMap<String, BTreeMap<String, Point>>;

pub fn prediction_entry(p: &Prediction) -> Result<BTreeMap<String, Point>> {
    if p.joints.len() != JOINT_NAMES.len() {
        return Err(Error::invalid(format!(
            "prediction has {} joints, expected {}",
            p.joints.len(),
            JOINT_NAMES.len()
        )));
    }
    Ok(JOINT_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(p.joints.iter().copied())
        .collect())
}

pub fn prediction_from_entry(entry: &BTreeMap<String, Point>) -> Result<Prediction> {
    let joints = JOINT_NAMES
        .iter()
        .map(|n| {
            entry
                .get(*n)
                .copied()
                .ok_or_else(|| Error::invalid(format!("prediction lacks joint {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        low_confidence: vec![false; joints.len()],
        joints,
    })
}

pub fn write_predictions(path: &Path, preds: &PredictionFile) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(preds)?).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::NetworkConfig;
    use crate::datagen::{
        generate_dataset, read_dataset, write_dataset, SceneConfig, Split, TextureMode,
    };
    use crate::spatial::build_masks;
    use rand::SeedableRng;

    fn dataset(dir: &Path) -> DatasetIndex {
        let cfg = SceneConfig {
            texture: TextureMode::Plain,
            frames: 4,
            seed: 8,
            ..SceneConfig::default()
        };
        write_dataset(generate_dataset(&cfg, 2, 1, &[0, 1, 3]), dir, 3, &cfg).unwrap();
        read_dataset(dir).unwrap()
    }

    #[test]
    fn features_and_prediction_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(dir.path());
        let train = ds.split(Split::Train);
        let flow = FlowParams {
            iters: 20,
            ..FlowParams::default()
        };
        for kind in FeatureKind::ALL {
            let feat = MotionFeatureConfig::new(kind, 3, false).unwrap();
            let s = load_features(&ds, &train, &feat, &flow).unwrap();
            assert_eq!(s.len(), 2);
            assert_eq!(s[0].stack.channels(), kind.channels());
            assert_eq!(s[1].clip_id, train[1].record.id);
        }
        let back = MotionFeatureConfig::new(FeatureKind::FrameDiff, -1, false).unwrap();
        assert!(load_features(&ds, &train, &back, &flow).is_err());

        let feat = MotionFeatureConfig::new(FeatureKind::FrameDiff, 1, false).unwrap();
        let s = load_features(&ds, &train, &feat, &flow).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let params: ModelParams<f32> =
            ModelParams::build(&NetworkConfig::small(6, 6), &mut rng).unwrap();
        let norm = NormalizationParams::default();
        let (p, maps) = predict_sample(&params, &s[0], &norm, None).unwrap();
        assert_eq!(maps.maps.shape(), &[6, 45, 60]);
        let masks = build_masks(&[s[1].annotation.clone()], 4, 12.0).unwrap();
        let (pm, masked) = predict_sample(&params, &s[0], &norm, Some(&masks)).unwrap();
        assert!(masked.maps.data().iter().all(|&v| v >= 0.0));
        assert_eq!(p.joints.len(), pm.joints.len());
    }

    #[test]
    fn prediction_file_round_trip() {
        let p = Prediction {
            joints: (0..6).map(|i| [i as f64 * 1.1, 0.3]).collect(),
            low_confidence: vec![false; 6],
        };
        let mut file = PredictionFile::new();
        file.insert("c00001".into(), prediction_entry(&p).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_predictions(&path, &file).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(prediction_from_entry(&back["c00001"]).unwrap(), p);
        let mut partial = back["c00001"].clone();
        partial.remove("r_wrist");
        assert!(prediction_from_entry(&partial).is_err());
    }

    #[test]
    fn masks_are_neutral_on_unambiguous_single_person_maps() {
        use crate::convnet::GridMeta;
        use crate::datagen::render_clip;
        use crate::spatial::predict_joints;
        use crate::tensor::Tensor;
        use rand::Rng;

        let cfg = SceneConfig::default();
        let ann = |i| render_clip(&cfg, i, &[0]).unwrap().annotations.remove(0);
        let train: Vec<_> = (0..400).map(ann).collect();
        let masks = build_masks(&train, 4, 12.0).unwrap();
        let grid = GridMeta {
            stride: 4,
            origin_y: 2.0,
            origin_x: 2.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (mut same, mut total) = (0, 0);
        for i in 400..440 {
            let a = ann(i);
            let maps = Tensor::from_fn(&[6, 45, 60], |k| {
                let (j, y, x) = (k / 2700, (k / 60) % 45, k % 60);
                let (cy, cx) = grid.cell_center(y, x);
                let bump = a.joints[j].map_or(0.0, |[px, py]| {
                    (-((cx - px).powi(2) + (cy - py).powi(2)) / 32.0).exp()
                });
                (bump + 0.05 * rng.gen::<f64>()) as f32
            });
            let r = ResponseMaps { maps, grid };
            let plain = predict_joints(&r);
            let masked = predict_joints(&apply_masks(&r, a.torso_center(), &masks).unwrap());
            for j in 0..6 {
                if a.joints[j].is_some() {
                    total += 1;
                    let d = (plain.joints[j][0] - masked.joints[j][0])
                        .hypot(plain.joints[j][1] - masked.joints[j][1]);
                    // The mask's slope can move a broad peak to a neighbouring cell.
                    assert!(
                        d <= 4.0 * 2f64.sqrt() + 1e-9,
                        "joint {j} of sample {i} moved {d}"
                    );
                    same += (d <= 4.0) as usize;
                }
            }
        }
        assert!(same as f64 >= 0.95 * total as f64, "{same}/{total}");
    }
}
