use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentParams, TrainSample};
use super::checkpoint::save_checkpoint;
use super::optim::{lookahead, sgd_nesterov_step, OptimizerState};
use super::target::{make_target, mse_loss};
use crate::convnet::{backward, forward_with_tape, ModelParams};
use crate::error::{Error, Result};
use crate::image_ops::NormalizationParams;
use crate::pipeline::prepare_input;
use crate::scalar::Scalar;

/// Units of the target Gaussian's standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaUnits {
    InputPixels,
    GridCells,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub target_sigma: f64,
    pub sigma_units: SigmaUnits,
    /// Side of the random output-cell window trained per sample; `None`
    /// trains on the whole image.
    pub crop_cells: Option<usize>,
    pub augment: AugmentParams,
    pub normalization: NormalizationParams,
    pub seed: u64,
    /// Rewritten after every epoch when set.
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for per-sample gradients; 0 uses every core. Results
    /// do not depend on it.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            lr_decay_every: 20,
            lr_decay: 0.5,
            target_sigma: 1.0,
            sigma_units: SigmaUnits::InputPixels,
            crop_cells: Some(24),
            augment: AugmentParams::default(),
            normalization: NormalizationParams::default(),
            seed: 0,
            checkpoint: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 {
            0
        } else {
            epoch / self.lr_decay_every
        };
        self.lr * self.lr_decay.powi(steps as i32)
    }

    pub fn sigma_px(&self, stride: usize) -> f64 {
        match self.sigma_units {
            SigmaUnits::InputPixels => self.target_sigma,
            SigmaUnits::GridCells => self.target_sigma * stride as f64,
        }
    }
}

/// Picks a `side`-cell window along one axis of `cells`, containing `focus`
/// when given.
fn pick_window(rng: &mut impl Rng, cells: usize, side: usize, focus: Option<usize>) -> usize {
    if side >= cells {
        return 0;
    }
    let last = cells - side;
    match focus {
        Some(f) => {
            let lo = (f + 1).saturating_sub(side).min(last);
            let hi = f.min(last);
            rng.gen_range(lo..=hi)
        }
        None => rng.gen_range(0..=last),
    }
}

/// Loss and parameter gradient for one (already augmented) sample.
pub fn sample_gradient<T: Scalar>(
    params: &ModelParams<T>,
    sample: &TrainSample,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(f64, ModelParams<T>)> {
    let net = params.config();
    let input = prepare_input::<T>(&sample.stack, &sample.kinds, net, &cfg.normalization)?;
    let (rows, cols) = (input.padding.rows, input.padding.cols);
    let (h, w) = match cfg.crop_cells {
        Some(c) => (c.min(rows), c.min(cols)),
        None => (rows, cols),
    };
    let full_grid = input.grid(net);
    // Centre the window on a random visible joint half of the time.
    let visible: Vec<_> = sample.annotation.joints.iter().flatten().collect();
    let focus = if !visible.is_empty() && rng.gen_bool(0.5) {
        let [x, y] = *visible[rng.gen_range(0..visible.len())];
        let s = full_grid.stride as f64;
        let cy = ((y - full_grid.origin_y) / s)
            .round()
            .clamp(0.0, (rows - 1) as f64) as usize;
        let cx = ((x - full_grid.origin_x) / s)
            .round()
            .clamp(0.0, (cols - 1) as f64) as usize;
        Some((cy, cx))
    } else {
        None
    };
    let y0 = pick_window(rng, rows, h, focus.map(|f| f.0));
    let x0 = pick_window(rng, cols, w, focus.map(|f| f.1));
    let (pyr, grid) = input.crop_cells(net, y0, x0, h, w)?;
    let (out, tape) = forward_with_tape(params, &pyr)?;
    let target = make_target::<T>(
        &sample.annotation.joints,
        &grid,
        h,
        w,
        cfg.sigma_px(net.stride_out()),
    )?;
    let (loss, g) = mse_loss(&out.maps, &target)?;
    Ok((loss, backward(params, &tape, &g)?))
}

fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Augmented-sample losses and gradients for one batch, in batch order. Each
/// sample draws from its own seeded generator, so the result is the same for
/// any thread count.
fn batch_gradients<T: Scalar>(
    look: &ModelParams<T>,
    data: &[TrainSample],
    batch: &[usize],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Vec<Result<(f64, ModelParams<T>)>> {
    let one = |i: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = augment(&data[i], &mut rng, &cfg.augment);
        sample_gradient(look, &sample, cfg, &mut rng)
    };
    let jobs: Vec<(usize, u64)> = batch.iter().copied().zip(seeds.iter().copied()).collect();
    let threads = worker_count(cfg.threads).min(jobs.len());
    if threads <= 1 {
        return jobs.into_iter().map(|(i, s)| one(i, s)).collect();
    }
    let one = &one;
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(jobs.len().div_ceil(threads))
            .map(|c| scope.spawn(move || c.iter().map(|&(i, s)| one(i, s)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

/// Shuffled mini-batch Nesterov SGD with per-epoch augmentation. Returns the
/// mean training loss of each epoch.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut OptimizerState<T>,
    data: &[TrainSample],
    cfg: &TrainConfig,
    meta: &serde_json::Value,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let look = lookahead(params, state)?;
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let mut grads = params.zeros_like();
            for (&i, r) in batch
                .iter()
                .zip(batch_gradients(&look, data, batch, &seeds, cfg))
            {
                let (loss, g) = r.map_err(|e| match e {
                    Error::Numeric(detail) => Error::Divergence { epoch, detail },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("loss {loss} on sample {}", data[i].clip_id),
                    });
                }
                total += loss;
                grads.add_assign(&g)?;
            }
            grads.scale(T::of(1.0 / batch.len() as f64));
            if !grads.max_abs().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            sgd_nesterov_step(params, &grads, state)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !params.max_abs().is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("mean loss {mean}"),
            });
        }
        trace.push(mean);
        on_epoch(epoch, mean);
        if let Some(path) = &cfg.checkpoint {
            save_checkpoint(path, params, Some(state), epoch + 1, meta)?;
        }
    }
    Ok(trace)
}

/// Mean loss over `data` without augmentation, on full images.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let full = TrainConfig {
        crop_cells: None,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for s in data {
        total += sample_gradient(params, s, &full, &mut rng)?.0;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Training trace as `epoch,loss` CSV.
pub fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l:e}\n", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Annotation;
    use crate::convnet::NetworkConfig;
    use crate::image_ops::{ChannelKind, Image};
    use crate::training::AugmentParams;

    fn setup() -> (ModelParams<f32>, Vec<TrainSample>) {
        let cfg = NetworkConfig {
            conv_features: 4,
            banks: 2,
            joints: 6,
            fc_widths: [8, 8],
            input_channels: 4,
            ..NetworkConfig::default()
        };
        let params = ModelParams::build(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = Image::from_fn(48, 56, 4, |_, _, _| rng.gen());
        let sample = TrainSample {
            stack,
            kinds: vec![
                ChannelKind::Appearance,
                ChannelKind::Appearance,
                ChannelKind::Appearance,
                ChannelKind::Motion,
            ],
            flow_u: None,
            annotation: Annotation {
                joints: [
                    Some([10.0, 10.0]),
                    Some([14.0, 20.0]),
                    Some([18.0, 30.0]),
                    Some([40.0, 10.0]),
                    Some([44.0, 20.0]),
                    None,
                ],
                neck: [25.0, 5.0],
                hip: [25.0, 40.0],
            },
            clip_id: "c".into(),
        };
        (params, vec![sample])
    }

    fn quiet(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr,
            augment: AugmentParams::none(),
            crop_cells: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_on_one_sample_reduces_loss() {
        let (mut p, data) = setup();
        let cfg = quiet(0.05, 1);
        let before = evaluate_loss(&p, &data, &cfg).unwrap();
        let mut s = OptimizerState::new(&p, cfg.lr, cfg.momentum);
        train(
            &mut p,
            &mut s,
            &data,
            &cfg,
            &serde_json::Value::Null,
            |_, _| {},
        )
        .unwrap();
        let after = evaluate_loss(&p, &data, &cfg).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (p0, data) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            crop_cells: Some(6),
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = p0.clone();
            let mut s = OptimizerState::new(&p, cfg.lr, cfg.momentum);
            let t = train(
                &mut p,
                &mut s,
                &data,
                &cfg,
                &serde_json::Value::Null,
                |_, _| {},
            )
            .unwrap();
            (t, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(pa, pb);
        assert_eq!(loss_csv(&a).lines().count(), 3);

        let threaded = TrainConfig {
            threads: 3,
            ..cfg.clone()
        };
        let mut p = p0.clone();
        let mut s = OptimizerState::new(&p, cfg.lr, cfg.momentum);
        let big: Vec<_> = (0..5).map(|_| data[0].clone()).collect();
        let t3 = train(
            &mut p,
            &mut s,
            &big,
            &threaded,
            &serde_json::Value::Null,
            |_, _| {},
        )
        .unwrap();
        let mut q = p0.clone();
        let mut s = OptimizerState::new(&q, cfg.lr, cfg.momentum);
        let t1 = train(
            &mut q,
            &mut s,
            &big,
            &TrainConfig {
                threads: 1,
                ..cfg.clone()
            },
            &serde_json::Value::Null,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(t1, t3);
        assert_eq!(p, q);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut p, data) = setup();
        let cfg = quiet(1e30, 2);
        let mut s = OptimizerState::new(&p, cfg.lr, cfg.momentum);
        let r = train(
            &mut p,
            &mut s,
            &data,
            &cfg,
            &serde_json::Value::Null,
            |_, _| {},
        );
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
        assert!(train(
            &mut p,
            &mut s,
            &[],
            &cfg,
            &serde_json::Value::Null,
            |_, _| {}
        )
        .is_err());
    }

    #[test]
    fn lr_schedule_halves() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(19), 0.01);
        assert_eq!(c.lr_at(20), 0.005);
        assert_eq!(c.lr_at(45), 0.0025);
    }

    #[test]
    fn window_contains_focus() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let f = rng.gen_range(0..45);
            let y0 = pick_window(&mut rng, 45, 24, Some(f));
            assert!(y0 <= f && f < y0 + 24 && y0 + 24 <= 45);
        }
        assert_eq!(pick_window(&mut rng, 10, 24, None), 0);
    }
}
