//! Detection-phase training and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bcpc::BcpcModel;
use crate::data::{Level, Ratio, SegmentSet};
use crate::error::{Error, Result};
use crate::metrics::{self, Confusion, MetricsReport, RunMeta};
use crate::model::{level_labels, slice_labels, Ablation, Detector, Features, ModelConfig};
use crate::params::{cosine_lr, Adam, AdamConfig, Binder, Params};
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Segments per contiguous training window (`|S|`).
    pub window_len: usize,
    /// Windows per optimizer step.
    pub batch_windows: usize,
    pub optimizer: AdamConfig,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Train only the projection, diffusion and discriminator.
    pub freeze_encoder: bool,
    /// Stop after this many epochs without a better validation score; 0 never stops early.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            window_len: 16,
            batch_windows: 4,
            optimizer: AdamConfig::default(),
            lr_floor: 0.05,
            seed: 0,
            ablation: Ablation::default(),
            freeze_encoder: false,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.batch_windows == 0 {
            return Err(Error::InvalidConfig("window_len and batch_windows must be positive".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::InvalidConfig("learning rate must be positive and lr_floor in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Joint loss per segment, averaged over the epoch.
    pub train_loss: f64,
    pub valid_f2: f64,
    pub valid_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint by validation channel F2 (AUC breaks ties).
    pub detector: Detector,
    pub curve: Vec<EpochLog>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    /// Set when training stopped on a non-finite loss; `detector` is then
    /// the last good state.
    pub diverged: Option<String>,
}

/// Channel-level F2 (percent) and AUC over every validation item.
pub fn validation_score(det: &Detector, features: &Features, labels: &Mat, window: usize) -> Result<(f64, Option<f64>)> {
    let probs = det.predict(features, window)?;
    let scores: Vec<f64> = probs[0].iter().copied().collect();
    let ys: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
    let c = Confusion::from_scores(&scores, &ys);
    let f2 = 100.0 * metrics::f_beta(c.precision(), c.recall(), 2.0);
    Ok((f2, metrics::auc(&scores, &ys).ok()))
}

fn better(a: (f64, Option<f64>), b: (f64, Option<f64>)) -> bool {
    let key = |s: (f64, Option<f64>)| (s.0, s.1.unwrap_or(0.0));
    let (ka, kb) = (key(a), key(b));
    ka.0 > kb.0 || (ka.0 == kb.0 && ka.1 > kb.1)
}

pub fn train(
    pretrained: &BcpcModel,
    train_set: &SegmentSet,
    valid_set: &SegmentSet,
    model: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::DataValidation("training and validation sets must be non-empty".into()));
    }
    let mut det = Detector::new(pretrained, train_set.channel_map().clone(), model, config.ablation, config.seed)?;
    det.check_segments(train_set)?;
    det.check_segments(valid_set)?;
    det.freeze_encoder(config.freeze_encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11);

    let c = det.n_channels();
    let n = train_set.len();
    let win = config.window_len.min(n);
    let train_features = det.features(train_set, config.freeze_encoder)?;
    let valid_features = det.features(valid_set, true)?;
    let train_labels = level_labels(train_set);
    let valid_channel = level_labels(valid_set)[0].clone();

    let windows_per_epoch = n / win;
    let steps_per_epoch = windows_per_epoch.div_ceil(config.batch_windows);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(config.optimizer);
    let mut step = 0;
    let mut curve = Vec::new();
    let mut best: Option<((f64, Option<f64>), Params, usize)> = None;
    let mut diverged = None;
    let mut stale = 0;

    'epochs: for epoch in 1..=config.epochs {
        let offset = if n > win { rng.random_range(0..=(n - win * windows_per_epoch)) } else { 0 };
        let mut starts: Vec<usize> = (0..windows_per_epoch).map(|k| offset + k * win).collect();
        starts.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_segments = 0usize;
        for batch in starts.chunks(config.batch_windows) {
            step += 1;
            let mut tape = Tape::new();
            let mut binder = Binder::new(&det.params);
            let mut total = None;
            for &s in batch {
                let f = train_features.slice(s * c, (s + win) * c);
                let l = slice_labels(&train_labels, s, s + win);
                let v = det.window_loss(&mut tape, &mut binder, &f, [&l[0], &l[1], &l[2]])?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, v),
                    None => v,
                });
            }
            let segments = batch.len() * win;
            let loss = tape.scale(total.expect("non-empty batch"), 1.0 / segments as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                diverged = Some(format!("non-finite loss {value} at step {step} (epoch {epoch})"));
                break 'epochs;
            }
            let mut grads = tape.backward(loss);
            let grads = binder.collect(&mut grads);
            let backup = det.params.clone();
            let lr = cosine_lr(config.optimizer.learning_rate, step - 1, total_steps, config.lr_floor);
            adam.step(&mut det.params, &grads, lr);
            if !det.params.all_finite() {
                det.params = backup;
                diverged = Some(format!("non-finite parameters after step {step} (epoch {epoch})"));
                break 'epochs;
            }
            epoch_loss += value * segments as f64;
            epoch_segments += segments;
        }
        let score = validation_score(&det, &valid_features_for(&det, valid_set, &valid_features, config)?, &valid_channel, win)?;
        curve.push(EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_segments.max(1) as f64,
            valid_f2: score.0,
            valid_auc: score.1,
        });
        if best.as_ref().is_none_or(|(b, _, _)| better(score, *b)) {
            best = Some((score, det.params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, params, epoch)) => {
            det.params = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome {
        detector: det,
        curve,
        best_epoch,
        diverged,
    })
}

fn valid_features_for(det: &Detector, set: &SegmentSet, cached: &Features, config: &TrainConfig) -> Result<Features> {
    if config.freeze_encoder {
        Ok(cached.clone())
    } else {
        det.features(set, true)
    }
}

/// Probabilities for every segment of `set`, `S × nodes` per level.
pub fn predict_set(det: &Detector, set: &SegmentSet, window: usize) -> Result<[Mat; 3]> {
    let f = det.features(set, true)?;
    det.predict(&f, window)
}

/// Short stable digest of any serializable configuration.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Ratio-stratified report over `set`.
pub fn evaluate(det: &Detector, set: &SegmentSet, ratios: &[Ratio], window: usize, seed: u64, config_hash: String) -> Result<MetricsReport> {
    if ratios.is_empty() {
        return Err(Error::InvalidConfig("no evaluation ratios".into()));
    }
    let probs = predict_set(det, set, window)?;
    let labels = Level::ALL.map(|l| set.labels(l));
    let entries = metrics::evaluate_scores(&probs, &labels, ratios, seed)?;
    Ok(MetricsReport {
        meta: RunMeta {
            seed,
            config_hash,
            ablation: det.ablation.to_string(),
            averaging: "pooled over the run's sampled items".into(),
        },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcpc::BcpcConfig;
    use crate::data::{segment, SegmentationConfig};
    use crate::synth::{generate, ScenarioConfig};

    fn tiny_bcpc() -> BcpcConfig {
        BcpcConfig {
            local_window: 4,
            n_positions: 8,
            conv_kernels: vec![2, 2],
            conv_channels: vec![3],
            d_local: 4,
            d_context: 4,
            d_repr: 4,
            horizon: 2,
            n_negatives: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 6,
        }
    }

    fn sets() -> (SegmentSet, SegmentSet) {
        let cfg = ScenarioConfig {
            n_channels: 4,
            n_regions: 2,
            planted_graph: crate::synth::chain_graph(4, 0.9, 0.0),
            event_rate: 900.0,
            duration_seconds: 60.0,
            sample_rate: 64.0,
            seed: 1,
            ..Default::default()
        };
        let (rec, _) = generate(&cfg).unwrap();
        let seg = segment(&rec, SegmentationConfig { window_k: 32, stride_l: 16 }).unwrap();
        let n = seg.len();
        (seg.slice(0..n * 3 / 4).unwrap(), seg.slice(n * 3 / 4..n).unwrap())
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (tr, va) = sets();
        let bcpc = BcpcModel::init(tiny_bcpc(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&bcpc, &tr, &va, ModelConfig::default(), &cfg).unwrap();
        let init = Detector::new(&bcpc, tr.channel_map().clone(), ModelConfig::default(), Ablation::default(), 0).unwrap();
        assert_eq!(out.detector.params, init.params);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_logs_epochs() {
        let (tr, va) = sets();
        let bcpc = BcpcModel::init(tiny_bcpc(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            window_len: 8,
            seed: 3,
            ..Default::default()
        };
        let a = train(&bcpc, &tr, &va, ModelConfig::default(), &cfg).unwrap();
        let b = train(&bcpc, &tr, &va, ModelConfig::default(), &cfg).unwrap();
        assert_eq!(a.detector.params, b.detector.params);
        assert_eq!(a.curve.len(), 2);
        assert!(a.curve.iter().all(|e| e.train_loss.is_finite()));
        assert!(a.diverged.is_none());
    }

    #[test]
    fn frozen_encoder_stays_put() {
        let (tr, va) = sets();
        let bcpc = BcpcModel::init(tiny_bcpc(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            window_len: 8,
            freeze_encoder: true,
            ..Default::default()
        };
        let out = train(&bcpc, &tr, &va, ModelConfig::default(), &cfg).unwrap();
        for id in out.detector.bcpc.backbone_ids() {
            assert_eq!(out.detector.params.get(id), bcpc.params.get(id));
        }
    }

    #[test]
    fn every_ablation_yields_a_report() {
        let (tr, va) = sets();
        let bcpc = BcpcModel::init(tiny_bcpc(), 0).unwrap();
        for ablation in Ablation::all_combinations() {
            let cfg = TrainConfig {
                epochs: 1,
                window_len: 8,
                ablation,
                freeze_encoder: true,
                ..Default::default()
            };
            let out = train(&bcpc, &tr, &va, ModelConfig::default(), &cfg).unwrap();
            let report = evaluate(&out.detector, &va, &[Ratio::one_to(5)], 8, 0, "x".into()).unwrap();
            assert_eq!(report.entries.len(), 3);
            assert_eq!(report.meta.ablation, ablation.to_string());
            assert!(report.is_consistent());
        }
    }

    #[test]
    fn mismatched_map_rejected() {
        let (tr, va) = sets();
        let bcpc = BcpcModel::init(tiny_bcpc(), 0).unwrap();
        let out = train(&bcpc, &tr, &va, ModelConfig::default(), &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        let mut det = out.detector;
        det.channel_map = crate::data::ChannelMap::contiguous(4, 1).unwrap();
        let err = evaluate(&det, &va, &Ratio::defaults(), 8, 0, String::new()).unwrap_err();
        assert!(matches!(err, Error::Mapping(_)));
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&TrainConfig::default()).unwrap();
        assert_eq!(a, config_hash(&TrainConfig::default()).unwrap());
        assert_ne!(a, config_hash(&TrainConfig { seed: 1, ..Default::default() }).unwrap());
        assert_eq!(a.len(), 16);
    }
}
