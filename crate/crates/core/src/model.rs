//! The assembled detector: BCPC representations, forward and reverse graph
//! diffusion at each level, and the shared discriminator.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bcpc::{BcpcModel, BcpcNet};
use crate::data::{ChannelMap, Level, SegmentSet};
use crate::error::{Error, Result};
use crate::graph::{DiffusionConfig, Direction, GraphDiffusion, SequenceOutput, StepSwitches};
use crate::hierarchy::{self, Discriminator, LevelWeights, BCE_EPS};
use crate::params::{Binder, Params};
use crate::tape::{Mat, Tape, Var};

/// Components removed for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Encoder starts from random weights instead of the pretrained ones.
    pub no_bcpc: bool,
    /// Discriminator sees only `r`; the diffusion slots are zero.
    pub no_graph: bool,
    pub no_inner: bool,
    pub no_cross: bool,
    /// Only the channel loss is trained; region and patient scores are the
    /// max over their channels' scores.
    pub no_hierarchy: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 5] = ["no_bcpc", "no_graph", "no_inner", "no_cross", "no_hierarchy"];

    pub fn set(&mut self, flag: &str) -> Result<()> {
        let slot = match flag.trim() {
            "no_bcpc" => &mut self.no_bcpc,
            "no_graph" => &mut self.no_graph,
            "no_inner" => &mut self.no_inner,
            "no_cross" => &mut self.no_cross,
            "no_hierarchy" => &mut self.no_hierarchy,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::FLAGS.join(", ")
                )))
            }
        };
        *slot = true;
        Ok(())
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let on = [self.no_bcpc, self.no_graph, self.no_inner, self.no_cross, self.no_hierarchy];
        Self::FLAGS.iter().zip(on).filter(|(_, b)| *b).map(|(f, _)| *f).collect()
    }

    /// Every one of the 32 flag combinations.
    pub fn all_combinations() -> Vec<Ablation> {
        (0..32u8)
            .map(|m| Ablation {
                no_bcpc: m & 1 != 0,
                no_graph: m & 2 != 0,
                no_inner: m & 4 != 0,
                no_cross: m & 8 != 0,
                no_hierarchy: m & 16 != 0,
            })
            .collect()
    }

    fn switches(&self) -> StepSwitches {
        StepSwitches {
            cross: !self.no_cross,
            inner: !self.no_inner,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = self.flags();
        if flags.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&flags.join("+"))
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma- or plus-separated flags; `full` or empty for none.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty() && *p != "full") {
            a.set(part)?;
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub diffusion: DiffusionConfig,
    pub discriminator_hidden: usize,
    pub level_weights: LevelWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionConfig::default(),
            discriminator_hidden: 64,
            level_weights: LevelWeights::default(),
        }
    }
}

/// Per-channel segment inputs, segment-major (`row = s·C + c`).
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// Raw samples, `segment_len` columns.
    Raw(Mat),
    /// Mean-pooled BCPC contexts, `d_context` columns.
    Pooled(Mat),
}

impl Features {
    pub fn rows(&self) -> usize {
        match self {
            Features::Raw(m) | Features::Pooled(m) => m.nrows(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Features {
        match self {
            Features::Raw(m) => Features::Raw(m.slice(s![start..end, ..]).to_owned()),
            Features::Pooled(m) => Features::Pooled(m.slice(s![start..end, ..]).to_owned()),
        }
    }
}

/// `S × C × k` segment samples as `S·C × k` rows.
pub fn raw_rows(data: &Array3<f32>) -> Mat {
    let (n_s, n_c, k) = data.dim();
    Mat::from_shape_fn((n_s * n_c, k), |(r, j)| data[[r / n_c, r % n_c, j]] as f64)
}

/// Outputs of one level over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    /// `S × nodes`.
    pub probs: Mat,
    pub forward: Option<SequenceOutput>,
    pub reverse: Option<SequenceOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub channel_map: ChannelMap,
    pub params: Params,
    pub bcpc: BcpcNet,
    pub diffusion: GraphDiffusion,
    pub discriminator: Discriminator,
}

impl Detector {
    /// Fresh detector on top of `pretrained` (or a random encoder of the
    /// same shape under `no_bcpc`).
    pub fn new(pretrained: &BcpcModel, map: ChannelMap, config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = if ablation.no_bcpc {
            BcpcModel::init(pretrained.net.config.clone(), seed ^ 0x5eed_b0c0)?
        } else {
            pretrained.clone()
        };
        let mut params = base.params;
        let d = base.net.config.d_repr;
        let diffusion = GraphDiffusion::init(&mut params, d, &config.diffusion, ablation.switches(), &mut rng)?;
        let discriminator = Discriminator::init(&mut params, d, config.discriminator_hidden, &mut rng);
        Ok(Self {
            config,
            ablation,
            channel_map: map,
            params,
            bcpc: base.net,
            diffusion,
            discriminator,
        })
    }

    /// Rebuild handles from stored parameters.
    pub fn assemble(params: Params, bcpc: crate::bcpc::BcpcConfig, map: ChannelMap, config: ModelConfig, ablation: Ablation) -> Result<Self> {
        let net = BcpcNet::attach(&params, bcpc)?;
        let diffusion = GraphDiffusion::attach(&params, &config.diffusion, ablation.switches())?;
        let discriminator = Discriminator::attach(&params)?;
        Ok(Self {
            config,
            ablation,
            channel_map: map,
            params,
            bcpc: net,
            diffusion,
            discriminator,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channel_map.n_channels()
    }

    /// Freeze the encoder and autoregressor; the projection stays trainable.
    pub fn freeze_encoder(&mut self, frozen: bool) {
        for id in self.bcpc.backbone_ids() {
            self.params.set_frozen(id, frozen);
        }
    }

    pub fn check_segments(&self, set: &SegmentSet) -> Result<()> {
        if set.channel_map() != &self.channel_map {
            return Err(Error::Mapping("segments use a different channel map than the model".into()));
        }
        if set.config().window_k != self.bcpc.config.segment_len() {
            return Err(Error::Shape(format!(
                "segments have {} points, encoder expects {}",
                set.config().window_k,
                self.bcpc.config.segment_len()
            )));
        }
        Ok(())
    }

    /// Inputs for `set`: pooled contexts when the encoder is frozen, raw rows
    /// otherwise.
    pub fn features(&self, set: &SegmentSet, pooled: bool) -> Result<Features> {
        self.check_segments(set)?;
        let raw = raw_rows(set.data());
        Ok(if pooled {
            Features::Pooled(self.bcpc.pooled_contexts(&self.params, &raw)?)
        } else {
            Features::Raw(raw)
        })
    }

    /// Channel representations `r` (`rows × d`).
    pub fn representations(&self, features: &Features) -> Result<Mat> {
        match features {
            Features::Raw(m) => self.bcpc.represent_raw(&self.params, m),
            Features::Pooled(m) => {
                let (w, b) = self.bcpc.projection();
                if m.ncols() != self.params.get(w).nrows() {
                    return Err(Error::Shape(format!("pooled features have {} columns", m.ncols())));
                }
                Ok(m.dot(self.params.get(w)) + self.params.get(b))
            }
        }
    }

    fn level_reps(&self, channel: &Mat, level: Level) -> Result<Mat> {
        match level {
            Level::Channel => Ok(channel.clone()),
            Level::Region => hierarchy::pool_to_region(channel, &self.channel_map),
            Level::Patient => hierarchy::pool_to_patient(&hierarchy::pool_to_region(channel, &self.channel_map)?),
        }
    }

    /// Plain forward pass over a contiguous window of `S` segments given
    /// their channel representations (`S·C × d`). Outputs are indexed
    /// channel, region, patient.
    pub fn forward_window(&self, reps: &Mat, keep_graphs: bool) -> Result<[LevelOutput; 3]> {
        let c = self.n_channels();
        if reps.nrows() % c != 0 || reps.nrows() == 0 {
            return Err(Error::Shape(format!("{} representation rows for {c} channels", reps.nrows())));
        }
        let n_s = reps.nrows() / c;
        let channel: Vec<Mat> = (0..n_s).map(|t| reps.slice(s![t * c..(t + 1) * c, ..]).to_owned()).collect();
        let mut outs = Vec::with_capacity(3);
        for level in Level::ALL {
            if self.ablation.no_hierarchy && level != Level::Channel {
                let ch: &LevelOutput = &outs[0];
                let groups = match level {
                    Level::Region => self.channel_map.groups(),
                    _ => vec![(0..c).collect()],
                };
                let probs = Mat::from_shape_fn((n_s, groups.len()), |(t, g)| {
                    groups[g].iter().map(|&m| ch.probs[[t, m]]).fold(f64::NEG_INFINITY, f64::max)
                });
                outs.push(LevelOutput {
                    probs,
                    forward: None,
                    reverse: None,
                });
                continue;
            }
            let level_reps: Vec<Mat> = channel.iter().map(|r| self.level_reps(r, level)).collect::<Result<_>>()?;
            let nodes = level_reps[0].nrows();
            let (fwd, rev) = if self.ablation.no_graph {
                (None, None)
            } else {
                (
                    Some(self.diffusion.run(&self.params, &level_reps, Direction::Forward)?),
                    Some(self.diffusion.run(&self.params, &level_reps, Direction::Reverse)?),
                )
            };
            let mut probs = Mat::zeros((n_s, nodes));
            for t in 0..n_s {
                let r = &level_reps[t];
                let zeros = Mat::zeros(r.dim());
                let hf = fwd.as_ref().map_or(&zeros, |o| &o.h_inner[t]);
                let hr = rev.as_ref().map_or(&zeros, |o| &o.h_inner[t]);
                let p = hierarchy::predict(&self.discriminator, &self.params, hf, hr, r)?;
                probs.row_mut(t).assign(&p.column(0));
            }
            outs.push(LevelOutput {
                probs,
                forward: fwd.filter(|_| keep_graphs),
                reverse: rev.filter(|_| keep_graphs),
            });
        }
        Ok(outs.try_into().expect("three levels"))
    }

    /// Joint loss of one window on the tape. `labels` are `S × nodes` per
    /// level.
    pub fn window_loss(&self, tape: &mut Tape, binder: &mut Binder, features: &Features, labels: [&Mat; 3]) -> Result<Var> {
        let c = self.n_channels();
        let n_s = features.rows() / c;
        if n_s == 0 || features.rows() % c != 0 || labels[0].dim() != (n_s, c) {
            return Err(Error::Shape(format!(
                "window of {} rows with channel labels {:?}",
                features.rows(),
                labels[0].dim()
            )));
        }
        let reps = match features {
            Features::Raw(m) => {
                let x = tape.leaf(m.clone());
                let locals = self.bcpc.encode_local(tape, binder, x)?;
                let z = self.bcpc.contextualize(tape, binder, locals)?;
                self.bcpc.represent(tape, binder, z)
            }
            Features::Pooled(m) => {
                let x = tape.leaf(m.clone());
                self.bcpc.project(tape, binder, x)
            }
        };
        let channel: Vec<Var> = (0..n_s).map(|t| tape.slice_rows(reps, t * c, (t + 1) * c)).collect();
        let groups = self.channel_map.groups();
        let all_regions = vec![(0..groups.len()).collect::<Vec<_>>()];
        let weights = self.config.level_weights.as_array();
        let mut total: Option<Var> = None;
        let mut region: Vec<Var> = Vec::new();
        for (li, level) in Level::ALL.into_iter().enumerate() {
            if self.ablation.no_hierarchy && level != Level::Channel {
                break;
            }
            let level_reps: Vec<Var> = match level {
                Level::Channel => channel.clone(),
                Level::Region => {
                    region = channel.iter().map(|&r| tape.group_max(r, &groups)).collect();
                    region.clone()
                }
                Level::Patient => region.iter().map(|&r| tape.group_max(r, &all_regions)).collect(),
            };
            let (hf, hr) = if self.ablation.no_graph {
                (None, None)
            } else {
                (
                    Some(self.diffusion.run_tape(tape, binder, &level_reps, Direction::Forward)),
                    Some(self.diffusion.run_tape(tape, binder, &level_reps, Direction::Reverse)),
                )
            };
            let mut rows = Vec::with_capacity(n_s);
            for t in 0..n_s {
                let r = level_reps[t];
                let (f, b) = match (&hf, &hr) {
                    (Some(f), Some(b)) => (f[t], b[t]),
                    _ => {
                        let z = tape.leaf(Mat::zeros(tape.value(r).dim()));
                        (z, z)
                    }
                };
                rows.push(tape.concat_cols(&[f, b, r]));
            }
            let x = tape.concat_rows(&rows);
            let p = self.discriminator.forward_tape(tape, binder, x);
            let y = labels[li];
            let y = Mat::from_shape_vec((y.len(), 1), y.iter().copied().collect())
                .map_err(|e| Error::Shape(e.to_string()))?;
            if tape.value(p).nrows() != y.nrows() {
                return Err(Error::Shape(format!("{level} labels do not match {} predictions", tape.value(p).nrows())));
            }
            let l = tape.bce(p, y, BCE_EPS);
            let l = tape.scale(l, weights[li]);
            total = Some(match total {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        Ok(total.expect("channel level always present"))
    }

    /// Probabilities for every segment of `features`, computed in
    /// contiguous windows of `window` segments. Returns `S × nodes` per level.
    pub fn predict(&self, features: &Features, window: usize) -> Result<[Mat; 3]> {
        let c = self.n_channels();
        let n_s = features.rows() / c;
        let reps = self.representations(features)?;
        let nodes = [c, self.channel_map.n_regions(), 1];
        let mut out = nodes.map(|n| Mat::zeros((n_s, n)));
        for start in (0..n_s).step_by(window.max(1)) {
            let end = (start + window.max(1)).min(n_s);
            let w = self.forward_window(&reps.slice(s![start * c..end * c, ..]).to_owned(), false)?;
            for (o, lv) in out.iter_mut().zip(w.iter()) {
                o.slice_mut(s![start..end, ..]).assign(&lv.probs);
            }
        }
        Ok(out)
    }

    /// Plain joint loss of a window, for checks against the tape.
    pub fn window_loss_value(&self, features: &Features, labels: [&Mat; 3]) -> Result<f64> {
        let reps = self.representations(features)?;
        let outs = self.forward_window(&reps, false)?;
        let mut w = self.config.level_weights;
        if self.ablation.no_hierarchy {
            w.region = 0.0;
            w.patient = 0.0;
        }
        hierarchy::joint_loss([&outs[0].probs, &outs[1].probs, &outs[2].probs], labels, w)
    }
}

/// Labels of `set` as `f64` matrices, indexed channel, region, patient.
pub fn level_labels(set: &SegmentSet) -> [Mat; 3] {
    Level::ALL.map(|l| set.labels(l).mapv(f64::from))
}

/// Labels of segments `start..end`.
pub fn slice_labels(labels: &[Mat; 3], start: usize, end: usize) -> [Mat; 3] {
    [0, 1, 2].map(|i| labels[i].slice(s![start..end, ..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcpc::BcpcConfig;
    use rand::Rng;

    pub(crate) fn tiny_bcpc() -> BcpcConfig {
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

    fn detector(ablation: Ablation) -> Detector {
        let bcpc = BcpcModel::init(tiny_bcpc(), 1).unwrap();
        Detector::new(&bcpc, ChannelMap::contiguous(4, 2).unwrap(), ModelConfig::default(), ablation, 2).unwrap()
    }

    fn window(rng: &mut ChaCha8Rng, n_s: usize, c: usize) -> (Features, [Mat; 3]) {
        let raw = Mat::from_shape_fn((n_s * c, 32), |_| rng.random_range(-1.0..1.0));
        let ch = Mat::from_shape_fn((n_s, c), |_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
        let map = ChannelMap::contiguous(c, 2).unwrap();
        let groups = map.groups();
        let reg = Mat::from_shape_fn((n_s, 2), |(t, g)| groups[g].iter().map(|&m| ch[[t, m]]).fold(0.0, f64::max));
        let pat = Mat::from_shape_fn((n_s, 1), |(t, _)| reg.row(t).fold(0.0, |a: f64, &b| a.max(b)));
        (Features::Raw(raw), [ch, reg, pat])
    }

    #[test]
    fn ablation_parsing() {
        let a: Ablation = "no_graph, no_bcpc".parse().unwrap();
        assert!(a.no_graph && a.no_bcpc && !a.no_inner);
        assert_eq!(a.to_string(), "no_bcpc+no_graph");
        assert_eq!("full".parse::<Ablation>().unwrap(), Ablation::default());
        assert!("no_magic".parse::<Ablation>().is_err());
        assert_eq!(Ablation::all_combinations().len(), 32);
    }

    #[test]
    fn levels_share_diffusion_and_discriminator() {
        let det = detector(Ablation::default());
        // one parameter set: every level resolves to the same ids
        let names: Vec<&str> = det.params.ids().map(|id| det.params.name(id)).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("disc.")).count(), 4);
        assert_eq!(names.iter().filter(|n| n.starts_with("diffusion.")).count(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, labels) = window(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let mut b = Binder::new(&det.params);
        let loss = det.window_loss(&mut tape, &mut b, &f, [&labels[0], &labels[1], &labels[2]]).unwrap();
        let mut g = tape.backward(loss);
        let grads = b.collect(&mut g);
        let ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
        assert!(ids.contains(&det.discriminator.w1));
        assert!(ids.contains(&det.diffusion.forward.cross.transform));
        assert!(ids.contains(&det.diffusion.reverse.inner.transform));
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        for ablation in Ablation::all_combinations() {
            let det = detector(ablation);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let (f, labels) = window(&mut rng, 4, 4);
            let l = [&labels[0], &labels[1], &labels[2]];
            let mut tape = Tape::new();
            let mut b = Binder::new(&det.params);
            let v = det.window_loss(&mut tape, &mut b, &f, l).unwrap();
            let plain = det.window_loss_value(&f, l).unwrap();
            assert!((tape.scalar(v) - plain).abs() < 1e-9 * (1.0 + plain), "{ablation}: {} vs {plain}", tape.scalar(v));
        }
    }

    #[test]
    fn pooled_features_match_raw() {
        let det = detector(Ablation::default());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (f, _) = window(&mut rng, 3, 4);
        let Features::Raw(raw) = &f else { unreachable!() };
        let pooled = Features::Pooled(det.bcpc.pooled_contexts(&det.params, raw).unwrap());
        let a = det.representations(&f).unwrap();
        let b = det.representations(&pooled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_in_open_unit_interval() {
        let det = detector(Ablation::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, _) = window(&mut rng, 5, 4);
        let out = det.predict(&f, 2).unwrap();
        assert_eq!(out[0].dim(), (5, 4));
        assert_eq!(out[1].dim(), (5, 2));
        assert_eq!(out[2].dim(), (5, 1));
        assert!(out.iter().flatten().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn no_hierarchy_scores_are_channel_maxima() {
        let det = detector("no_hierarchy".parse().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (f, _) = window(&mut rng, 3, 4);
        let out = det.predict(&f, 3).unwrap();
        for t in 0..3 {
            assert_eq!(out[1][[t, 0]], out[0][[t, 0]].max(out[0][[t, 1]]));
            assert_eq!(out[2][[t, 0]], out[0].row(t).fold(0.0, |a: f64, &b| a.max(b)));
        }
    }

    #[test]
    fn freezing_marks_backbone_only() {
        let mut det = detector(Ablation::default());
        det.freeze_encoder(true);
        let (w, _) = det.bcpc.projection();
        assert!(!det.params.is_frozen(w));
        assert!(det.bcpc.backbone_ids().iter().all(|&id| det.params.is_frozen(id)));
    }

    #[test]
    fn no_bcpc_replaces_encoder() {
        let full = detector(Ablation::default());
        let abl = detector("no_bcpc".parse().unwrap());
        let id = full.bcpc.backbone_ids()[0];
        assert_ne!(full.params.get(id), abl.params.get(id));
    }
}
