//! Multichannel recordings, sliding-window segmentation and hierarchical labels.
//!
//! Math in the literature indexes segments from 1 (segment `t` starts at raw
//! point `l·(t−1)+1`). Everything here is 0-based: segment `t` covers raw
//! points `t·l .. t·l + k`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel → region assignment. Channel order is the column order of every
/// array derived from the owning recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    channels: Vec<String>,
    regions: Vec<String>,
    assignment: Vec<usize>,
}

impl ChannelMap {
    pub fn new(channels: Vec<String>, regions: Vec<String>, assignment: Vec<usize>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Mapping("channel map has no channels".into()));
        }
        if assignment.len() != channels.len() {
            return Err(Error::Mapping(format!(
                "{} channels but {} region assignments",
                channels.len(),
                assignment.len()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&b| b >= regions.len()) {
            return Err(Error::Mapping(format!(
                "region index {bad} out of range for {} regions",
                regions.len()
            )));
        }
        for (b, name) in regions.iter().enumerate() {
            if !assignment.contains(&b) {
                return Err(Error::Mapping(format!("region {name:?} has no channels")));
            }
        }
        Ok(Self {
            channels,
            regions,
            assignment,
        })
    }

    /// Contiguous blocks: channel `c` of `n_channels` goes to region
    /// `c * n_regions / n_channels`. Names are `ch0..` and `region0..`.
    pub fn contiguous(n_channels: usize, n_regions: usize) -> Result<Self> {
        if n_regions == 0 || n_regions > n_channels {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n_channels} channels into {n_regions} regions"
            )));
        }
        let channels = (0..n_channels).map(|c| format!("ch{c}")).collect();
        let regions = (0..n_regions).map(|b| format!("region{b}")).collect();
        let assignment = (0..n_channels).map(|c| c * n_regions / n_channels).collect();
        Self::new(channels, regions, assignment)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn region_of(&self, channel: usize) -> usize {
        self.assignment[channel]
    }

    /// Channel indices of every region, in channel order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.regions.len()];
        for (c, &b) in self.assignment.iter().enumerate() {
            groups[b].push(c);
        }
        groups
    }
}

/// Where a recording came from. Carried through storage unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    /// Generator configuration as JSON text.
    pub params: String,
}

/// Raw `|T| × |C|` recording with per-point binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    samples: Array2<f32>,
    labels: Array2<u8>,
    sample_rate: f64,
    channel_map: ChannelMap,
    provenance: Option<Provenance>,
}

impl Recording {
    pub fn new(
        samples: Array2<f32>,
        labels: Array2<u8>,
        sample_rate: f64,
        channel_map: ChannelMap,
        provenance: Option<Provenance>,
    ) -> Result<Self> {
        let (n_t, n_c) = samples.dim();
        if n_t == 0 {
            return Err(Error::DataValidation("recording has no time points".into()));
        }
        if n_c != channel_map.n_channels() {
            return Err(Error::Mapping(format!(
                "recording has {n_c} columns but the channel map has {} channels",
                channel_map.n_channels()
            )));
        }
        if labels.dim() != samples.dim() {
            return Err(Error::Shape(format!(
                "labels {:?} do not match samples {:?}",
                labels.dim(),
                samples.dim()
            )));
        }
        check_binary(labels.view())?;
        if let Some(((i, c), _)) = samples.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::DataValidation(format!(
                "non-finite sample at point {i}, channel {c}"
            )));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::DataValidation(format!("bad sample rate {sample_rate}")));
        }
        Ok(Self {
            samples,
            labels,
            sample_rate,
            channel_map,
            provenance,
        })
    }

    pub fn samples(&self) -> &Array2<f32> {
        &self.samples
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel_map(&self) -> &ChannelMap {
        &self.channel_map
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn n_points(&self) -> usize {
        self.samples.nrows()
    }

    pub fn positive_ratio(&self) -> f64 {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        pos as f64 / self.labels.len() as f64
    }

    /// Per-channel z-scoring with the given statistics; returns a new recording.
    pub fn standardized(&self, mean: &[f32], std: &[f32]) -> Result<Self> {
        let n_c = self.channel_map.n_channels();
        if mean.len() != n_c || std.len() != n_c {
            return Err(Error::Shape("standardization stats do not match channel count".into()));
        }
        let mut samples = self.samples.clone();
        for (c, mut col) in samples.axis_iter_mut(Axis(1)).enumerate() {
            let sd = if std[c] > 0.0 { std[c] } else { 1.0 };
            col.mapv_inplace(|x| (x - mean[c]) / sd);
        }
        Self::new(
            samples,
            self.labels.clone(),
            self.sample_rate,
            self.channel_map.clone(),
            self.provenance.clone(),
        )
    }

    /// Per-channel mean and standard deviation over points `range`.
    pub fn channel_stats(&self, range: std::ops::Range<usize>) -> (Vec<f32>, Vec<f32>) {
        let view = self.samples.slice(s![range, ..]);
        let n = view.nrows().max(1) as f64;
        let mut means = Vec::with_capacity(view.ncols());
        let mut stds = Vec::with_capacity(view.ncols());
        for col in view.axis_iter(Axis(1)) {
            let m = col.iter().map(|&x| x as f64).sum::<f64>() / n;
            let v = col.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
            means.push(m as f32);
            stds.push(v.sqrt() as f32);
        }
        (means, stds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Window length `k` in points.
    pub window_k: usize,
    /// Stride `l` in points.
    pub stride_l: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window_k: 128,
            stride_l: 64,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.window_k == 0 || self.stride_l == 0 {
            return Err(Error::InvalidConfig("window and stride must be positive".into()));
        }
        if self.window_k > n_points {
            return Err(Error::InvalidConfig(format!(
                "window {} exceeds recording length {n_points}",
                self.window_k
            )));
        }
        Ok(())
    }

    /// `floor((|T| − k) / l) + 1`, or 0 when the window does not fit.
    pub fn segment_count(&self, n_points: usize) -> usize {
        if self.window_k > n_points || self.stride_l == 0 {
            0
        } else {
            (n_points - self.window_k) / self.stride_l + 1
        }
    }

    /// First raw point (0-based) of segment `t` (0-based).
    pub fn start_of(&self, t: usize) -> usize {
        t * self.stride_l
    }
}

/// Windowed view of a recording with labels at all three hierarchy levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    data: Array3<f32>,
    channel_labels: Array2<u8>,
    region_labels: Array2<u8>,
    patient_labels: Array1<u8>,
    config: SegmentationConfig,
    channel_map: ChannelMap,
    sample_rate: f64,
    /// Index of the first segment relative to the segmentation it was cut from.
    first_segment: usize,
}

impl SegmentSet {
    /// Rebuilds a set from stored parts, re-deriving and checking the
    /// region and patient labels.
    pub fn from_parts(
        data: Array3<f32>,
        channel_labels: Array2<u8>,
        config: SegmentationConfig,
        channel_map: ChannelMap,
        sample_rate: f64,
        first_segment: usize,
    ) -> Result<Self> {
        let (n_s, n_c, k) = data.dim();
        if n_c != channel_map.n_channels() || k != config.window_k {
            return Err(Error::Shape(format!(
                "segment data {:?} inconsistent with {} channels and k={}",
                data.dim(),
                channel_map.n_channels(),
                config.window_k
            )));
        }
        if channel_labels.dim() != (n_s, n_c) {
            return Err(Error::Shape("channel labels do not match segment data".into()));
        }
        let (region_labels, patient_labels) =
            build_hierarchy_labels(channel_labels.view(), &channel_map)?;
        Ok(Self {
            data,
            channel_labels,
            region_labels,
            patient_labels,
            config,
            channel_map,
            sample_rate,
            first_segment,
        })
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `|S| × |C| × k`.
    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn channel_labels(&self) -> &Array2<u8> {
        &self.channel_labels
    }

    pub fn region_labels(&self) -> &Array2<u8> {
        &self.region_labels
    }

    pub fn patient_labels(&self) -> &Array1<u8> {
        &self.patient_labels
    }

    /// Labels of one hierarchy level as a `|S| × nodes` matrix.
    pub fn labels(&self, level: Level) -> Array2<u8> {
        match level {
            Level::Channel => self.channel_labels.clone(),
            Level::Region => self.region_labels.clone(),
            Level::Patient => self.patient_labels.clone().insert_axis(Axis(1)),
        }
    }

    pub fn config(&self) -> SegmentationConfig {
        self.config
    }

    pub fn channel_map(&self) -> &ChannelMap {
        &self.channel_map
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn first_segment(&self) -> usize {
        self.first_segment
    }

    /// Contiguous sub-range of segments.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::InvalidConfig(format!(
                "segment range {range:?} outside 0..{}",
                self.len()
            )));
        }
        Ok(Self {
            data: self.data.slice(s![range.clone(), .., ..]).to_owned(),
            channel_labels: self.channel_labels.slice(s![range.clone(), ..]).to_owned(),
            region_labels: self.region_labels.slice(s![range.clone(), ..]).to_owned(),
            patient_labels: self.patient_labels.slice(s![range.clone()]).to_owned(),
            config: self.config,
            channel_map: self.channel_map.clone(),
            sample_rate: self.sample_rate,
            first_segment: self.first_segment + range.start,
        })
    }
}

/// Cut `recording` into windows of `k` points every `l` points. Trailing
/// points not covered by a full window are dropped.
pub fn segment(recording: &Recording, config: SegmentationConfig) -> Result<SegmentSet> {
    let n_t = recording.n_points();
    config.validate(n_t)?;
    check_binary(recording.labels.view())?;
    let n_s = config.segment_count(n_t);
    let n_c = recording.channel_map.n_channels();
    let k = config.window_k;

    let mut data = Array3::<f32>::zeros((n_s, n_c, k));
    let mut channel_labels = Array2::<u8>::zeros((n_s, n_c));
    for t in 0..n_s {
        let start = config.start_of(t);
        let window = recording.samples.slice(s![start..start + k, ..]);
        data.slice_mut(s![t, .., ..]).assign(&window.t());
        let labels = recording.labels.slice(s![start..start + k, ..]);
        for c in 0..n_c {
            channel_labels[[t, c]] = labels.column(c).iter().copied().max().unwrap_or(0);
        }
    }
    SegmentSet::from_parts(
        data,
        channel_labels,
        config,
        recording.channel_map.clone(),
        recording.sample_rate,
        0,
    )
}

/// Region label = OR over member channels; patient label = OR over regions.
pub fn build_hierarchy_labels(
    channel_labels: ArrayView2<u8>,
    channel_map: &ChannelMap,
) -> Result<(Array2<u8>, Array1<u8>)> {
    let (n_s, n_c) = channel_labels.dim();
    if n_c != channel_map.n_channels() {
        return Err(Error::Mapping(format!(
            "labels have {n_c} channels, map has {}",
            channel_map.n_channels()
        )));
    }
    check_binary(channel_labels)?;
    let mut region = Array2::<u8>::zeros((n_s, channel_map.n_regions()));
    for t in 0..n_s {
        for c in 0..n_c {
            let b = channel_map.region_of(c);
            region[[t, b]] = region[[t, b]].max(channel_labels[[t, c]]);
        }
    }
    let patient = region.map_axis(Axis(1), |row| row.iter().copied().max().unwrap_or(0));
    Ok((region, patient))
}

fn check_binary(labels: ArrayView2<u8>) -> Result<()> {
    if let Some(((i, c), v)) = labels.indexed_iter().find(|(_, &v)| v > 1) {
        return Err(Error::DataValidation(format!(
            "label {v} at ({i}, {c}) is not binary"
        )));
    }
    Ok(())
}

/// Hierarchy level of a prediction node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Channel,
    Region,
    Patient,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Channel, Level::Region, Level::Patient];

    pub fn name(self) -> &'static str {
        match self {
            Level::Channel => "channel",
            Level::Region => "region",
            Level::Patient => "patient",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Positive-to-negative ratio such as `1:50`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub positive: usize,
    pub negative: usize,
}

impl Ratio {
    pub const fn one_to(negative: usize) -> Self {
        Self {
            positive: 1,
            negative,
        }
    }

    /// Evaluation ratios used unless overridden.
    pub fn defaults() -> Vec<Ratio> {
        vec![Ratio::one_to(5), Ratio::one_to(50), Ratio::one_to(500)]
    }

    /// Largest positive count a pool of `n_pos`/`n_neg` items supports.
    pub fn max_positives(&self, n_pos: usize, n_neg: usize) -> usize {
        let by_neg = n_neg * self.positive / self.negative;
        let p = n_pos.min(by_neg);
        p - p % self.positive
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.positive, self.negative)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("ratio {s:?} is not of the form a:b"));
        let (a, b) = s.trim().split_once(':').ok_or_else(bad)?;
        let positive: usize = a.trim().parse().map_err(|_| bad())?;
        let negative: usize = b.trim().parse().map_err(|_| bad())?;
        if positive == 0 || negative == 0 {
            return Err(bad());
        }
        Ok(Self { positive, negative })
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// `(segment, node)` items drawn at a fixed positive:negative ratio, in
/// temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSelection {
    pub ratio: Ratio,
    pub items: Vec<(usize, usize)>,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Draw `count_positive` positive items and `count_positive·b/a` negative
/// items from a `|S| × nodes` label matrix, uniformly without replacement.
pub fn sample_eval_set(
    labels: ArrayView2<u8>,
    ratio: Ratio,
    count_positive: usize,
    seed: u64,
) -> Result<EvalSelection> {
    if count_positive % ratio.positive != 0 {
        return Err(Error::InvalidConfig(format!(
            "{count_positive} positives cannot be split at ratio {ratio}"
        )));
    }
    let count_negative = count_positive / ratio.positive * ratio.negative;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for ((t, n), &y) in labels.indexed_iter() {
        if y == 1 {
            positives.push((t, n));
        } else {
            negatives.push((t, n));
        }
    }
    if positives.len() < count_positive || negatives.len() < count_negative {
        return Err(Error::SamplingInfeasible(format!(
            "ratio {ratio} with {count_positive} positives needs {count_positive} positives and \
             {count_negative} negatives; have {} and {} (short by {} and {})",
            positives.len(),
            negatives.len(),
            count_positive.saturating_sub(positives.len()),
            count_negative.saturating_sub(negatives.len()),
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<(usize, usize)> = index::sample(&mut rng, positives.len(), count_positive)
        .into_iter()
        .map(|i| positives[i])
        .collect();
    items.extend(
        index::sample(&mut rng, negatives.len(), count_negative)
            .into_iter()
            .map(|i| negatives[i]),
    );
    items.sort_unstable();
    Ok(EvalSelection {
        ratio,
        items,
        n_positive: count_positive,
        n_negative: count_negative,
    })
}
