//! Synthetic recordings with events that travel along a planted graph.
//!
//! Background is white or 1/f noise. Each event starts at a seed channel and
//! spreads breadth-first along planted edges: an edge `i → j` of weight `w`
//! fires with probability `w` and adds a delay drawn from the configured
//! range. Every reached channel carries the waveform for the event duration
//! from its arrival time, and those samples are labeled positive.
//!
//! Templates, with `τ` the time since arrival, `D` the duration, `f` the
//! jittered frequency and `g(x) = exp(−x² / 2σ²)`, `σ = 10 ms`:
//!
//! * spike train: `Σ_n g(τ − n/f)`, `f ≈ 3 Hz`
//! * spike and wave: `g(φ − 3σ) − 0.4·sin(π f φ)`, `φ = τ mod 1/f`, `f ≈ 3 Hz`
//! * high-frequency burst: `½(1 − cos(2π τ/D))·sin(2π f τ)`, `f ≈ 80 Hz`
//!
//! all scaled by `event_amplitude`.

use std::collections::VecDeque;
use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMap, Provenance, Recording, SegmentationConfig};
use crate::error::{Error, Result};
use crate::graph::DiffusionGraph;

/// Refuse scenarios whose positive rate exceeds this.
pub const SATURATION_LIMIT: f64 = 0.5;

const SPIKE_WIDTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Waveform {
    SpikeTrain,
    SpikeAndWave,
    HighFrequencyBurst,
}

impl Waveform {
    fn base_frequency(self) -> f64 {
        match self {
            Waveform::SpikeTrain | Waveform::SpikeAndWave => 3.0,
            Waveform::HighFrequencyBurst => 80.0,
        }
    }

    /// Template value at `tau` seconds after arrival.
    pub fn value(self, tau: f64, duration: f64, freq: f64) -> f64 {
        let g = |x: f64| (-x * x / (2.0 * SPIKE_WIDTH * SPIKE_WIDTH)).exp();
        match self {
            Waveform::SpikeTrain => {
                let period = 1.0 / freq;
                let n = (tau / period).round();
                // neighbours beyond ±1 period are below 1e-100
                (-1..=1).map(|k| g(tau - (n + k as f64) * period)).sum()
            }
            Waveform::SpikeAndWave => {
                let phi = tau.rem_euclid(1.0 / freq);
                g(phi - 3.0 * SPIKE_WIDTH) - 0.4 * (std::f64::consts::PI * freq * phi).sin()
            }
            Waveform::HighFrequencyBurst => {
                let two_pi = 2.0 * std::f64::consts::PI;
                0.5 * (1.0 - (two_pi * tau / duration).cos()) * (two_pi * freq * tau).sin()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSpectrum {
    White,
    Pink,
}

/// An event placed at a given time in addition to the random ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedEvent {
    pub channel: usize,
    pub onset_seconds: f64,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_channels: usize,
    pub n_regions: usize,
    /// `planted_graph[i][j]` is the probability that an event at `i` spreads to `j`.
    pub planted_graph: Vec<Vec<f64>>,
    /// Poisson rate in events per hour.
    pub event_rate: f64,
    pub event_duration_range: [f64; 2],
    /// Seconds added per traversed edge.
    pub propagation_delay_range: [f64; 2],
    pub waveform: Waveform,
    /// Relative frequency jitter, `f = base · (1 + U(−j, j))`.
    pub frequency_jitter: f64,
    pub event_amplitude: f64,
    pub noise_spectrum: NoiseSpectrum,
    pub noise_amplitude: f64,
    pub sample_rate: f64,
    pub duration_seconds: f64,
    pub seed: u64,
    pub fixed_events: Vec<FixedEvent>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_channels: 8,
            n_regions: 3,
            planted_graph: chain_graph(8, 0.8, 0.3),
            event_rate: 30.0,
            event_duration_range: [0.5, 1.5],
            propagation_delay_range: [0.05, 0.2],
            waveform: Waveform::SpikeAndWave,
            frequency_jitter: 0.2,
            event_amplitude: 3.0,
            noise_spectrum: NoiseSpectrum::Pink,
            noise_amplitude: 1.0,
            sample_rate: 256.0,
            duration_seconds: 1800.0,
            seed: 0,
            fixed_events: Vec::new(),
        }
    }
}

/// `i → i+1` with weight `near` and `i → i+2` with weight `far`.
pub fn chain_graph(n: usize, near: f64, far: f64) -> Vec<Vec<f64>> {
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        if i + 1 < n {
            g[i][i + 1] = near;
        }
        if i + 2 < n {
            g[i][i + 2] = far;
        }
    }
    g
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let c = self.n_channels;
        if c == 0 || self.n_regions == 0 || self.n_regions > c {
            return bad(format!("{} channels cannot form {} regions", c, self.n_regions));
        }
        if self.planted_graph.len() != c || self.planted_graph.iter().any(|r| r.len() != c) {
            return bad(format!("planted_graph must be {c}×{c}"));
        }
        if self.planted_graph.iter().flatten().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("planted_graph weights must lie in [0, 1]".into());
        }
        let [d0, d1] = self.event_duration_range;
        if !(d0 > 0.0 && d1 >= d0 && d1.is_finite()) {
            return bad(format!("event_duration_range [{d0}, {d1}] must be positive and ordered"));
        }
        let [p0, p1] = self.propagation_delay_range;
        if !(p0 >= 0.0 && p1 >= p0 && p1.is_finite()) {
            return bad(format!("propagation_delay_range [{p0}, {p1}] must be non-negative and ordered"));
        }
        if !(self.event_rate >= 0.0 && self.event_rate.is_finite()) {
            return bad(format!("event_rate {} must be non-negative", self.event_rate));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample_rate {} must be positive", self.sample_rate));
        }
        if !(self.duration_seconds > 0.0 && self.duration_seconds.is_finite()) {
            return bad(format!("duration_seconds {} must be positive", self.duration_seconds));
        }
        if self.n_points() == 0 {
            return bad("recording would have no samples".into());
        }
        if !(0.0..1.0).contains(&self.frequency_jitter) {
            return bad(format!("frequency_jitter {} must lie in [0, 1)", self.frequency_jitter));
        }
        if !(self.event_amplitude >= 0.0 && self.noise_amplitude >= 0.0) {
            return bad("amplitudes must be non-negative".into());
        }
        for e in &self.fixed_events {
            if e.channel >= c || !(e.duration_seconds > 0.0) || !(e.onset_seconds >= 0.0) {
                return bad(format!("invalid fixed event {e:?}"));
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        (self.duration_seconds * self.sample_rate).floor() as usize
    }

    pub fn channel_map(&self) -> Result<ChannelMap> {
        ChannelMap::contiguous(self.n_channels, self.n_regions)
    }
}

/// One event and its per-channel arrival times (seconds); `None` means the
/// event never reached that channel inside the recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub onset_channel: usize,
    pub onset_time: f64,
    pub duration: f64,
    pub frequency: f64,
    pub arrivals: Vec<Option<f64>>,
}

impl PlantedEvent {
    /// Sample range labeled positive on `channel`, clipped to `n_points`.
    pub fn arrival_window(&self, channel: usize, sample_rate: f64, n_points: usize) -> Option<Range<usize>> {
        let a = self.arrivals[channel]?;
        let start = (a * sample_rate).round() as usize;
        let len = ((self.duration * sample_rate).round() as usize).max(1);
        (start < n_points).then(|| start..(start + len).min(n_points))
    }

    /// Union of all channels' windows as one sample range.
    pub fn span(&self, sample_rate: f64, n_points: usize) -> Option<Range<usize>> {
        let ws: Vec<Range<usize>> = (0..self.arrivals.len())
            .filter_map(|c| self.arrival_window(c, sample_rate, n_points))
            .collect();
        let start = ws.iter().map(|w| w.start).min()?;
        let end = ws.iter().map(|w| w.end).max()?;
        Some(start..end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub events: Vec<PlantedEvent>,
    pub planted_graph: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub n_points: usize,
}

impl PlantedTruth {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Segment indices (relative to `first_segment`, `n_segments` of them)
    /// whose window overlaps each event. Events outside the range are skipped.
    pub fn event_windows(&self, seg: SegmentationConfig, first_segment: usize, n_segments: usize) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        for e in &self.events {
            let Some(span) = e.span(self.sample_rate, self.n_points) else { continue };
            // segment t covers [t·l, t·l + k)
            let lo = (span.start + 1).saturating_sub(seg.window_k).div_ceil(seg.stride_l);
            let hi = (span.end - 1) / seg.stride_l + 1;
            let lo = lo.max(first_segment);
            let hi = hi.min(first_segment + n_segments);
            if lo < hi {
                out.push(lo - first_segment..hi - first_segment);
            }
        }
        out
    }
}

/// Generate a recording and its ground truth. Pure in `config`.
pub fn generate(config: &ScenarioConfig) -> Result<(Recording, PlantedTruth)> {
    config.validate()?;
    let map = config.channel_map()?;
    let n = config.n_points();
    let c = config.n_channels;
    let fs = config.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut samples = Array2::<f32>::zeros((n, c));
    for ch in 0..c {
        let noise = match config.noise_spectrum {
            NoiseSpectrum::White => white_noise(n, &mut rng),
            NoiseSpectrum::Pink => pink_noise(n, &mut rng),
        };
        for (t, v) in noise.into_iter().enumerate() {
            samples[[t, ch]] = (v * config.noise_amplitude) as f32;
        }
    }

    let mut starts: Vec<(f64, Option<usize>, Option<f64>)> = Vec::new();
    if config.event_rate > 0.0 {
        let exp = Exp::new(config.event_rate / 3600.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut t = exp.sample(&mut rng);
        while t < config.duration_seconds {
            starts.push((t, None, None));
            t += exp.sample(&mut rng);
        }
    }
    starts.extend(
        config
            .fixed_events
            .iter()
            .map(|e| (e.onset_seconds, Some(e.channel), Some(e.duration_seconds))),
    );
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut labels = Array2::<u8>::zeros((n, c));
    let mut events = Vec::with_capacity(starts.len());
    let [d0, d1] = config.event_duration_range;
    let [p0, p1] = config.propagation_delay_range;
    let j = config.frequency_jitter;
    for (onset, fixed_channel, fixed_duration) in starts {
        let seed_ch = fixed_channel.unwrap_or_else(|| rng.random_range(0..c));
        let duration = fixed_duration.unwrap_or_else(|| uniform(&mut rng, d0, d1));
        let frequency = config.waveform.base_frequency() * (1.0 + uniform(&mut rng, -j, j));
        let mut arrivals: Vec<Option<f64>> = vec![None; c];
        arrivals[seed_ch] = Some(onset);
        let mut queue = VecDeque::from([seed_ch]);
        while let Some(u) = queue.pop_front() {
            let au = arrivals[u].expect("queued channels have arrived");
            for (v, &w) in config.planted_graph[u].iter().enumerate() {
                if v == u || w <= 0.0 || arrivals[v].is_some() {
                    continue;
                }
                let fires = rng.random::<f64>() < w;
                let delay = uniform(&mut rng, p0, p1);
                if fires {
                    arrivals[v] = Some(au + delay);
                    queue.push_back(v);
                }
            }
        }
        let mut event = PlantedEvent {
            onset_channel: seed_ch,
            onset_time: onset,
            duration,
            frequency,
            arrivals,
        };
        for ch in 0..c {
            match event.arrival_window(ch, fs, n) {
                Some(w) => {
                    let a = (w.start as f64) / fs;
                    for t in w {
                        let tau = t as f64 / fs - a;
                        samples[[t, ch]] += (config.event_amplitude * config.waveform.value(tau, duration, frequency)) as f32;
                        labels[[t, ch]] = 1;
                    }
                }
                None => event.arrivals[ch] = None,
            }
        }
        events.push(event);
    }

    let positive = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
    if positive > SATURATION_LIMIT {
        return Err(Error::Saturation {
            rate: positive,
            limit: SATURATION_LIMIT,
        });
    }

    let provenance = Provenance {
        generator: "synth".into(),
        seed: config.seed,
        params: serde_json::to_string(config)?,
    };
    let recording = Recording::new(samples, labels, fs, map, Some(provenance))?;
    let truth = PlantedTruth {
        events,
        planted_graph: config.planted_graph.clone(),
        sample_rate: fs,
        n_points: n,
    };
    Ok((recording, truth))
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn white_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit-variance noise with power spectrum ∝ 1/f.
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n < 2 {
        return white_noise(n, rng);
    }
    let mut buf: Vec<Complex<f64>> = white_noise(n, rng).into_iter().map(|x| Complex::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    x.into_iter().map(|v| (v - mean) / std.max(f64::MIN_POSITIVE)).collect()
}

/// Mean over event windows of (mean learned weight on planted edges − mean
/// on non-edges), divided by the largest absolute weight seen in any window.
/// Self pairs are ignored. `windows` index into `graphs`.
pub fn truth_alignment_score(graphs: &[DiffusionGraph], truth: &PlantedTruth, windows: &[Range<usize>]) -> Result<f64> {
    if truth.events.is_empty() || windows.is_empty() {
        return Err(Error::UndefinedMetric("alignment needs at least one event window".into()));
    }
    let c = truth.planted_graph.len();
    let mut n_edges = 0;
    let mut n_non = 0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                if truth.planted_graph[i][j] > 0.0 {
                    n_edges += 1;
                } else {
                    n_non += 1;
                }
            }
        }
    }
    if n_edges == 0 || n_non == 0 {
        return Err(Error::UndefinedMetric("planted graph has no edges or no non-edges".into()));
    }
    let mut scale: f64 = 0.0;
    for w in windows {
        let Some(gs) = graphs.get(w.clone()) else {
            return Err(Error::Shape(format!("window {w:?} outside {} graphs", graphs.len())));
        };
        for g in gs {
            if g.adjacency.dim() != (c, c) {
                return Err(Error::Shape(format!(
                    "graph {:?} does not match {c} planted channels",
                    g.adjacency.dim()
                )));
            }
            scale = scale.max(g.adjacency.iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    if scale == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for w in windows {
        let gs = &graphs[w.clone()];
        let mut on = 0.0;
        let mut off = 0.0;
        for g in gs {
            for i in 0..c {
                for j in 0..c {
                    if i == j {
                        continue;
                    }
                    if truth.planted_graph[i][j] > 0.0 {
                        on += g.adjacency[[i, j]];
                    } else {
                        off += g.adjacency[[i, j]];
                    }
                }
            }
        }
        let k = gs.len() as f64;
        total += (on / (k * n_edges as f64) - off / (k * n_non as f64)) / scale;
    }
    Ok(total / windows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mat;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_channels: 2,
            n_regions: 1,
            planted_graph: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
            event_rate: 0.0,
            duration_seconds: 20.0,
            sample_rate: 128.0,
            ..Default::default()
        }
    }

    #[test]
    fn no_events_pure_noise() {
        let (rec, truth) = generate(&small()).unwrap();
        assert!(truth.events.is_empty());
        assert!(rec.labels().iter().all(|&l| l == 0));
        let s = rec.samples();
        let var = s.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / s.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn chain_arrival_exactly_delay_later() {
        let mut cfg = small();
        cfg.propagation_delay_range = [0.25, 0.25];
        cfg.fixed_events = vec![FixedEvent {
            channel: 0,
            onset_seconds: 5.0,
            duration_seconds: 1.0,
        }];
        let (rec, truth) = generate(&cfg).unwrap();
        let e = &truth.events[0];
        assert_eq!(e.arrivals, vec![Some(5.0), Some(5.25)]);
        let first = |ch: usize| rec.labels().column(ch).iter().position(|&l| l == 1).unwrap();
        assert_eq!(first(0), 640);
        assert_eq!(first(1), 672);
        assert_eq!(first(1) - first(0), (0.25 * 128.0) as usize);
    }

    #[test]
    fn zero_weights_confine_events() {
        let mut cfg = ScenarioConfig {
            planted_graph: vec![vec![0.0; 8]; 8],
            event_rate: 600.0,
            duration_seconds: 120.0,
            ..Default::default()
        };
        cfg.seed = 4;
        let (_, truth) = generate(&cfg).unwrap();
        assert!(!truth.events.is_empty());
        for e in &truth.events {
            let reached: Vec<usize> = (0..8).filter(|&c| e.arrivals[c].is_some()).collect();
            assert_eq!(reached, vec![e.onset_channel]);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = ScenarioConfig {
            duration_seconds: 200.0,
            event_rate: 200.0,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&ScenarioConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn labels_are_the_union_of_arrival_windows() {
        let cfg = ScenarioConfig {
            duration_seconds: 300.0,
            event_rate: 300.0,
            seed: 9,
            ..Default::default()
        };
        let (rec, truth) = generate(&cfg).unwrap();
        let mut expect = Array2::<u8>::zeros(rec.labels().dim());
        for e in &truth.events {
            for ch in 0..cfg.n_channels {
                if let Some(w) = e.arrival_window(ch, cfg.sample_rate, truth.n_points) {
                    assert!(!w.is_empty());
                    for t in w {
                        expect[[t, ch]] = 1;
                    }
                } else {
                    assert!(e.arrivals[ch].is_none());
                }
            }
        }
        assert_eq!(&expect, rec.labels());
    }

    #[test]
    fn saturation_refused() {
        let cfg = ScenarioConfig {
            duration_seconds: 60.0,
            event_rate: 20_000.0,
            event_duration_range: [2.0, 3.0],
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Saturation { .. })));
    }

    #[test]
    fn invalid_graph_rejected() {
        let mut cfg = small();
        cfg.planted_graph[0][1] = 1.5;
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = small();
        cfg.propagation_delay_range = [-0.1, 0.1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_ratio_near_target() {
        let (rec, _) = generate(&ScenarioConfig::default()).unwrap();
        let r = rec.positive_ratio();
        assert!(r > 0.001 && r < 0.01, "{r}");
    }

    #[test]
    fn pink_slope_near_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1 << 16;
        let x = pink_noise(n, &mut rng);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        // log-spaced bands over two decades of bins, one decade fitted
        let mut pts = Vec::new();
        let mut lo = 100.0f64;
        while lo < 1000.0 {
            let hi = lo * 1.25;
            let (a, b) = (lo as usize, hi as usize);
            let p = buf[a..b].iter().map(|z| z.norm_sqr()).sum::<f64>() / (b - a) as f64;
            pts.push((((a + b) as f64 / 2.0).ln(), p.ln()));
            lo = hi;
        }
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (mx, my) = (sx / m, sy / m);
        let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() < 0.3, "{slope}");
    }

    fn truth_with(graph: Vec<Vec<f64>>) -> PlantedTruth {
        let c = graph.len();
        PlantedTruth {
            events: vec![PlantedEvent {
                onset_channel: 0,
                onset_time: 0.0,
                duration: 1.0,
                frequency: 3.0,
                arrivals: vec![Some(0.0); c],
            }],
            planted_graph: graph,
            sample_rate: 1.0,
            n_points: 10,
        }
    }

    #[test]
    fn perfect_recovery_scores_one() {
        let planted = chain_graph(5, 0.8, 0.3);
        let adj = Mat::from_shape_fn((5, 5), |(i, j)| if planted[i][j] > 0.0 { 1.0 } else { 0.0 });
        let graphs = vec![DiffusionGraph { adjacency: adj }; 3];
        let s = truth_alignment_score(&graphs, &truth_with(planted), &[0..3]).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn uniform_weights_score_zero() {
        let graphs = vec![DiffusionGraph { adjacency: Mat::from_elem((4, 4), 0.4) }];
        let s = truth_alignment_score(&graphs, &truth_with(chain_graph(4, 1.0, 0.0)), &[0..1]).unwrap();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn random_weights_null_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = truth_with(chain_graph(8, 0.8, 0.3));
        let scores: Vec<f64> = (0..100)
            .map(|_| {
                let graphs: Vec<DiffusionGraph> = (0..4)
                    .map(|_| DiffusionGraph {
                        adjacency: Mat::from_shape_fn((8, 8), |_| rng.random::<f64>()),
                    })
                    .collect();
                truth_alignment_score(&graphs, &truth, &[0..2, 2..4]).unwrap()
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / 100.0;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn empty_events_undefined() {
        let mut truth = truth_with(chain_graph(3, 1.0, 0.0));
        truth.events.clear();
        let graphs = vec![DiffusionGraph { adjacency: Mat::zeros((3, 3)) }];
        assert!(matches!(
            truth_alignment_score(&graphs, &truth, &[0..1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn event_windows_cover_overlapping_segments() {
        let mut truth = truth_with(chain_graph(2, 1.0, 0.0));
        truth.sample_rate = 1.0;
        truth.n_points = 1000;
        truth.events[0].arrivals = vec![Some(100.0), None];
        truth.events[0].duration = 10.0;
        let seg = SegmentationConfig { window_k: 16, stride_l: 8 };
        // samples 100..110; segment t covers [8t, 8t+16)
        let w = truth.event_windows(seg, 0, 200);
        assert_eq!(w, vec![11..14]);
        let w = truth.event_windows(seg, 12, 100);
        assert_eq!(w, vec![0..2]);
    }

    #[test]
    fn truth_json_round_trip() {
        let cfg = ScenarioConfig {
            duration_seconds: 120.0,
            event_rate: 300.0,
            ..Default::default()
        };
        let (_, truth) = generate(&cfg).unwrap();
        assert_eq!(PlantedTruth::from_json(&truth.to_json().unwrap()).unwrap(), truth);
    }

    #[test]
    fn templates_are_bounded() {
        for w in [Waveform::SpikeTrain, Waveform::SpikeAndWave, Waveform::HighFrequencyBurst] {
            for i in 0..1000 {
                let v = w.value(i as f64 / 1000.0, 1.0, w.base_frequency());
                assert!(v.is_finite() && v.abs() <= 1.5, "{w:?} {v}");
            }
        }
    }
}
