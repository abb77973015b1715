//! Whole-experiment plumbing: one TOML file drives generation, splitting,
//! pretraining, training, evaluation, graph export and the threshold sweep.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bcpc::{pretrain, BcpcConfig, BcpcModel, CurvePoint, PretrainConfig, PretrainOutcome};
use crate::data::{segment, Level, Ratio, Recording, SegmentSet, SegmentationConfig};
use crate::error::{Error, Result};
use crate::graph::{score_matrix, DiffusionGraph, Direction};
use crate::metrics::MetricsReport;
use crate::model::{raw_rows, Detector, ModelConfig};
use crate::synth::{generate, truth_alignment_score, PlantedTruth, ScenarioConfig};
use crate::tape::Mat;
use crate::train::{config_hash, evaluate, train, EpochLog, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Leading fraction of segments used for training.
    pub train: f64,
    /// Following fraction used for validation; the rest is the test set.
    pub valid: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.7, valid: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ratios: Vec<Ratio>,
    /// Segments per inference window.
    pub window: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratios: Ratio::defaults(),
            window: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub theta_inner: Vec<f64>,
    pub theta_cross: Vec<f64>,
    /// Ratio at which each grid point's channel F2 is read.
    pub ratio: Ratio,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            theta_inner: vec![0.05, 0.1, 0.2, 0.4],
            theta_cross: vec![0.025, 0.05, 0.1, 0.2],
            ratio: Ratio::one_to(50),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory; the CLI falls back to `$SEEGDIFF_OUT`, then `runs/`.
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub segmentation: SegmentationConfig,
    pub split: SplitConfig,
    pub bcpc: BcpcConfig,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bcpc = BcpcConfig::default();
        let k = bcpc.segment_len();
        Self {
            scenario: ScenarioConfig::default(),
            segmentation: SegmentationConfig {
                window_k: k,
                stride_l: k / 2,
            },
            split: SplitConfig::default(),
            bcpc,
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Apply one seed everywhere a seed appears.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.bcpc.validate()?;
        self.model.diffusion.validate()?;
        self.train.validate()?;
        if self.segmentation.window_k != self.bcpc.segment_len() {
            return Err(Error::InvalidConfig(format!(
                "segmentation window {} must equal the encoder segment length {}",
                self.segmentation.window_k,
                self.bcpc.segment_len()
            )));
        }
        if self.segmentation.stride_l == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        let s = self.split;
        if !(s.train > 0.0 && s.valid > 0.0 && s.train + s.valid < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fractions train {} and valid {} must be positive and leave a test set",
                s.train, s.valid
            )));
        }
        if self.eval.ratios.is_empty() || self.eval.window == 0 {
            return Err(Error::InvalidConfig("eval needs ratios and a positive window".into()));
        }
        for &t in self.sweep.theta_inner.iter().chain(&self.sweep.theta_cross) {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!("sweep threshold {t} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Standardized recording cut into time-ordered train, validation and test
/// sets. One segment is skipped at each boundary so no raw point is shared.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: SegmentSet,
    pub valid: SegmentSet,
    pub test: SegmentSet,
}

pub fn prepare(recording: &Recording, seg: SegmentationConfig, split: SplitConfig) -> Result<Prepared> {
    let n = seg.segment_count(recording.n_points());
    let n_train = (n as f64 * split.train).floor() as usize;
    let n_valid = (n as f64 * split.valid).floor() as usize;
    if n_train < 2 || n_valid < 1 || n_train + n_valid + 3 > n {
        return Err(Error::DataValidation(format!(
            "{n} segments are too few for a {}/{} split",
            split.train, split.valid
        )));
    }
    let train_end = seg.start_of(n_train - 1) + seg.window_k;
    let (mean, std) = recording.channel_stats(0..train_end);
    let all = segment(&recording.standardized(&mean, &std)?, seg)?;
    let v0 = n_train + 1;
    let t0 = v0 + n_valid + 1;
    Ok(Prepared {
        train: all.slice(0..n_train)?,
        valid: all.slice(v0..v0 + n_valid)?,
        test: all.slice(t0..n)?,
    })
}

/// Pretrain the encoder on every channel of every training segment.
pub fn pretrain_on(train_set: &SegmentSet, cfg: &RunConfig) -> Result<PretrainOutcome> {
    pretrain(&raw_rows(train_set.data()), cfg.bcpc.clone(), &cfg.pretrain)
}

pub fn train_on(pretrained: &BcpcModel, prepared: &Prepared, cfg: &RunConfig) -> Result<TrainOutcome> {
    train(pretrained, &prepared.train, &prepared.valid, cfg.model, &cfg.train)
}

pub fn evaluate_on(det: &Detector, set: &SegmentSet, cfg: &RunConfig) -> Result<MetricsReport> {
    evaluate(det, set, &cfg.eval.ratios, cfg.eval.window, cfg.eval.seed, cfg.hash()?)
}

/// Everything produced by one synthetic end-to-end run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub truth: PlantedTruth,
    pub prepared: Prepared,
    pub pretrain: PretrainOutcome,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

pub fn run_synthetic(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (recording, truth) = generate(&cfg.scenario)?;
    let prepared = prepare(&recording, cfg.segmentation, cfg.split)?;
    let pre = pretrain_on(&prepared.train, cfg)?;
    let outcome = train_on(&pre.model, &prepared, cfg)?;
    let report = evaluate_on(&outcome.detector, &prepared.test, cfg)?;
    Ok(RunArtifacts {
        truth,
        prepared,
        pretrain: pre,
        outcome,
        report,
    })
}

pub fn pretrain_curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_loss,valid_loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.train_loss, p.valid_loss));
    }
    out
}

pub fn train_curve_csv(curve: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,valid_f2,valid_auc\n");
    for e in curve {
        let auc = e.valid_auc.map_or(String::new(), |a| a.to_string());
        out.push_str(&format!("{},{},{},{auc}\n", e.epoch, e.train_loss, e.valid_f2));
    }
    out
}

// ---------------------------------------------------------------------------
// graph export

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Cross,
    Inner,
}

impl GraphKind {
    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Cross => "cross",
            GraphKind::Inner => "inner",
        }
    }
}

/// One exported time step: adjacency of both directions with node labels.
/// Rows are sources, columns targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub level: Level,
    pub kind: GraphKind,
    /// Absolute segment index in the recording.
    pub segment: usize,
    pub nodes: Vec<String>,
    pub forward: Vec<Vec<f64>>,
    pub reverse: Vec<Vec<f64>>,
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Malformed("ragged adjacency rows".into()));
    }
    Mat::from_shape_vec((n, m), rows.concat()).map_err(|e| Error::Malformed(e.to_string()))
}

fn level_nodes(det: &Detector, level: Level) -> Vec<String> {
    match level {
        Level::Channel => det.channel_map.channels().to_vec(),
        Level::Region => det.channel_map.regions().to_vec(),
        Level::Patient => vec!["patient".into()],
    }
}

/// Graphs of `set[span]` computed as one contiguous sequence.
pub fn span_graphs(det: &Detector, set: &SegmentSet, span: Range<usize>) -> Result<Vec<GraphFile>> {
    if span.is_empty() || span.end > set.len() {
        return Err(Error::DataValidation(format!(
            "span {span:?} outside the {} available segments",
            set.len()
        )));
    }
    if det.ablation.no_graph {
        return Err(Error::InvalidConfig("the no_graph model has no diffusion graphs to export".into()));
    }
    let sub = set.slice(span.clone())?;
    let feats = det.features(&sub, true)?;
    let reps = det.representations(&feats)?;
    let outs = det.forward_window(&reps, true)?;
    let mut files = Vec::new();
    for (level, out) in Level::ALL.into_iter().zip(outs) {
        let (Some(fwd), Some(rev)) = (out.forward, out.reverse) else { continue };
        let nodes = level_nodes(det, level);
        for t in 0..span.len() {
            for (kind, f, r) in [
                (GraphKind::Cross, &fwd.cross_graphs[t], &rev.cross_graphs[t]),
                (GraphKind::Inner, &fwd.inner_graphs[t], &rev.inner_graphs[t]),
            ] {
                files.push(GraphFile {
                    level,
                    kind,
                    segment: sub.first_segment() + t,
                    nodes: nodes.clone(),
                    forward: rows_of(&f.adjacency),
                    reverse: rows_of(&r.adjacency),
                });
            }
        }
    }
    Ok(files)
}

/// Long-format edge table: one row per nonzero weight.
pub fn edge_table_csv(files: &[GraphFile]) -> String {
    let mut out = String::from("level,kind,direction,segment,source,target,weight\n");
    for f in files {
        for (dir, m) in [("forward", &f.forward), ("reverse", &f.reverse)] {
            for (i, row) in m.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        out.push_str(&format!(
                            "{},{},{dir},{},{},{},{w}\n",
                            f.level,
                            f.kind.name(),
                            f.segment,
                            f.nodes[i],
                            f.nodes[j]
                        ));
                    }
                }
            }
        }
    }
    out
}

pub fn graph_file_name(f: &GraphFile) -> String {
    format!("{}/{}_{:06}.json", f.level, f.kind.name(), f.segment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub span: Range<usize>,
    pub files: usize,
    /// Alignment of channel-level forward cross-time graphs with the planted
    /// graph over event windows inside the span.
    pub alignment: Option<f64>,
    pub alignment_note: Option<String>,
}

pub fn export_graphs(
    det: &Detector,
    set: &SegmentSet,
    span: Range<usize>,
    truth: Option<&PlantedTruth>,
    dir: &Path,
) -> Result<ExportSummary> {
    let files = span_graphs(det, set, span.clone())?;
    for f in &files {
        let path = dir.join(graph_file_name(f));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, serde_json::to_string(f)?).map_err(|e| Error::io(&path, e))?;
    }
    let table = dir.join("edges.csv");
    fs::write(&table, edge_table_csv(&files)).map_err(|e| Error::io(&table, e))?;

    let (alignment, alignment_note) = match truth {
        None => (None, Some("no planted truth available".to_string())),
        Some(truth) => {
            let graphs: Vec<DiffusionGraph> = files
                .iter()
                .filter(|f| f.level == Level::Channel && f.kind == GraphKind::Cross)
                .map(|f| to_mat(&f.forward).map(|adjacency| DiffusionGraph { adjacency }))
                .collect::<Result<_>>()?;
            let windows = truth.event_windows(set.config(), set.first_segment() + span.start, span.len());
            match truth_alignment_score(&graphs, truth, &windows) {
                Ok(a) => (Some(a), None),
                Err(Error::UndefinedMetric(m)) => (None, Some(m)),
                Err(e) => return Err(e),
            }
        }
    };
    let summary = ExportSummary {
        span,
        files: files.len(),
        alignment,
        alignment_note,
    };
    let path = dir.join("alignment.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Channel-level forward cross-time graphs for every segment of `set`,
/// computed window by window as at inference.
pub fn channel_cross_graphs(det: &Detector, set: &SegmentSet, window: usize) -> Result<Vec<DiffusionGraph>> {
    if det.ablation.no_graph {
        return Err(Error::InvalidConfig("the no_graph model has no diffusion graphs".into()));
    }
    let feats = det.features(set, true)?;
    let c = det.n_channels();
    let n = set.len();
    let mut graphs = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + window.max(1)).min(n);
        let reps = det.representations(&feats.slice(start * c, end * c))?;
        let [ch, _, _] = det.forward_window(&reps, true)?;
        graphs.extend(ch.forward.expect("graphs kept").cross_graphs);
        start = end;
    }
    Ok(graphs)
}

/// Alignment of the detector's cross-time graphs with the planted graph over
/// every event window of `set`.
pub fn alignment_on(det: &Detector, set: &SegmentSet, truth: &PlantedTruth, window: usize) -> Result<f64> {
    let graphs = channel_cross_graphs(det, set, window)?;
    let windows = truth.event_windows(set.config(), set.first_segment(), set.len());
    truth_alignment_score(&graphs, truth, &windows)
}

/// A detector with no training: random encoder and diffusion/discriminator
/// weights, and structure weights drawn per coordinate from U(0.5, 1.5)
/// instead of the all-ones initialization so that graphs differ between
/// draws.
pub fn random_detector(template: &Detector, seed: u64) -> Result<Detector> {
    let encoder = BcpcModel::init(template.bcpc.config.clone(), seed)?;
    let mut det = Detector::new(
        &encoder,
        template.channel_map.clone(),
        template.config,
        template.ablation,
        seed.wrapping_add(1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11_9e0);
    for dir in [Direction::Forward, Direction::Reverse] {
        let steps = *det.diffusion.steps(dir);
        for step in [steps.cross, steps.inner] {
            for id in [step.w_src, step.w_dst] {
                det.params.get_mut(id).mapv_inplace(|_| rng.random_range(0.5..1.5));
            }
        }
    }
    Ok(det)
}

// ---------------------------------------------------------------------------
// threshold sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta_inner: f64,
    pub theta_cross: f64,
    /// Channel F2 (percent) on the test set at the sweep ratio.
    pub f2: Option<f64>,
    pub auc: Option<f64>,
    /// Fraction of possible channel-level edges (cross plus off-diagonal
    /// inner, forward pass) that the point's own model keeps on the test set.
    pub density: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub theta_inner: Vec<f64>,
    pub theta_cross: Vec<f64>,
    /// Index into `points` of the best F2.
    pub best: Option<usize>,
    /// "interior", or which edges of the grid the best point touches.
    pub best_position: String,
    /// `edge_counts[i][j]`: edges of the reference model's raw scores kept
    /// at `theta_inner[i]`, `theta_cross[j]`.
    pub edge_counts: Vec<Vec<usize>>,
    pub monotone: bool,
}

impl SweepResult {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("theta_inner,theta_cross,f2,auc,density,reference_edges\n");
        let nc = self.theta_cross.len();
        for (k, p) in self.points.iter().enumerate() {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.theta_inner,
                p.theta_cross,
                opt(p.f2),
                opt(p.auc),
                p.density,
                self.edge_counts[k / nc][k % nc]
            ));
        }
        out
    }
}

/// Raw (unthresholded) channel-level scores of the forward pass over `set`:
/// cross-time `A0` and inner-time `A0`, one pair per segment.
pub fn raw_channel_scores(det: &Detector, set: &SegmentSet, window: usize) -> Result<Vec<(Mat, Mat)>> {
    let feats = det.features(set, true)?;
    let c = det.n_channels();
    let n = set.len();
    let steps = *det.diffusion.steps(Direction::Forward);
    let cw = steps.cross.weights(&det.params);
    let iw = steps.inner.weights(&det.params);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + window.max(1)).min(n);
        let reps = det.representations(&feats.slice(start * c, end * c))?;
        let [ch, _, _] = det.forward_window(&reps, true)?;
        let seq = ch.forward.expect("graphs kept");
        for t in 0..end - start {
            let r = reps.slice(ndarray::s![t * c..(t + 1) * c, ..]).to_owned();
            let prev = if t == 0 { Mat::zeros(r.dim()) } else { seq.h_inner[t - 1].clone() };
            let cross = score_matrix(&prev, &r, cw.w_src, cw.w_dst)?;
            let inner = score_matrix(&seq.h_cross[t], &seq.h_cross[t], iw.w_src, iw.w_dst)?;
            out.push((cross, inner));
        }
        start = end;
    }
    Ok(out)
}

/// Edges kept from fixed raw scores at the given thresholds; the inner-time
/// diagonal never counts.
pub fn count_edges(scores: &[(Mat, Mat)], theta_inner: f64, theta_cross: f64) -> usize {
    scores
        .iter()
        .map(|(cross, inner)| {
            let nc = cross.iter().filter(|&&v| v >= theta_cross).count();
            let ni = inner
                .indexed_iter()
                .filter(|&((i, j), &v)| i != j && v >= theta_inner)
                .count();
            nc + ni
        })
        .sum()
}

fn non_increasing(grid: &[Vec<usize>]) -> bool {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    (0..rows).all(|i| (0..cols).all(|j| (i + 1 >= rows || grid[i + 1][j] <= grid[i][j]) && (j + 1 >= cols || grid[i][j + 1] <= grid[i][j])))
}

fn grid_position(i: usize, j: usize, ni: usize, nj: usize) -> String {
    let mut edges = Vec::new();
    if ni > 1 && i == 0 {
        edges.push("lowest theta_inner");
    }
    if ni > 1 && i == ni - 1 {
        edges.push("highest theta_inner");
    }
    if nj > 1 && j == 0 {
        edges.push("lowest theta_cross");
    }
    if nj > 1 && j == nj - 1 {
        edges.push("highest theta_cross");
    }
    if edges.is_empty() {
        "interior".into()
    } else {
        format!("boundary ({})", edges.join(", "))
    }
}

fn sorted_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Train and evaluate one model per grid point on a shared pretrained
/// encoder. Grids must be strictly ascending. The point closest to the
/// configured thresholds serves as the reference for the edge-count grid.
pub fn sweep_thresholds(cfg: &RunConfig, prepared: &Prepared, pretrained: &BcpcModel) -> Result<SweepResult> {
    let gi = &cfg.sweep.theta_inner;
    let gc = &cfg.sweep.theta_cross;
    if gi.is_empty() || gc.is_empty() {
        return Err(Error::InvalidConfig("threshold grid is empty".into()));
    }
    if !sorted_ascending(gi) || !sorted_ascending(gc) {
        return Err(Error::InvalidConfig("threshold grids must be strictly ascending".into()));
    }
    if cfg.train.ablation.no_graph {
        return Err(Error::InvalidConfig("a threshold sweep needs the graph component".into()));
    }
    let window = cfg.eval.window;
    let closest = |g: &[f64], x: f64| {
        (0..g.len())
            .min_by(|&a, &b| (g[a] - x).abs().total_cmp(&(g[b] - x).abs()))
            .unwrap_or(0)
    };
    let reference = (
        closest(gi, cfg.model.diffusion.theta_inner),
        closest(gc, cfg.model.diffusion.theta_cross),
    );
    let mut points = Vec::with_capacity(gi.len() * gc.len());
    let mut ref_scores = None;
    for (i, &ti) in gi.iter().enumerate() {
        for (j, &tc) in gc.iter().enumerate() {
            let mut point_cfg = cfg.clone();
            point_cfg.model.diffusion.theta_inner = ti;
            point_cfg.model.diffusion.theta_cross = tc;
            let outcome = train_on(pretrained, prepared, &point_cfg)?;
            let det = &outcome.detector;
            let report = evaluate(det, &prepared.test, &[cfg.sweep.ratio], window, cfg.eval.seed, point_cfg.hash()?)?;
            let m = report.get(Level::Channel, cfg.sweep.ratio);
            let scores = raw_channel_scores(det, &prepared.test, window)?;
            let c = det.n_channels();
            let possible = scores.len() * (c * c + c * (c - 1));
            let density = count_edges(&scores, ti, tc) as f64 / possible.max(1) as f64;
            points.push(SweepPoint {
                theta_inner: ti,
                theta_cross: tc,
                f2: m.map(|m| m.f2),
                auc: m.map(|m| m.auc),
                density,
                best_epoch: outcome.best_epoch,
            });
            if (i, j) == reference {
                ref_scores = Some(scores);
            }
        }
    }
    let scores = ref_scores.expect("reference point is on the grid");
    let edge_counts: Vec<Vec<usize>> = gi
        .iter()
        .map(|&ti| gc.iter().map(|&tc| count_edges(&scores, ti, tc)).collect())
        .collect();
    let best = points
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.f2.map(|f| (k, f)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k);
    let best_position = match best {
        Some(k) => grid_position(k / gc.len(), k % gc.len(), gi.len(), gc.len()),
        None => "undefined (no grid point had a defined F2)".into(),
    };
    Ok(SweepResult {
        monotone: non_increasing(&edge_counts),
        points,
        theta_inner: gi.clone(),
        theta_cross: gc.clone(),
        best,
        best_position,
        edge_counts,
    })
}
