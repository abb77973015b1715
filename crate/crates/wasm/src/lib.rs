//! Browser demo: synthesize a short recording, explore how the two graph
//! thresholds prune a cosine diffusion graph, and inspect the BCPC mask.
//!
//! Every export takes plain numbers and returns a JSON string so the page
//! needs no bindings beyond the generated glue.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use seegdiff::bcpc::{build_mask, signed_position, BcpcConfig, BcpcModel};
use seegdiff::data::{segment, SegmentationConfig};
use seegdiff::graph::{learn_structure, score_matrix, Direction, StepWeights};
use seegdiff::model::{Ablation, Detector, ModelConfig};
use seegdiff::synth::{generate, ScenarioConfig, Waveform};
use seegdiff::tape::Mat;

const DEMO_RATE: f64 = 128.0;
const PLOT_POINTS: usize = 600;

fn scenario(seed: u64, event_rate: f64, waveform: &str) -> Result<ScenarioConfig, String> {
    let waveform = match waveform {
        "spike-train" => Waveform::SpikeTrain,
        "high-frequency-burst" => Waveform::HighFrequencyBurst,
        _ => Waveform::SpikeAndWave,
    };
    Ok(ScenarioConfig {
        sample_rate: DEMO_RATE,
        duration_seconds: 20.0,
        event_rate,
        waveform,
        seed,
        ..ScenarioConfig::default()
    })
}

fn to_json(v: Value) -> String {
    v.to_string()
}

fn err(e: impl std::fmt::Display) -> String {
    to_json(json!({ "error": e.to_string() }))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Downsampled traces, labels and the event log of a 20 s recording.
#[wasm_bindgen]
pub fn synth_preview(seed: u32, event_rate: f64, waveform: &str) -> String {
    let cfg = match scenario(seed as u64, event_rate, waveform) {
        Ok(c) => c,
        Err(e) => return err(e),
    };
    let (rec, truth) = match generate(&cfg) {
        Ok(x) => x,
        Err(e) => return err(e),
    };
    let n = rec.n_points();
    let step = n.div_ceil(PLOT_POINTS).max(1);
    let traces: Vec<Vec<f32>> = rec
        .samples()
        .columns()
        .into_iter()
        .map(|c| c.iter().step_by(step).copied().collect())
        .collect();
    let labels: Vec<Vec<u8>> = rec
        .labels()
        .columns()
        .into_iter()
        .map(|c| c.iter().step_by(step).copied().collect())
        .collect();
    to_json(json!({
        "channels": rec.channel_map().channels(),
        "seconds_per_point": step as f64 / DEMO_RATE,
        "traces": traces,
        "labels": labels,
        "events": truth.events.iter().map(|e| json!({
            "onset_channel": e.onset_channel,
            "onset_time": e.onset_time,
            "duration": e.duration,
        })).collect::<Vec<_>>(),
        "positive_ratio": rec.positive_ratio(),
    }))
}

fn demo_bcpc() -> BcpcConfig {
    BcpcConfig {
        local_window: 4,
        n_positions: 16,
        conv_kernels: vec![2, 2],
        conv_channels: vec![8],
        d_local: 16,
        d_context: 16,
        d_repr: 16,
        horizon: 3,
        n_negatives: 7,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
    }
}

/// Cross-time and inner-time graphs of one segment under an untrained
/// detector, thresholded at the given values, plus edge counts over a
/// threshold ramp so the pruning curve can be drawn.
#[wasm_bindgen]
pub fn threshold_explorer(seed: u32, segment_index: u32, theta_inner: f64, theta_cross: f64) -> String {
    let run = || -> seegdiff::Result<Value> {
        let cfg = scenario(seed as u64, 360.0, "spike-and-wave").map_err(seegdiff::Error::InvalidConfig)?;
        let (rec, _) = generate(&cfg)?;
        let bcpc = demo_bcpc();
        let k = bcpc.segment_len();
        let set = segment(&rec, SegmentationConfig { window_k: k, stride_l: k / 2 })?;
        let t = (segment_index as usize).min(set.len().saturating_sub(1)).max(1);
        let enc = BcpcModel::init(bcpc, seed as u64)?;
        let det = Detector::new(&enc, rec.channel_map().clone(), ModelConfig::default(), Ablation::default(), seed as u64)?;
        let window = set.slice(t - 1..t + 1)?;
        let reps = det.representations(&det.features(&window, true)?)?;
        let [ch, _, _] = det.forward_window(&reps, true)?;
        let seq = ch.forward.expect("graphs kept");
        let steps = *det.diffusion.steps(Direction::Forward);
        let cw = steps.cross.weights(&det.params);
        let iw = steps.inner.weights(&det.params);
        let c = det.n_channels();
        let r_t = reps.slice(ndarray::s![c..2 * c, ..]).to_owned();
        let cross_raw = score_matrix(&seq.h_inner[0], &r_t, cw.w_src, cw.w_dst)?;
        let inner_raw = score_matrix(&seq.h_cross[1], &seq.h_cross[1], iw.w_src, iw.w_dst)?;
        let cross = learn_structure(&seq.h_inner[0], &r_t, StepWeights { threshold: theta_cross, ..cw }, false)?;
        let inner =
            learn_structure(&seq.h_cross[1], &seq.h_cross[1], StepWeights { threshold: theta_inner, ..iw }, true)?;
        let ramp: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
        let count = |m: &Mat, th: f64, diag: bool| {
            m.indexed_iter().filter(|&((i, j), &v)| (diag || i != j) && v >= th).count()
        };
        Ok(json!({
            "segment": t,
            "labels": set.channel_labels().row(t).to_vec(),
            "channels": rec.channel_map().channels(),
            "cross": rows(&cross.adjacency),
            "inner": rows(&inner.adjacency),
            "cross_edges": cross.edge_count(),
            "inner_edges": inner.edge_count(),
            "ramp": ramp,
            "cross_curve": ramp.iter().map(|&th| count(&cross_raw, th, true)).collect::<Vec<_>>(),
            "inner_curve": ramp.iter().map(|&th| count(&inner_raw, th, false)).collect::<Vec<_>>(),
            "segments": set.len(),
        }))
    };
    match run() {
        Ok(v) => to_json(v),
        Err(e) => err(e),
    }
}

/// Attention mask over signed positions for `L` positions.
#[wasm_bindgen]
pub fn bcpc_mask(l: u32) -> String {
    let l = l as usize;
    match build_mask(l) {
        Ok(m) => to_json(json!({
            "positions": (0..l).map(|i| signed_position(i, l)).collect::<Vec<_>>(),
            "allowed": m.allowed().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        })),
        Err(e) => err(e),
    }
}
