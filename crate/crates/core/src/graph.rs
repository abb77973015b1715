//! Learned diffusion graphs and directed graph-convolution propagation.
//!
//! Structure learning scores every (source, target) pair by the cosine of
//! feature-reweighted representations and keeps scores at or above a
//! threshold. Propagation averages each target with its weighted in-edges
//! and applies a linear map and ReLU. The recurrence alternates a
//! cross-time step (segment `t−1` → `t`) and an inner-time step (within
//! `t`), starting from an all-zero virtual state, and runs once forward and
//! once over the reversed segment order.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, Params};
use crate::tape::{Mat, Tape, Var};

/// Weighted directed adjacency `|v1| × |v2|`; entry `(i, j)` is the weight
/// of the edge from source `i` to target `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionGraph {
    pub adjacency: Mat,
}

impl DiffusionGraph {
    pub fn n_sources(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.adjacency.ncols()
    }

    /// Number of nonzero entries.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&w| w != 0.0).count()
    }
}

/// Plain-value view of one step's parameters.
#[derive(Debug, Clone, Copy)]
pub struct StepWeights<'a> {
    /// Source feature weights `W1` (`1 × d`).
    pub w_src: &'a Mat,
    /// Target feature weights `W2` (`1 × d`).
    pub w_dst: &'a Mat,
    /// Linear map `Θ` (`d × d`).
    pub transform: &'a Mat,
    pub threshold: f64,
}

/// Cosine scores `A0(i, j) = cos(W1 ⊙ h1(i), W2 ⊙ h2(j))`; a zero vector
/// scores 0 against everything.
pub fn score_matrix(h1: &Mat, h2: &Mat, w_src: &Mat, w_dst: &Mat) -> Result<Mat> {
    let d = h1.ncols();
    if h2.ncols() != d || w_src.dim() != (1, d) || w_dst.dim() != (1, d) {
        return Err(Error::Shape(format!(
            "features {}/{} columns with weights {:?}/{:?}",
            d,
            h2.ncols(),
            w_src.dim(),
            w_dst.dim()
        )));
    }
    let normalize = |h: &Mat, w: &Mat| {
        let mut x = h * w;
        for mut row in x.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        x
    };
    Ok(normalize(h1, w_src).dot(&normalize(h2, w_dst).t()))
}

/// Threshold-filtered cosine graph between `h1` (sources) and `h2` (targets).
pub fn learn_structure(h1: &Mat, h2: &Mat, step: StepWeights, exclude_diagonal: bool) -> Result<DiffusionGraph> {
    let mut a = score_matrix(h1, h2, step.w_src, step.w_dst)?;
    a.mapv_inplace(|x| if x >= step.threshold { x } else { 0.0 });
    if exclude_diagonal {
        a.diag_mut().fill(0.0);
    }
    Ok(DiffusionGraph { adjacency: a })
}

/// `h2'(j) = ReLU( (h2(j) + Σ_i A(i,j)·h1(i)) / (1 + Σ_i A(i,j)) · Θ )`.
pub fn diffuse(graph: &DiffusionGraph, h1: &Mat, h2: &Mat, transform: &Mat) -> Result<Mat> {
    let a = &graph.adjacency;
    if a.dim() != (h1.nrows(), h2.nrows()) || h1.ncols() != h2.ncols() || transform.nrows() != h2.ncols() {
        return Err(Error::Shape(format!(
            "adjacency {:?}, sources {:?}, targets {:?}, transform {:?}",
            a.dim(),
            h1.dim(),
            h2.dim(),
            transform.dim()
        )));
    }
    let num = h2 + &a.t().dot(h1);
    let den = a.sum_axis(Axis(0)).mapv(|s| 1.0 + s).insert_axis(Axis(1));
    Ok((num / den).dot(transform).mapv(|x| x.max(0.0)))
}

pub fn cross_time_step(h_in_prev: &Mat, r_t: &Mat, step: StepWeights) -> Result<(Mat, DiffusionGraph)> {
    let graph = learn_structure(h_in_prev, r_t, step, false)?;
    let out = diffuse(&graph, h_in_prev, r_t, step.transform)?;
    Ok((out, graph))
}

pub fn inner_time_step(h_cr: &Mat, step: StepWeights) -> Result<(Mat, DiffusionGraph)> {
    let graph = learn_structure(h_cr, h_cr, step, true)?;
    let out = diffuse(&graph, h_cr, h_cr, step.transform)?;
    Ok((out, graph))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Which steps of the recurrence run. A disabled step passes its input
/// through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSwitches {
    pub cross: bool,
    pub inner: bool,
}

impl Default for StepSwitches {
    fn default() -> Self {
        Self { cross: true, inner: true }
    }
}

/// States and graphs of one pass, indexed by original segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub h_cross: Vec<Mat>,
    pub h_inner: Vec<Mat>,
    pub cross_graphs: Vec<DiffusionGraph>,
    pub inner_graphs: Vec<DiffusionGraph>,
}

/// Run the cross/inner recurrence over `reps` (one `nodes × d` matrix per
/// segment). `Reverse` walks the segments last to first; outputs are still
/// indexed by original segment position.
pub fn run_sequence(
    reps: &[Mat],
    direction: Direction,
    cross: StepWeights,
    inner: StepWeights,
    switches: StepSwitches,
) -> Result<SequenceOutput> {
    let n = reps.len();
    if n == 0 {
        return Err(Error::Shape("empty segment sequence".into()));
    }
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Reverse => (0..n).rev().collect(),
    };
    let mut h_cross = vec![Mat::zeros((0, 0)); n];
    let mut h_inner = vec![Mat::zeros((0, 0)); n];
    let mut cross_graphs = vec![DiffusionGraph { adjacency: Mat::zeros((0, 0)) }; n];
    let mut inner_graphs = cross_graphs.clone();
    let mut prev = Mat::zeros(reps[order[0]].dim());
    for &t in &order {
        let r = &reps[t];
        let (hc, gc) = if switches.cross {
            cross_time_step(&prev, r, cross)?
        } else {
            (r.clone(), DiffusionGraph { adjacency: Mat::zeros((r.nrows(), r.nrows())) })
        };
        let (hi, gi) = if switches.inner {
            inner_time_step(&hc, inner)?
        } else {
            (hc.clone(), DiffusionGraph { adjacency: Mat::zeros((r.nrows(), r.nrows())) })
        };
        prev = hi.clone();
        h_cross[t] = hc;
        h_inner[t] = hi;
        cross_graphs[t] = gc;
        inner_graphs[t] = gi;
    }
    Ok(SequenceOutput {
        h_cross,
        h_inner,
        cross_graphs,
        inner_graphs,
    })
}

/// Parameters of one step type: `W1`, `W2`, `Θ` and the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionStep {
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub transform: ParamId,
    pub threshold: f64,
}

impl DiffusionStep {
    /// `W1 = W2 = 1`, `Θ = I + N(0, 0.1²/d)`.
    pub fn init(params: &mut Params, prefix: &str, d: usize, threshold: f64, rng: &mut impl Rng) -> Self {
        let w_src = params.add(format!("{prefix}.w_src"), Mat::ones((1, d)));
        let w_dst = params.add(format!("{prefix}.w_dst"), Mat::ones((1, d)));
        let transform = params.add_normal(format!("{prefix}.theta"), d, d, 0.1 / (d as f64).sqrt(), rng);
        *params.get_mut(transform) += &Mat::eye(d);
        Self {
            w_src,
            w_dst,
            transform,
            threshold,
        }
    }

    pub fn attach(params: &Params, prefix: &str, threshold: f64) -> Result<Self> {
        let find = |s: &str| {
            params
                .find(&format!("{prefix}.{s}"))
                .ok_or_else(|| Error::Malformed(format!("missing parameter {prefix}.{s}")))
        };
        Ok(Self {
            w_src: find("w_src")?,
            w_dst: find("w_dst")?,
            transform: find("theta")?,
            threshold,
        })
    }

    pub fn weights<'a>(&self, params: &'a Params) -> StepWeights<'a> {
        StepWeights {
            w_src: params.get(self.w_src),
            w_dst: params.get(self.w_dst),
            transform: params.get(self.transform),
            threshold: self.threshold,
        }
    }

    /// Tape version of structure learning followed by diffusion. Returns the
    /// diffused targets and the adjacency.
    pub fn apply(&self, tape: &mut Tape, binder: &mut Binder, h1: Var, h2: Var, exclude_diagonal: bool) -> (Var, Var) {
        let w1 = binder.var(tape, self.w_src);
        let w2 = binder.var(tape, self.w_dst);
        let theta = binder.var(tape, self.transform);
        let adjacency = tape_structure(tape, h1, h2, w1, w2, self.threshold, exclude_diagonal);
        let out = tape_diffuse(tape, adjacency, h1, h2, theta);
        (out, adjacency)
    }
}

pub fn tape_structure(tape: &mut Tape, h1: Var, h2: Var, w1: Var, w2: Var, threshold: f64, exclude_diagonal: bool) -> Var {
    let x1 = tape.mul_row(h1, w1);
    let x2 = tape.mul_row(h2, w2);
    let n1 = tape.row_normalize(x1);
    let n2 = tape.row_normalize(x2);
    let n2t = tape.transpose(n2);
    let scores = tape.matmul(n1, n2t);
    let a = tape.threshold(scores, threshold);
    if exclude_diagonal {
        tape.zero_diagonal(a)
    } else {
        a
    }
}

pub fn tape_diffuse(tape: &mut Tape, adjacency: Var, h1: Var, h2: Var, theta: Var) -> Var {
    let at = tape.transpose(adjacency);
    let msg = tape.matmul(at, h1);
    let num = tape.add(h2, msg);
    let deg = tape.sum_rows(adjacency);
    let deg = tape.add_scalar(deg, 1.0);
    let deg = tape.transpose(deg);
    let mean = tape.div_col(num, deg);
    let lin = tape.matmul(mean, theta);
    tape.relu(lin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionSteps {
    pub cross: DiffusionStep,
    pub inner: DiffusionStep,
}

/// Thresholds and sharing options for the diffusion component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub theta_inner: f64,
    pub theta_cross: f64,
    /// Reverse pass reuses the forward parameters.
    pub share_directions: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            theta_inner: 0.1,
            theta_cross: 0.05,
            share_directions: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("theta_inner", self.theta_inner), ("theta_cross", self.theta_cross)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {t} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Forward and reverse parameter sets for both step types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphDiffusion {
    pub forward: DirectionSteps,
    pub reverse: DirectionSteps,
    pub switches: StepSwitches,
}

impl GraphDiffusion {
    pub fn init(params: &mut Params, d: usize, config: &DiffusionConfig, switches: StepSwitches, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut make = |dir: &str, rng: &mut _| DirectionSteps {
            cross: DiffusionStep::init(params, &format!("diffusion.{dir}.cross"), d, config.theta_cross, rng),
            inner: DiffusionStep::init(params, &format!("diffusion.{dir}.inner"), d, config.theta_inner, rng),
        };
        let forward = make("forward", rng);
        let reverse = if config.share_directions { forward } else { make("reverse", rng) };
        Ok(Self {
            forward,
            reverse,
            switches,
        })
    }

    pub fn attach(params: &Params, config: &DiffusionConfig, switches: StepSwitches) -> Result<Self> {
        let attach = |dir: &str| -> Result<DirectionSteps> {
            Ok(DirectionSteps {
                cross: DiffusionStep::attach(params, &format!("diffusion.{dir}.cross"), config.theta_cross)?,
                inner: DiffusionStep::attach(params, &format!("diffusion.{dir}.inner"), config.theta_inner)?,
            })
        };
        let forward = attach("forward")?;
        let reverse = if config.share_directions { forward } else { attach("reverse")? };
        Ok(Self {
            forward,
            reverse,
            switches,
        })
    }

    pub fn steps(&self, direction: Direction) -> &DirectionSteps {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Reverse => &self.reverse,
        }
    }

    /// Override both thresholds (parameters unchanged).
    pub fn with_thresholds(mut self, theta_inner: f64, theta_cross: f64) -> Self {
        for steps in [&mut self.forward, &mut self.reverse] {
            steps.inner.threshold = theta_inner;
            steps.cross.threshold = theta_cross;
        }
        self
    }

    /// Plain-value pass over `reps`.
    pub fn run(&self, params: &Params, reps: &[Mat], direction: Direction) -> Result<SequenceOutput> {
        let steps = self.steps(direction);
        run_sequence(reps, direction, steps.cross.weights(params), steps.inner.weights(params), self.switches)
    }

    /// Tape pass; returns `h_in` per segment in original order.
    pub fn run_tape(&self, tape: &mut Tape, binder: &mut Binder, reps: &[Var], direction: Direction) -> Vec<Var> {
        let steps = *self.steps(direction);
        let n = reps.len();
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..n).collect(),
            Direction::Reverse => (0..n).rev().collect(),
        };
        let mut out = vec![None; n];
        let mut prev: Option<Var> = None;
        for &t in &order {
            let r = reps[t];
            let hc = if self.switches.cross {
                let h_prev = match prev {
                    Some(p) => p,
                    None => {
                        let z = Mat::zeros(tape.value(r).dim());
                        tape.leaf(z)
                    }
                };
                steps.cross.apply(tape, binder, h_prev, r, false).0
            } else {
                r
            };
            let hi = if self.switches.inner {
                steps.inner.apply(tape, binder, hc, hc, true).0
            } else {
                hc
            };
            prev = Some(hi);
            out[t] = Some(hi);
        }
        out.into_iter().map(|v| v.expect("every segment visited")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(d: usize) -> Mat {
        Mat::ones((1, d))
    }

    fn weights<'a>(w: &'a Mat, t: &'a Mat, threshold: f64) -> StepWeights<'a> {
        StepWeights {
            w_src: w,
            w_dst: w,
            transform: t,
            threshold,
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_vectors_full_weight() {
        let h = array![[0.3, -1.2, 2.0]];
        let (w, t) = (ones(3), Mat::eye(3));
        let g = learn_structure(&h, &h, weights(&w, &t, 0.5), false).unwrap();
        assert_abs_diff_eq!(g.adjacency[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_vectors_no_edge() {
        let (w, t) = (ones(2), Mat::eye(2));
        let g = learn_structure(&array![[1.0, 0.0]], &array![[0.0, 2.0]], weights(&w, &t, 0.1), false).unwrap();
        assert_eq!(g.adjacency[[0, 0]], 0.0);
    }

    #[test]
    fn zero_vectors_score_zero() {
        let (w, t) = (ones(2), Mat::eye(2));
        let s = score_matrix(&Mat::zeros((2, 2)), &array![[1.0, 1.0], [0.0, 0.0]], &w, &t.slice(ndarray::s![0..1, ..]).to_owned()).unwrap();
        assert!(s.iter().all(|&x| x == 0.0 && x.is_finite()));
    }

    #[test]
    fn empty_graph_passes_through() {
        let h2 = array![[0.5, 1.0], [2.0, 0.0]];
        let g = DiffusionGraph { adjacency: Mat::zeros((3, 2)) };
        let out = diffuse(&g, &Mat::ones((3, 2)), &h2, &Mat::eye(2)).unwrap();
        assert_eq!(out, h2);
    }

    #[test]
    fn single_edge_averages() {
        let h1 = array![[1.0, 3.0], [9.0, 9.0]];
        let h2 = array![[3.0, 1.0]];
        let g = DiffusionGraph { adjacency: array![[1.0], [0.0]] };
        let out = diffuse(&g, &h1, &h2, &Mat::eye(2)).unwrap();
        assert_eq!(out, array![[2.0, 2.0]]);
    }

    #[test]
    fn virtual_bootstrap_is_empty_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rand_mat(&mut rng, 4, 3);
        let theta = rand_mat(&mut rng, 3, 3);
        let w = ones(3);
        let (h, g) = cross_time_step(&Mat::zeros((4, 3)), &r, weights(&w, &theta, 0.05)).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(h, r.dot(&theta).mapv(|x| x.max(0.0)));
    }

    #[test]
    fn self_continuity_with_high_threshold() {
        // distinct directions per channel: only self pairs clear 0.99
        let r = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        let w = ones(3);
        let eye = Mat::eye(3);
        let (h, g) = cross_time_step(&r, &r, weights(&w, &eye, 0.99)).unwrap();
        assert_eq!(g.adjacency, Mat::eye(3));
        assert_eq!(h, r);
    }

    #[test]
    fn single_channel_inner_is_linear_map() {
        let h = array![[0.5, -0.25]];
        let theta = array![[1.0, 2.0], [0.0, 1.0]];
        let w = ones(2);
        let (out, g) = inner_time_step(&h, weights(&w, &theta, 0.1)).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(out, h.dot(&theta).mapv(|x| x.max(0.0)));
    }

    #[test]
    fn identical_channels_inner_average() {
        let h = array![[0.2, 0.7], [0.2, 0.7]];
        let w = ones(2);
        let eye = Mat::eye(2);
        let (out, g) = inner_time_step(&h, weights(&w, &eye, 0.5)).unwrap();
        assert_eq!(g.edge_count(), 2);
        for (a, b) in out.iter().zip(h.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_segment_sequence_unrolls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rand_mat(&mut rng, 5, 4);
        let tc = rand_mat(&mut rng, 4, 4);
        let ti = rand_mat(&mut rng, 4, 4);
        let (wc, wi) = (rand_mat(&mut rng, 1, 4), rand_mat(&mut rng, 1, 4));
        let cross = weights(&wc, &tc, 0.05);
        let inner = weights(&wi, &ti, 0.1);
        let out = run_sequence(std::slice::from_ref(&r), Direction::Forward, cross, inner, StepSwitches::default()).unwrap();
        let (hc, _) = cross_time_step(&Mat::zeros((5, 4)), &r, cross).unwrap();
        let (hi, _) = inner_time_step(&hc, inner).unwrap();
        assert_eq!(out.h_inner[0], hi);
    }

    #[test]
    fn reverse_of_reversed_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps: Vec<Mat> = (0..6).map(|_| rand_mat(&mut rng, 4, 3).mapv(f64::abs)).collect();
        let (wc, wi) = (rand_mat(&mut rng, 1, 3), rand_mat(&mut rng, 1, 3));
        let (tc, ti) = (rand_mat(&mut rng, 3, 3), rand_mat(&mut rng, 3, 3));
        let cross = weights(&wc, &tc, 0.05);
        let inner = weights(&wi, &ti, 0.1);
        let fwd = run_sequence(&reps, Direction::Forward, cross, inner, StepSwitches::default()).unwrap();
        let reversed: Vec<Mat> = reps.iter().rev().cloned().collect();
        let rev = run_sequence(&reversed, Direction::Reverse, cross, inner, StepSwitches::default()).unwrap();
        let mut back = rev.h_inner.clone();
        back.reverse();
        assert_eq!(back, fwd.h_inner);
    }

    #[test]
    fn tape_pass_matches_plain_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::new();
        let gd = GraphDiffusion::init(&mut params, 3, &DiffusionConfig::default(), StepSwitches::default(), &mut rng).unwrap();
        let reps: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, 5, 3)).collect();
        for dir in [Direction::Forward, Direction::Reverse] {
            let plain = gd.run(&params, &reps, dir).unwrap();
            let mut tape = Tape::new();
            let mut b = Binder::new(&params);
            let vars: Vec<Var> = reps.iter().map(|r| tape.leaf(r.clone())).collect();
            let outs = gd.run_tape(&mut tape, &mut b, &vars, dir);
            for (v, m) in outs.iter().zip(&plain.h_inner) {
                for (x, y) in tape.value(*v).iter().zip(m.iter()) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn shared_directions_reuse_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        let cfg = DiffusionConfig {
            share_directions: true,
            ..Default::default()
        };
        let gd = GraphDiffusion::init(&mut params, 3, &cfg, StepSwitches::default(), &mut rng).unwrap();
        assert_eq!(gd.forward, gd.reverse);
        let mut params2 = Params::new();
        let gd2 = GraphDiffusion::init(&mut params2, 3, &DiffusionConfig::default(), StepSwitches::default(), &mut rng).unwrap();
        assert_ne!(gd2.forward.cross.w_src, gd2.reverse.cross.w_src);
    }

    #[test]
    fn thresholds_must_be_positive() {
        let cfg = DiffusionConfig {
            theta_cross: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn disabled_steps_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reps: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 4, 3)).collect();
        let w = ones(3);
        let t = Mat::eye(3);
        let off = StepSwitches { cross: false, inner: false };
        let out = run_sequence(&reps, Direction::Forward, weights(&w, &t, 0.1), weights(&w, &t, 0.1), off).unwrap();
        assert_eq!(out.h_inner, reps);
    }

    proptest::proptest! {
        #[test]
        fn higher_threshold_keeps_a_subset(
            seed in 0u64..1000,
            lo in 0.0f64..1.0,
            gap in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h1 = rand_mat(&mut rng, 5, 3);
            let h2 = rand_mat(&mut rng, 4, 3);
            let (w1, w2, t) = (rand_mat(&mut rng, 1, 3), rand_mat(&mut rng, 1, 3), Mat::eye(3));
            let step = |th| StepWeights { w_src: &w1, w_dst: &w2, transform: &t, threshold: th };
            let a = learn_structure(&h1, &h2, step(lo), false).unwrap();
            let b = learn_structure(&h1, &h2, step(lo + gap), false).unwrap();
            for (x, y) in a.adjacency.iter().zip(b.adjacency.iter()) {
                proptest::prop_assert!(*y == 0.0 || *x == *y);
            }
            proptest::prop_assert!(b.edge_count() <= a.edge_count());
        }

        #[test]
        fn scores_ignore_positive_node_scaling(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h1 = rand_mat(&mut rng, 3, 4);
            let h2 = rand_mat(&mut rng, 3, 4);
            let (w1, w2) = (rand_mat(&mut rng, 1, 4), rand_mat(&mut rng, 1, 4));
            let mut scaled = h1.clone();
            scaled.row_mut(1).mapv_inplace(|v| v * c);
            let a = score_matrix(&h1, &h2, &w1, &w2).unwrap();
            let b = score_matrix(&scaled, &h2, &w1, &w2).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_diffusion_is_a_weighted_average(seed in 0u64..1000, th in 0.0f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h1 = rand_mat(&mut rng, 5, 3).mapv(f64::abs);
            let h2 = rand_mat(&mut rng, 4, 3).mapv(f64::abs);
            let w = ones(3);
            let eye = Mat::eye(3);
            let g = learn_structure(&h1, &h2, weights(&w, &eye, th), false).unwrap();
            let out = diffuse(&g, &h1, &h2, &eye).unwrap();
            for j in 0..4 {
                for k in 0..3 {
                    let mut lo = h2[[j, k]];
                    let mut hi = h2[[j, k]];
                    for i in 0..5 {
                        if g.adjacency[[i, j]] > 0.0 {
                            lo = lo.min(h1[[i, k]]);
                            hi = hi.max(h1[[i, k]]);
                        }
                    }
                    proptest::prop_assert!(out[[j, k]] >= lo - 1e-12 && out[[j, k]] <= hi + 1e-12);
                }
            }
        }
    }
}
