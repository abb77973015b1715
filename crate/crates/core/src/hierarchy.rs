//! Channel → region → patient pooling, the shared discriminator and the
//! joint three-level objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChannelMap;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, Params};
use crate::tape::{self, Mat, Tape, Var};

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Coordinate-wise max over the member channels of each region.
pub fn pool_to_region(r: &Mat, map: &ChannelMap) -> Result<Mat> {
    if r.nrows() != map.n_channels() {
        return Err(Error::Mapping(format!(
            "{} channel rows for a map of {} channels",
            r.nrows(),
            map.n_channels()
        )));
    }
    pool_groups(r, &map.groups())
}

/// Coordinate-wise max over all regions.
pub fn pool_to_patient(r: &Mat) -> Result<Mat> {
    pool_groups(r, &[(0..r.nrows()).collect()])
}

fn pool_groups(r: &Mat, groups: &[Vec<usize>]) -> Result<Mat> {
    let mut out = Mat::zeros((groups.len(), r.ncols()));
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Mapping(format!("group {g} has no members")));
        }
        for j in 0..r.ncols() {
            out[[g, j]] = members.iter().map(|&m| r[[m, j]]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(out)
}

/// Two-layer MLP `[h_fwd ‖ h_rev ‖ r] → ReLU → sigmoid`, shared by all levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d: usize,
}

impl Discriminator {
    pub fn init(params: &mut Params, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w1 = params.add_normal("disc.w1", 3 * d, hidden, (2.0 / (3 * d) as f64).sqrt(), rng);
        let b1 = params.add_zeros("disc.b1", 1, hidden);
        let w2 = params.add_normal("disc.w2", hidden, 1, (1.0 / hidden as f64).sqrt(), rng);
        let b2 = params.add_zeros("disc.b2", 1, 1);
        Self { w1, b1, w2, b2, d }
    }

    pub fn attach(params: &Params) -> Result<Self> {
        let find = |s: &str| {
            params
                .find(&format!("disc.{s}"))
                .ok_or_else(|| Error::Malformed(format!("missing parameter disc.{s}")))
        };
        let w1 = find("w1")?;
        let d = params.get(w1).nrows() / 3;
        Ok(Self {
            w1,
            b1: find("b1")?,
            w2: find("w2")?,
            b2: find("b2")?,
            d,
        })
    }

    /// Probabilities (`nodes × 1`) for a `nodes × 3d` input.
    pub fn forward(&self, params: &Params, x: &Mat) -> Result<Mat> {
        if x.ncols() != 3 * self.d {
            return Err(Error::Shape(format!("discriminator input has {} columns, expected {}", x.ncols(), 3 * self.d)));
        }
        let h = (x.dot(params.get(self.w1)) + params.get(self.b1)).mapv(|v| v.max(0.0));
        Ok((h.dot(params.get(self.w2)) + params.get(self.b2)).mapv(tape::sigmoid))
    }

    pub fn forward_tape(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let w1 = binder.var(tape, self.w1);
        let b1 = binder.var(tape, self.b1);
        let w2 = binder.var(tape, self.w2);
        let b2 = binder.var(tape, self.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2);
        let o = tape.add_row(o, b2);
        tape.sigmoid(o)
    }
}

/// `ŷ = D([h_fwd ‖ h_rev ‖ r])` per node.
pub fn predict(disc: &Discriminator, params: &Params, h_fwd: &Mat, h_rev: &Mat, r: &Mat) -> Result<Mat> {
    if h_fwd.dim() != r.dim() || h_rev.dim() != r.dim() {
        return Err(Error::Shape(format!(
            "h_fwd {:?}, h_rev {:?} and r {:?} must agree",
            h_fwd.dim(),
            h_rev.dim(),
            r.dim()
        )));
    }
    let x = ndarray::concatenate(ndarray::Axis(1), &[h_fwd.view(), h_rev.view(), r.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    disc.forward(params, &x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelWeights {
    pub channel: f64,
    pub region: f64,
    pub patient: f64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        Self {
            channel: 1.0,
            region: 1.0,
            patient: 1.0,
        }
    }
}

impl LevelWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.channel, self.region, self.patient]
    }
}

/// `w_ch·L_ch + w_br·L_br + w_pa·L_pa`, each term summed BCE over segments
/// and nodes. Predictions and labels are indexed channel, region, patient.
pub fn joint_loss(preds: [&Mat; 3], labels: [&Mat; 3], weights: LevelWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((p, y), w) in preds.iter().zip(labels.iter()).zip(weights.as_array()) {
        if p.dim() != y.dim() {
            return Err(Error::Shape(format!("predictions {:?} vs labels {:?}", p.dim(), y.dim())));
        }
        total += w * tape::bce_sum(p, y, BCE_EPS);
    }
    Ok(total)
}
