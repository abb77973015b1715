//! Bidirectional contrastive predictive coding.
//!
//! A segment of `L · local_window` points is embedded into `L` local
//! features by a strided convolution stack. Positions carry signed indices
//! `−L/2 … −1, 1 … L/2` (no zero), stored left to right. A transformer whose
//! attention mask lets position `t` see only positions `j` with `|j| ≤ |t|`
//! produces a context `z_t` that grows outward from the centre in both
//! directions; `z_t` is trained to pick out the local feature `p` steps
//! further out (`t + sgn(t)·p`) from a pool of in-batch negatives.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{cosine_lr, Adam, AdamConfig, Binder, ParamId, Params};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcpcConfig {
    /// Raw points per local-feature position.
    pub local_window: usize,
    /// Positions per segment (`L`, even).
    pub n_positions: usize,
    /// Convolution kernel sizes; kernel = stride, product = `local_window`.
    pub conv_kernels: Vec<usize>,
    /// Output channels of every convolution except the last.
    pub conv_channels: Vec<usize>,
    pub d_local: usize,
    pub d_context: usize,
    pub d_repr: usize,
    /// Prediction horizon `P`.
    pub horizon: usize,
    /// Negatives per prediction (`|N_t| − 1`).
    pub n_negatives: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for BcpcConfig {
    fn default() -> Self {
        Self {
            local_window: 8,
            n_positions: 16,
            conv_kernels: vec![4, 2],
            conv_channels: vec![32],
            d_local: 64,
            d_context: 64,
            d_repr: 64,
            horizon: 4,
            n_negatives: 15,
            layers: 1,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

impl BcpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let l = self.n_positions;
        if l < 4 || l % 2 != 0 {
            return bad(format!("n_positions must be even and at least 4, got {l}"));
        }
        if self.horizon < 1 || self.horizon > l / 2 - 1 {
            return bad(format!("horizon {} outside 1..={} for L={l}", self.horizon, l / 2 - 1));
        }
        if self.n_negatives < 1 {
            return bad("n_negatives must be at least 1".into());
        }
        if self.conv_kernels.is_empty() || self.conv_kernels.iter().product::<usize>() != self.local_window {
            return bad(format!(
                "conv kernels {:?} must multiply to local_window {}",
                self.conv_kernels, self.local_window
            ));
        }
        if self.conv_channels.len() + 1 != self.conv_kernels.len() {
            return bad("conv_channels needs one entry per convolution except the last".into());
        }
        if self.heads == 0 || self.d_context % self.heads != 0 {
            return bad(format!("d_context {} not divisible by {} heads", self.d_context, self.heads));
        }
        if [self.d_local, self.d_context, self.d_repr, self.ffn_dim].contains(&0) {
            return bad("feature dimensions must be positive".into());
        }
        Ok(())
    }

    /// Segment length in raw points.
    pub fn segment_len(&self) -> usize {
        self.n_positions * self.local_window
    }

    /// `|N_t|`.
    pub fn candidates(&self) -> usize {
        self.n_negatives + 1
    }
}

/// Signed index of storage position `i` in a sequence of `l` positions.
pub fn signed_position(i: usize, l: usize) -> i64 {
    let half = (l / 2) as i64;
    let i = i as i64;
    if i < half {
        i - half
    } else {
        i - half + 1
    }
}

/// Storage position of signed index `t`.
pub fn storage_index(t: i64, l: usize) -> usize {
    let half = (l / 2) as i64;
    if t < 0 {
        (t + half) as usize
    } else {
        (t + half - 1) as usize
    }
}

/// Attention mask over signed positions: row `t` sees `j` iff `|j| ≤ |t|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    allowed: Array2<bool>,
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allowed(&self) -> &Array2<bool> {
        &self.allowed
    }

    /// Whether signed position `t` may attend to signed position `j`.
    pub fn permits(&self, t: i64, j: i64) -> bool {
        let l = self.len();
        self.allowed[[storage_index(t, l), storage_index(j, l)]]
    }

    /// Signed positions visible from row `t`, ascending.
    pub fn visible(&self, t: i64) -> Vec<i64> {
        let l = self.len();
        let row = storage_index(t, l);
        (0..l)
            .filter(|&j| self.allowed[[row, j]])
            .map(|j| signed_position(j, l))
            .collect()
    }
}

pub fn build_mask(l: usize) -> Result<MaskMatrix> {
    if l < 4 || l % 2 != 0 {
        return Err(Error::InvalidConfig(format!("mask size must be even and at least 4, got {l}")));
    }
    let allowed = Array2::from_shape_fn((l, l), |(i, j)| {
        signed_position(j, l).abs() <= signed_position(i, l).abs()
    });
    Ok(MaskMatrix { allowed })
}

/// One prediction term of the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    /// Context row (global row index in the batch).
    pub row: usize,
    /// Step `p`, 1-based.
    pub step: usize,
    /// Target row; candidate 0.
    pub target: usize,
    pub negatives: Vec<usize>,
    /// `1 / (P_t · number of contributing positions)`.
    pub weight: f64,
}

/// Plan every `(segment, t, p)` term for a batch of `batch` segments and draw
/// negatives uniformly from the other rows of the batch.
pub fn plan_terms(config: &BcpcConfig, batch: usize, rng: &mut impl Rng) -> Result<Vec<Term>> {
    let l = config.n_positions;
    let half = (l / 2) as i64;
    let total_rows = batch * l;
    if total_rows < config.n_negatives + 1 {
        return Err(Error::SamplingInfeasible(format!(
            "negative pool of {} rows cannot supply {} negatives",
            total_rows.saturating_sub(1),
            config.n_negatives
        )));
    }
    let p_max = config.horizon as i64;
    let contributing: Vec<(i64, i64)> = (0..l)
        .map(|i| signed_position(i, l))
        .filter_map(|t| {
            let in_range = (1..=p_max).filter(|p| t.abs() + p <= half).count() as i64;
            (in_range > 0).then_some((t, in_range))
        })
        .collect();
    let n_contrib = (batch * contributing.len()) as f64;

    let mut terms = Vec::new();
    for b in 0..batch {
        for &(t, p_t) in &contributing {
            let row = b * l + storage_index(t, l);
            for p in 1..=p_t {
                let target = b * l + storage_index(t + t.signum() * p, l);
                let negatives = index::sample(rng, total_rows - 1, config.n_negatives)
                    .into_iter()
                    .map(|i| if i >= target { i + 1 } else { i })
                    .collect();
                terms.push(Term {
                    row,
                    step: p as usize,
                    target,
                    negatives,
                    weight: 1.0 / (p_t as f64 * n_contrib),
                });
            }
        }
    }
    Ok(terms)
}

/// Parameter layout of the encoder, autoregressor, scorers and projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BcpcNet {
    pub config: BcpcConfig,
    conv: Vec<(ParamId, ParamId)>,
    input: (ParamId, ParamId),
    positional: ParamId,
    blocks: Vec<Block>,
    scorers: Vec<ParamId>,
    projection: (ParamId, ParamId),
    mask: MaskMatrix,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn1: (ParamId, ParamId),
    ffn2: (ParamId, ParamId),
}

impl BcpcNet {
    /// Register all parameters under the `bcpc.` prefix. Bilinear scorers
    /// start at zero; biases start at zero.
    pub fn init(params: &mut Params, config: BcpcConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut in_ch = 1;
        let outs: Vec<usize> = config.conv_channels.iter().copied().chain([config.d_local]).collect();
        for (i, (&k, &out)) in config.conv_kernels.iter().zip(&outs).enumerate() {
            let fan_in = k * in_ch;
            let w = params.add_normal(format!("bcpc.conv{i}.w"), fan_in, out, (2.0 / fan_in as f64).sqrt(), rng);
            let b = params.add_zeros(format!("bcpc.conv{i}.b"), 1, out);
            conv.push((w, b));
            in_ch = out;
        }
        let (dl, dc) = (config.d_local, config.d_context);
        let input = (
            params.add_normal("bcpc.in.w", dl, dc, 1.0 / (dl as f64).sqrt(), rng),
            params.add_zeros("bcpc.in.b", 1, dc),
        );
        let positional = params.add_normal("bcpc.pos", config.n_positions, dc, 0.1, rng);
        let sd = 1.0 / (dc as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|i| Block {
                wq: params.add_normal(format!("bcpc.block{i}.wq"), dc, dc, sd, rng),
                wk: params.add_normal(format!("bcpc.block{i}.wk"), dc, dc, sd, rng),
                wv: params.add_normal(format!("bcpc.block{i}.wv"), dc, dc, sd, rng),
                wo: params.add_normal(format!("bcpc.block{i}.wo"), dc, dc, sd * 0.5, rng),
                ffn1: (
                    params.add_normal(format!("bcpc.block{i}.ffn1.w"), dc, config.ffn_dim, (2.0 / dc as f64).sqrt(), rng),
                    params.add_zeros(format!("bcpc.block{i}.ffn1.b"), 1, config.ffn_dim),
                ),
                ffn2: (
                    params.add_normal(
                        format!("bcpc.block{i}.ffn2.w"),
                        config.ffn_dim,
                        dc,
                        0.5 / (config.ffn_dim as f64).sqrt(),
                        rng,
                    ),
                    params.add_zeros(format!("bcpc.block{i}.ffn2.b"), 1, dc),
                ),
            })
            .collect();
        let scorers = (1..=config.horizon)
            .map(|p| params.add_zeros(format!("bcpc.score{p}"), dl, dc))
            .collect();
        let projection = (
            params.add_normal("bcpc.proj.w", dc, config.d_repr, sd, rng),
            params.add_zeros("bcpc.proj.b", 1, config.d_repr),
        );
        let mask = build_mask(config.n_positions)?;
        Ok(Self {
            config,
            conv,
            input,
            positional,
            blocks,
            scorers,
            projection,
            mask,
        })
    }

    /// Re-attach to parameters already present in `params` (e.g. loaded from
    /// a checkpoint), looking them up by name.
    pub fn attach(params: &Params, config: BcpcConfig) -> Result<Self> {
        config.validate()?;
        let find = |name: String| {
            params
                .find(&name)
                .ok_or_else(|| Error::Malformed(format!("missing parameter {name}")))
        };
        let conv = (0..config.conv_kernels.len())
            .map(|i| Ok((find(format!("bcpc.conv{i}.w"))?, find(format!("bcpc.conv{i}.b"))?)))
            .collect::<Result<_>>()?;
        let blocks = (0..config.layers)
            .map(|i| {
                Ok(Block {
                    wq: find(format!("bcpc.block{i}.wq"))?,
                    wk: find(format!("bcpc.block{i}.wk"))?,
                    wv: find(format!("bcpc.block{i}.wv"))?,
                    wo: find(format!("bcpc.block{i}.wo"))?,
                    ffn1: (find(format!("bcpc.block{i}.ffn1.w"))?, find(format!("bcpc.block{i}.ffn1.b"))?),
                    ffn2: (find(format!("bcpc.block{i}.ffn2.w"))?, find(format!("bcpc.block{i}.ffn2.b"))?),
                })
            })
            .collect::<Result<_>>()?;
        let scorers = (1..=config.horizon)
            .map(|p| find(format!("bcpc.score{p}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            conv,
            input: (find("bcpc.in.w".into())?, find("bcpc.in.b".into())?),
            positional: find("bcpc.pos".into())?,
            blocks,
            scorers,
            projection: (find("bcpc.proj.w".into())?, find("bcpc.proj.b".into())?),
            mask: build_mask(config.n_positions)?,
            config,
        })
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    pub fn scorer(&self, step: usize) -> ParamId {
        self.scorers[step - 1]
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        self.projection
    }

    /// Encoder and autoregressor parameters (everything but scorers and the
    /// projection).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.conv.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend([self.input.0, self.input.1, self.positional]);
        for b in &self.blocks {
            ids.extend([b.wq, b.wk, b.wv, b.wo, b.ffn1.0, b.ffn1.1, b.ffn2.0, b.ffn2.1]);
        }
        ids
    }

    /// Local features for a `batch × (L·local_window)` matrix of raw
    /// segments; returns `batch·L × d_local`, segment-major.
    pub fn encode_local(&self, tape: &mut Tape, binder: &mut Binder, raw: Var) -> Result<Var> {
        let (batch, len) = tape.value(raw).dim();
        if len != self.config.segment_len() {
            return Err(Error::Shape(format!(
                "segment length {len}, encoder expects {}",
                self.config.segment_len()
            )));
        }
        let mut rows = batch * len;
        let mut width = 1;
        let mut x = raw;
        for (i, (&k, &(w, b))) in self.config.conv_kernels.iter().zip(&self.conv).enumerate() {
            rows /= k;
            width *= k;
            x = tape.reshape(x, rows, width);
            let wv = binder.var(tape, w);
            let bv = binder.var(tape, b);
            x = tape.matmul(x, wv);
            x = tape.add_row(x, bv);
            if i + 1 < self.conv.len() {
                x = tape.relu(x);
            }
            width = tape.value(x).ncols();
        }
        Ok(x)
    }

    /// Masked bidirectional contexts `z` for stacked local features.
    pub fn contextualize(&self, tape: &mut Tape, binder: &mut Binder, locals: Var) -> Result<Var> {
        let (rows, d) = tape.value(locals).dim();
        let l = self.config.n_positions;
        if d != self.config.d_local || rows % l != 0 {
            return Err(Error::Shape(format!(
                "locals {rows}×{d} incompatible with L={l}, d_local={}",
                self.config.d_local
            )));
        }
        let (wi, bi) = (binder.var(tape, self.input.0), binder.var(tape, self.input.1));
        let pos = binder.var(tape, self.positional);
        let mut x = tape.matmul(locals, wi);
        x = tape.add_row(x, bi);
        x = tape.add_tiled(x, pos);
        for block in &self.blocks {
            let a = tape.layer_norm(x);
            let (wq, wk, wv, wo) = (
                binder.var(tape, block.wq),
                binder.var(tape, block.wk),
                binder.var(tape, block.wv),
                binder.var(tape, block.wo),
            );
            let q = tape.matmul(a, wq);
            let k = tape.matmul(a, wk);
            let v = tape.matmul(a, wv);
            let o = tape.attention(q, k, v, l, self.config.heads, self.mask.allowed());
            let o = tape.matmul(o, wo);
            x = tape.add(x, o);
            let f = tape.layer_norm(x);
            let (w1, b1) = (binder.var(tape, block.ffn1.0), binder.var(tape, block.ffn1.1));
            let (w2, b2) = (binder.var(tape, block.ffn2.0), binder.var(tape, block.ffn2.1));
            let f = tape.matmul(f, w1);
            let f = tape.add_row(f, b1);
            let f = tape.relu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        Ok(x)
    }

    /// Contrastive loss over the planned terms:
    /// mean over contributing `t` of `−(1/P_t) Σ_p log softmax` of the
    /// bilinear scores `aᵀ W_p z_t` with the true target in slot 0.
    pub fn loss(&self, tape: &mut Tape, binder: &mut Binder, locals: Var, contexts: Var, terms: &[Term]) -> Var {
        let mut parts = Vec::new();
        for p in 1..=self.config.horizon {
            let mine: Vec<&Term> = terms.iter().filter(|t| t.step == p).collect();
            if mine.is_empty() {
                continue;
            }
            let w = binder.var(tape, self.scorer(p));
            let wt = tape.transpose(w);
            // row r of `pred` is (W_p z_r)ᵀ
            let pred = tape.matmul(contexts, wt);
            let rows = mine.iter().map(|t| t.row).collect();
            let cands = Arc::new(
                mine.iter()
                    .map(|t| std::iter::once(t.target).chain(t.negatives.iter().copied()).collect())
                    .collect(),
            );
            let logits = tape.gather_dot(pred, locals, rows, cands);
            let weights = mine.iter().map(|t| t.weight).collect();
            parts.push(tape.softmax_xent(logits, weights));
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p);
        }
        total
    }

    /// `r = mean_t(z_t) · W + b` for every segment in the batch.
    pub fn represent(&self, tape: &mut Tape, binder: &mut Binder, contexts: Var) -> Var {
        let pooled = tape.mean_blocks(contexts, self.config.n_positions);
        self.project(tape, binder, pooled)
    }

    /// Linear projection of already pooled contexts.
    pub fn project(&self, tape: &mut Tape, binder: &mut Binder, pooled: Var) -> Var {
        let (w, b) = (binder.var(tape, self.projection.0), binder.var(tape, self.projection.1));
        let r = tape.matmul(pooled, w);
        tape.add_row(r, b)
    }

    /// Mean-pooled contexts (before projection) for raw segments, without
    /// recording gradients. Used for frozen-encoder training.
    pub fn pooled_contexts(&self, params: &Params, raw: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros((raw.nrows(), self.config.d_context));
        const CHUNK: usize = 256;
        for start in (0..raw.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(raw.nrows());
            let mut tape = Tape::new();
            let mut binder = Binder::new(params);
            let x = tape.leaf(raw.slice(s![start..end, ..]).to_owned());
            let locals = self.encode_local(&mut tape, &mut binder, x)?;
            let z = self.contextualize(&mut tape, &mut binder, locals)?;
            let pooled = tape.mean_blocks(z, self.config.n_positions);
            out.slice_mut(s![start..end, ..]).assign(tape.value(pooled));
        }
        Ok(out)
    }

    /// Representations `r` (`rows × d_repr`) for raw segments.
    pub fn represent_raw(&self, params: &Params, raw: &Mat) -> Result<Mat> {
        let pooled = self.pooled_contexts(params, raw)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let x = tape.leaf(pooled);
        let r = self.project(&mut tape, &mut binder, x);
        Ok(tape.value(r).clone())
    }

    /// Contrastive loss of a batch of raw segments with a given negative plan.
    pub fn batch_loss(&self, params: &Params, raw: &Mat, terms: &[Term]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let x = tape.leaf(raw.clone());
        let locals = self.encode_local(&mut tape, &mut binder, x)?;
        let z = self.contextualize(&mut tape, &mut binder, locals)?;
        let loss = self.loss(&mut tape, &mut binder, locals, z, terms);
        Ok(tape.scalar(loss))
    }
}

/// A pretrained (or freshly initialized) BCPC network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BcpcModel {
    pub net: BcpcNet,
    pub params: Params,
}

impl BcpcModel {
    pub fn init(config: BcpcConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let net = BcpcNet::init(&mut params, config, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &BcpcConfig {
        &self.net.config
    }

    /// Contrastive loss over `segments` in consecutive batches, with
    /// negatives drawn from a stream seeded by `seed`.
    pub fn evaluate_loss(&self, segments: &Mat, batch: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut weight = 0.0;
        for start in (0..segments.nrows()).step_by(batch.max(1)) {
            let end = (start + batch).min(segments.nrows());
            let chunk = segments.slice(s![start..end, ..]).to_owned();
            let terms = plan_terms(&self.net.config, end - start, &mut rng)?;
            let loss = self.net.batch_loss(&self.params, &chunk, &terms)?;
            total += loss * (end - start) as f64;
            weight += (end - start) as f64;
        }
        if weight == 0.0 {
            return Err(Error::DataValidation("no validation segments".into()));
        }
        Ok(total / weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Fraction of segments held out for validation.
    pub validation_fraction: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            validation_fraction: 0.1,
            log_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: BcpcModel,
    pub initial_valid_loss: f64,
    pub final_valid_loss: f64,
    pub curve: Vec<CurvePoint>,
}

/// Train encoder, autoregressor and scorers on `segments`
/// (`n × segment_len`, one channel per row).
pub fn pretrain(segments: &Mat, bcpc: BcpcConfig, config: &PretrainConfig) -> Result<PretrainOutcome> {
    if segments.nrows() < 2 {
        return Err(Error::DataValidation("pretraining needs at least two segments".into()));
    }
    if segments.ncols() != bcpc.segment_len() {
        return Err(Error::Shape(format!(
            "segments have {} points, model expects {}",
            segments.ncols(),
            bcpc.segment_len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BcpcModel::init(bcpc, rng.random())?;

    let mut order: Vec<usize> = (0..segments.nrows()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_valid = ((segments.nrows() as f64 * config.validation_fraction).round() as usize).clamp(1, segments.nrows() - 1);
    let valid = segments.select(Axis(0), &order[..n_valid]);
    let train_idx = &order[n_valid..];
    let batch = config.batch_size.max(1).min(train_idx.len());
    let valid_seed: u64 = rng.random();

    let initial_valid_loss = model.evaluate_loss(&valid, batch, valid_seed)?;
    let mut curve = vec![CurvePoint {
        step: 0,
        train_loss: f64::NAN,
        valid_loss: initial_valid_loss,
    }];
    let mut adam = Adam::new(config.optimizer);
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 1..=config.steps {
        let picks: Vec<usize> = index::sample(&mut rng, train_idx.len(), batch)
            .into_iter()
            .map(|i| train_idx[i])
            .collect();
        let x = segments.select(Axis(0), &picks);
        let terms = plan_terms(&model.net.config, batch, &mut rng)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let raw = tape.leaf(x);
        let locals = model.net.encode_local(&mut tape, &mut binder, raw)?;
        let z = model.net.contextualize(&mut tape, &mut binder, locals)?;
        let loss = model.net.loss(&mut tape, &mut binder, locals, z, &terms);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("contrastive loss {value}; last running mean {:.4}", running / running_n.max(1) as f64),
            });
        }
        let mut grads = tape.backward(loss);
        let grads = binder.collect(&mut grads);
        let lr = cosine_lr(config.optimizer.learning_rate, step, config.steps, 0.05);
        adam.step(&mut model.params, &grads, lr);
        running += value;
        running_n += 1;
        if step % config.log_every.max(1) == 0 || step == config.steps {
            let valid_loss = model.evaluate_loss(&valid, batch, valid_seed)?;
            curve.push(CurvePoint {
                step,
                train_loss: running / running_n as f64,
                valid_loss,
            });
            running = 0.0;
            running_n = 0;
        }
    }
    let final_valid_loss = curve.last().map(|c| c.valid_loss).unwrap_or(initial_valid_loss);
    Ok(PretrainOutcome {
        model,
        initial_valid_loss,
        final_valid_loss,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> BcpcConfig {
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

    fn random_segments(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Mat {
        Mat::from_shape_fn((n, len), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(4).unwrap();
        assert_eq!(m.visible(1), vec![-1, 1]);
        assert_eq!(m.visible(2), vec![-2, -1, 1, 2]);
        assert_eq!(m.visible(-2), vec![-2, -1, 1, 2]);
        let m8 = build_mask(8).unwrap();
        let sums: Vec<usize> = (1..=4).map(|t| m8.visible(t).len()).collect();
        assert_eq!(sums, vec![2, 4, 6, 8]);
        for t in 1..=4 {
            assert_eq!(m8.visible(t), m8.visible(-t));
        }
        assert!(matches!(build_mask(5), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_mask(2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn signed_indexing_round_trips() {
        for l in [4, 8, 16] {
            let signed: Vec<i64> = (0..l).map(|i| signed_position(i, l)).collect();
            assert!(!signed.contains(&0));
            assert_eq!(signed[0], -(l as i64) / 2);
            assert_eq!(signed[l - 1], l as i64 / 2);
            for (i, &t) in signed.iter().enumerate() {
                assert_eq!(storage_index(t, l), i);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.horizon = 4;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.n_positions = 7;
        assert!(c.validate().is_err());
        assert!(BcpcConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_input_gives_zero_locals() {
        let model = BcpcModel::init(small_config(), 1).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params);
        let x = tape.leaf(Mat::zeros((2, 32)));
        let locals = model.net.encode_local(&mut tape, &mut b, x).unwrap();
        assert_eq!(tape.value(locals).dim(), (16, 4));
        assert!(tape.value(locals).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn locals_shift_with_input() {
        let model = BcpcModel::init(small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let long = random_segments(&mut rng, 1, 36);
        let a = long.slice(s![.., 0..32]).to_owned();
        let b = long.slice(s![.., 4..36]).to_owned();
        let enc = |x: Mat| {
            let mut tape = Tape::new();
            let mut bd = Binder::new(&model.params);
            let v = tape.leaf(x);
            let l = model.net.encode_local(&mut tape, &mut bd, v).unwrap();
            tape.value(l).clone()
        };
        let (la, lb) = (enc(a), enc(b));
        for i in 0..7 {
            for j in 0..4 {
                assert_abs_diff_eq!(la[[i + 1, j]], lb[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn locals_distinguish_inputs() {
        let model = BcpcModel::init(small_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_segments(&mut rng, 2, 32);
            let mut tape = Tape::new();
            let mut bd = Binder::new(&model.params);
            let v = tape.leaf(x);
            let l = model.net.encode_local(&mut tape, &mut bd, v).unwrap();
            let l = tape.value(l);
            assert!(l.slice(s![0..8, ..]) != l.slice(s![8..16, ..]));
        }
    }

    #[test]
    fn wrong_length_is_shape_error() {
        let model = BcpcModel::init(small_config(), 1).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params);
        let x = tape.leaf(Mat::zeros((1, 30)));
        assert!(matches!(model.net.encode_local(&mut tape, &mut b, x), Err(Error::Shape(_))));
    }

    fn contexts_for(model: &BcpcModel, locals: &Mat) -> Mat {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params);
        let l = tape.leaf(locals.clone());
        let z = model.net.contextualize(&mut tape, &mut b, l).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn context_respects_mask() {
        let model = BcpcModel::init(small_config(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let locals = random_segments(&mut rng, 8, 4);
        let base = contexts_for(&model, &locals);
        let z1 = storage_index(1, 8);
        // perturb position L/2 = 4: z_1 must not move
        let mut far = locals.clone();
        far.row_mut(storage_index(4, 8)).mapv_inplace(|v| v + 3.0);
        let moved = contexts_for(&model, &far);
        for j in 0..4 {
            assert_abs_diff_eq!(base[[z1, j]], moved[[z1, j]], epsilon = 1e-12);
        }
        // perturb position 1: z_1 must move
        let mut near = locals.clone();
        near.row_mut(z1).mapv_inplace(|v| v + 3.0);
        let moved = contexts_for(&model, &near);
        assert!((0..4).any(|j| (base[[z1, j]] - moved[[z1, j]]).abs() > 1e-6));
        assert_eq!(base, contexts_for(&model, &locals));
    }

    #[test]
    fn plan_targets_follow_sign_rule() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let terms = plan_terms(&cfg, 2, &mut rng).unwrap();
        for term in &terms {
            let (b, i) = (term.row / 8, term.row % 8);
            let t = signed_position(i, 8);
            let target = signed_position(term.target % 8, 8);
            assert_eq!(term.target / 8, b);
            assert_eq!(target, if t > 0 { t + term.step as i64 } else { t - term.step as i64 });
            assert!(!term.negatives.contains(&term.target));
            assert_eq!(term.negatives.len(), 4);
        }
        // t = ±1, ±2 contribute two terms, ±3 one, ±4 none: 10 terms per segment
        assert_eq!(terms.len(), 20);
        let total: f64 = terms.iter().map(|t| t.weight).sum();
        // the per-(segment, t) weights sum to 1 over all terms
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_negative_pool_is_error() {
        let mut cfg = small_config();
        cfg.n_negatives = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(plan_terms(&cfg, 1, &mut rng), Err(Error::SamplingInfeasible(_))));
    }

    #[test]
    fn uniform_scores_give_log_candidates() {
        let model = BcpcModel::init(small_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_segments(&mut rng, 3, 32);
        let terms = plan_terms(&model.net.config, 3, &mut rng).unwrap();
        let loss = model.net.batch_loss(&model.params, &x, &terms).unwrap();
        assert_abs_diff_eq!(loss, (5.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_candidate_gives_zero_loss() {
        let model = BcpcModel::init(small_config(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_segments(&mut rng, 2, 32);
        let mut terms = plan_terms(&model.net.config, 2, &mut rng).unwrap();
        for t in &mut terms {
            t.negatives.clear();
        }
        let loss = model.net.batch_loss(&model.params, &x, &terms).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_pooling_ignores_duplication() {
        let model = BcpcModel::init(small_config(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let half = random_segments(&mut rng, 8, 4);
        let doubled = ndarray::concatenate(Axis(0), &[half.view(), half.view()]).unwrap();
        let pool = |z: Mat, block: usize| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&model.params);
            let v = tape.leaf(z);
            let p = tape.mean_blocks(v, block);
            let r = model.net.project(&mut tape, &mut b, p);
            tape.value(r).clone()
        };
        let a = pool(half, 8);
        let b = pool(doubled, 16);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_projection_single_position() {
        let mut model = BcpcModel::init(small_config(), 15).unwrap();
        let (w, _) = model.net.projection();
        *model.params.get_mut(w) = Mat::eye(4);
        let z = Mat::from_shape_vec((1, 4), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params);
        let v = tape.leaf(z.clone());
        let p = tape.mean_blocks(v, 1);
        let r = model.net.project(&mut tape, &mut b, p);
        assert_eq!(tape.value(r), &z);
    }

    #[test]
    fn represent_is_deterministic() {
        let model = BcpcModel::init(small_config(), 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_segments(&mut rng, 1, 32);
        let both = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let r = model.net.represent_raw(&model.params, &both).unwrap();
        assert_eq!(r.row(0), r.row(1));
    }

    #[test]
    fn zero_step_pretrain_reports_initial_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random_segments(&mut rng, 12, 32);
        let cfg = PretrainConfig {
            steps: 0,
            batch_size: 4,
            ..Default::default()
        };
        let out = pretrain(&x, small_config(), &cfg).unwrap();
        assert_abs_diff_eq!(out.initial_valid_loss, (5.0f64).ln(), epsilon = 1e-9);
        assert_eq!(out.final_valid_loss, out.initial_valid_loss);
    }

    #[test]
    fn pretrain_rejects_empty() {
        let cfg = PretrainConfig::default();
        assert!(pretrain(&Mat::zeros((0, 32)), small_config(), &cfg).is_err());
    }
}
