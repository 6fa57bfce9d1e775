//! A deterministic toy decoder-only transformer with activation capture, so
//! the full two-pass calibration protocol and end-to-end compression run at
//! desk scale. Pre-norm residual blocks, causal attention, gated-SiLU FFN.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use thiserror::Error;

use crate::allocate::{
    AllocationPlan, MatrixStats, SublayerId, SublayerKind, SublayerStats,
};
use crate::decompose::{
    self, DecomposeError, FactorPair, Method, ScaleKind, ScaleVector,
};
use crate::linalg::{gram_accumulate_into, LinalgError, Matrix};

pub const MHA_MATRICES: [&str; 4] = ["wq", "wk", "wv", "wo"];
pub const FFN_MATRICES: [&str; 3] = ["wg", "wu", "wd"];
/// Key used for the jointly factorized query/key pair in plans and reports.
pub const JOINT_QK: &str = "wqk";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("empty calibration dataset")]
    EmptyDataset,
    #[error("missing calibration statistics for {0}")]
    MissingStats(String),
    #[error("plan does not match model: {0}")]
    PlanModelMismatch(String),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Shape and seed of the toy model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub layers: usize,
    pub seed: u64,
    pub norm_eps: f64,
}

impl ToyModelConfig {
    /// Default desk-scale shape; the FFN/MHA parameter ratio lands near 2,
    /// matching the architecture family this mirrors.
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            vocab: 256,
            hidden: 64,
            heads: 4,
            ffn_width: 172,
            layers: 4,
            seed,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.vocab == 0
            || self.hidden == 0
            || self.heads == 0
            || self.ffn_width == 0
            || self.layers == 0
        {
            return Err(HarnessError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if self.hidden % self.heads != 0 {
            return Err(HarnessError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(HarnessError::InvalidConfig("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// A weight position holds either the dense matrix or its low-rank
/// replacement, never both.
#[derive(Debug, Clone)]
pub enum WeightSlot {
    Dense(Matrix),
    Factored(FactorPair),
}

impl WeightSlot {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            WeightSlot::Dense(m) => (m.cols(), m.rows()),
            WeightSlot::Factored(f) => (f.d_in(), f.d_out()),
        }
    }

    /// Stored parameters (factor bias excluded from budget accounting).
    pub fn param_count(&self) -> u64 {
        match self {
            WeightSlot::Dense(m) => (m.rows() * m.cols()) as u64,
            WeightSlot::Factored(f) => f.param_count(),
        }
    }

    pub fn dense(&self) -> Option<&Matrix> {
        match self {
            WeightSlot::Dense(m) => Some(m),
            WeightSlot::Factored(_) => None,
        }
    }

    /// Applies the map to a `d_in x L` batch, tallying multiply-accumulates.
    /// Factored slots compute `L (R x) + bias` without materializing `L R`.
    fn apply(&self, x: &Matrix, macs: &mut u64) -> Result<Matrix, LinalgError> {
        match self {
            WeightSlot::Dense(m) => {
                *macs += (m.rows() * m.cols() * x.cols()) as u64;
                m.matmul(x)
            }
            WeightSlot::Factored(f) => {
                *macs += (f.rank * (f.d_in() + f.d_out()) * x.cols()) as u64;
                f.apply(x)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub wq: WeightSlot,
    pub wk: WeightSlot,
    pub wv: WeightSlot,
    pub wo: WeightSlot,
    pub wg: WeightSlot,
    pub wu: WeightSlot,
    pub wd: WeightSlot,
}

impl LayerWeights {
    pub fn slot(&self, name: &str) -> Option<&WeightSlot> {
        match name {
            "wq" => Some(&self.wq),
            "wk" => Some(&self.wk),
            "wv" => Some(&self.wv),
            "wo" => Some(&self.wo),
            "wg" => Some(&self.wg),
            "wu" => Some(&self.wu),
            "wd" => Some(&self.wd),
            _ => None,
        }
    }

    pub fn slot_mut(&mut self, name: &str) -> Option<&mut WeightSlot> {
        match name {
            "wq" => Some(&mut self.wq),
            "wk" => Some(&mut self.wk),
            "wv" => Some(&mut self.wv),
            "wo" => Some(&mut self.wo),
            "wg" => Some(&mut self.wg),
            "wu" => Some(&mut self.wu),
            "wd" => Some(&mut self.wd),
            _ => None,
        }
    }
}

/// The toy decoder. Embedding and output head are never compressed; the
/// seven per-layer projection matrices are the compressed scope.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ToyModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub head: Matrix,
}

/// Deterministically initializes a toy model: normal weights scaled by the
/// inverse square root of the fan-in so activations stay tame over a few
/// layers. Identical seeds give bitwise-identical models.
pub fn init_toy_model(cfg: &ToyModelConfig) -> Result<ToyModel, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;
    let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Matrix {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = normal.sample(&mut rng);
                v * scale
            })
            .collect();
        Matrix::from_parts(rows, cols, data)
    };

    let d = cfg.hidden;
    let d_ff = cfg.ffn_width;
    let embed = draw(cfg.vocab, d, d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
            wq: WeightSlot::Dense(draw(d, d, d)),
            wk: WeightSlot::Dense(draw(d, d, d)),
            wv: WeightSlot::Dense(draw(d, d, d)),
            wo: WeightSlot::Dense(draw(d, d, d)),
            wg: WeightSlot::Dense(draw(d_ff, d, d)),
            wu: WeightSlot::Dense(draw(d_ff, d, d)),
            wd: WeightSlot::Dense(draw(d, d_ff, d_ff)),
        });
    }
    let head = draw(d, cfg.vocab, d);
    Ok(ToyModel {
        cfg: *cfg,
        embed,
        layers,
        final_norm: vec![1.0; d],
        head,
    })
}

impl ToyModel {
    pub fn matrix_names(kind: SublayerKind) -> &'static [&'static str] {
        match kind {
            SublayerKind::Mha => &MHA_MATRICES,
            SublayerKind::Ffn => &FFN_MATRICES,
        }
    }

    pub fn sublayer_ids(&self) -> Vec<SublayerId> {
        let mut ids = Vec::with_capacity(self.layers.len() * 2);
        for layer in 0..self.layers.len() {
            ids.push(SublayerId::mha(layer));
            ids.push(SublayerId::ffn(layer));
        }
        ids
    }

    pub fn slot(&self, layer: usize, name: &str) -> Option<&WeightSlot> {
        self.layers.get(layer).and_then(|l| l.slot(name))
    }

    pub fn slot_mut(&mut self, layer: usize, name: &str) -> Option<&mut WeightSlot> {
        self.layers.get_mut(layer).and_then(|l| l.slot_mut(name))
    }

    /// Dense parameter count of one sublayer's decomposable matrices.
    pub fn sublayer_dense_params(&self, id: SublayerId) -> u64 {
        let d = self.cfg.hidden as u64;
        let d_ff = self.cfg.ffn_width as u64;
        match id.kind {
            SublayerKind::Mha => 4 * d * d,
            SublayerKind::Ffn => 3 * d * d_ff,
        }
    }

    /// Current parameter count over the compressed scope (the seven
    /// projection matrices per layer, dense or factored).
    pub fn compressed_scope_params(&self) -> u64 {
        let mut total = 0;
        for layer in &self.layers {
            for name in MHA_MATRICES.iter().chain(FFN_MATRICES.iter()) {
                total += layer.slot(name).unwrap().param_count();
            }
        }
        total
    }

    /// Parameter count of the same scope if every slot were dense.
    pub fn dense_scope_params(&self) -> u64 {
        self.sublayer_ids()
            .iter()
            .map(|id| self.sublayer_dense_params(*id))
            .sum()
    }

    /// Achieved compression ratio over the compressed scope.
    pub fn achieved_ratio(&self) -> f64 {
        1.0 - self.compressed_scope_params() as f64 / self.dense_scope_params() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureMode {
    None,
    ImportancePass,
    StatsPass,
}

/// What to record during a forward pass.
#[derive(Debug, Clone)]
pub struct CaptureRequest {
    pub mode: CaptureMode,
    /// Restricts recording to these sublayers; `None` records everything.
    pub sublayers: Option<BTreeSet<SublayerId>>,
}

impl CaptureRequest {
    pub fn none() -> Self {
        Self {
            mode: CaptureMode::None,
            sublayers: None,
        }
    }

    pub fn importance_pass() -> Self {
        Self {
            mode: CaptureMode::ImportancePass,
            sublayers: None,
        }
    }

    pub fn stats_pass() -> Self {
        Self {
            mode: CaptureMode::StatsPass,
            sublayers: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ImportanceAccum {
    sum_cos: f64,
    used: u64,
    skipped: u64,
}

#[derive(Debug, Clone)]
struct MatrixAccum {
    d_in: usize,
    d_out: usize,
    gram_y: Matrix,
    gram_x: Matrix,
    sum_y: Vec<f64>,
    sum_x: Vec<f64>,
    sum_abs_x: Vec<f64>,
    sum_sq_x: Vec<f64>,
    tokens: u64,
}

impl MatrixAccum {
    fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            gram_y: Matrix::zeros(d_out, d_out),
            gram_x: Matrix::zeros(d_in, d_in),
            sum_y: vec![0.0; d_out],
            sum_x: vec![0.0; d_in],
            sum_abs_x: vec![0.0; d_in],
            sum_sq_x: vec![0.0; d_in],
            tokens: 0,
        }
    }

    fn record(&mut self, x: &Matrix, y: &Matrix) {
        gram_accumulate_into(&mut self.gram_y, y);
        gram_accumulate_into(&mut self.gram_x, x);
        for i in 0..self.d_out {
            self.sum_y[i] += y.row(i).iter().sum::<f64>();
        }
        for i in 0..self.d_in {
            let row = x.row(i);
            self.sum_x[i] += row.iter().sum::<f64>();
            self.sum_abs_x[i] += row.iter().map(|v| v.abs()).sum::<f64>();
            self.sum_sq_x[i] += row.iter().map(|v| v * v).sum::<f64>();
        }
        self.tokens += x.cols() as u64;
    }
}

#[derive(Debug, Clone)]
struct SublayerAccum {
    matrices: BTreeMap<String, MatrixAccum>,
    joint_gram: Option<Matrix>,
}

/// Accumulators for a calibration capture, dimensioned eagerly from the
/// model shape before the first batch arrives.
#[derive(Debug, Clone)]
pub struct CaptureState {
    request: CaptureRequest,
    importance: BTreeMap<SublayerId, ImportanceAccum>,
    stats: BTreeMap<SublayerId, SublayerAccum>,
}

impl CaptureState {
    pub fn new(model: &ToyModel, request: CaptureRequest) -> Self {
        let mut importance = BTreeMap::new();
        let mut stats = BTreeMap::new();
        let d = model.cfg.hidden;
        for id in model.sublayer_ids() {
            if let Some(filter) = &request.sublayers {
                if !filter.contains(&id) {
                    continue;
                }
            }
            match request.mode {
                CaptureMode::ImportancePass => {
                    importance.insert(id, ImportanceAccum::default());
                }
                CaptureMode::StatsPass => {
                    let mut matrices = BTreeMap::new();
                    for name in ToyModel::matrix_names(id.kind) {
                        let (d_in, d_out) = model.slot(id.layer, name).unwrap().dims();
                        matrices.insert(name.to_string(), MatrixAccum::new(d_in, d_out));
                    }
                    let joint_gram = match id.kind {
                        SublayerKind::Mha => Some(Matrix::zeros(2 * d, 2 * d)),
                        SublayerKind::Ffn => None,
                    };
                    stats.insert(
                        id,
                        SublayerAccum {
                            matrices,
                            joint_gram,
                        },
                    );
                }
                CaptureMode::None => {}
            }
        }
        Self {
            request,
            importance,
            stats,
        }
    }

    pub fn disabled(model: &ToyModel) -> Self {
        Self::new(model, CaptureRequest::none())
    }

    fn wants(&self, id: SublayerId, mode: CaptureMode) -> bool {
        if self.request.mode != mode {
            return false;
        }
        match &self.request.sublayers {
            Some(filter) => filter.contains(&id),
            None => true,
        }
    }

    fn record_io(&mut self, id: SublayerId, x: &Matrix, y: &Matrix) {
        if !self.wants(id, CaptureMode::ImportancePass) {
            return;
        }
        let acc = self.importance.get_mut(&id).expect("accumulator exists");
        for m in 0..x.cols() {
            let mut dot = 0.0;
            let mut nx2 = 0.0;
            let mut ny2 = 0.0;
            for i in 0..x.rows() {
                let a = x.get(i, m);
                let b = y.get(i, m);
                dot += a * b;
                nx2 += a * a;
                ny2 += b * b;
            }
            if nx2.sqrt() < 1e-12 || ny2.sqrt() < 1e-12 {
                acc.skipped += 1;
            } else {
                // Single-sqrt form so an identity sublayer scores exactly 1.
                acc.sum_cos += (dot / (nx2 * ny2).sqrt()).clamp(-1.0, 1.0);
                acc.used += 1;
            }
        }
    }

    fn record_matmul(&mut self, id: SublayerId, name: &str, x: &Matrix, y: &Matrix) {
        if !self.wants(id, CaptureMode::StatsPass) {
            return;
        }
        let acc = self.stats.get_mut(&id).expect("accumulator exists");
        acc.matrices
            .get_mut(name)
            .expect("matrix accumulator exists")
            .record(x, y);
    }

    fn record_joint_qk(&mut self, id: SublayerId, yq: &Matrix, yk: &Matrix) {
        if !self.wants(id, CaptureMode::StatsPass) {
            return;
        }
        let acc = self.stats.get_mut(&id).expect("accumulator exists");
        if let Some(gram) = acc.joint_gram.as_mut() {
            let stacked = Matrix::vstack(yq, yk).expect("q/k outputs share shape");
            gram_accumulate_into(gram, &stacked);
        }
    }

    /// Importance means collected so far.
    pub fn importances(&self) -> BTreeMap<SublayerId, (f64, u64)> {
        self.importance
            .iter()
            .map(|(id, acc)| {
                let mean = if acc.used > 0 {
                    acc.sum_cos / acc.used as f64
                } else {
                    0.0
                };
                (*id, (mean, acc.skipped))
            })
            .collect()
    }
}

/// Forward pass output; logits are `vocab x L`, the final hidden state is
/// the post-norm `hidden x L` activations feeding the head.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub final_hidden: Matrix,
    /// Multiply-accumulate count spent in weight slots (dense or factored).
    pub slot_macs: u64,
}

fn rms_norm(x: &Matrix, gains: &[f64], eps: f64) -> Matrix {
    let d = x.rows();
    let mut out = Matrix::zeros(d, x.cols());
    for m in 0..x.cols() {
        let mut ss = 0.0;
        for i in 0..d {
            let v = x.get(i, m);
            ss += v * v;
        }
        let inv = 1.0 / (ss / d as f64 + eps).sqrt();
        for i in 0..d {
            out.set(i, m, gains[i] * x.get(i, m) * inv);
        }
    }
    out
}

#[inline]
fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Causal multi-head attention over `q, k, v` laid out `hidden x L`.
///
/// Activations arrive channel-major; each head is repacked token-major so
/// the score and mixing loops run over contiguous memory.
fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Matrix {
    let d = q.rows();
    let len = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(d, len);
    let mut qh = vec![0.0f64; len * dh];
    let mut kh = vec![0.0f64; len * dh];
    let mut vh = vec![0.0f64; len * dh];
    let mut scores = vec![0.0f64; len];
    let mut mixed = vec![0.0f64; dh];
    for h in 0..heads {
        let base = h * dh;
        for i in 0..dh {
            let qrow = q.row(base + i);
            let krow = k.row(base + i);
            let vrow = v.row(base + i);
            for t in 0..len {
                qh[t * dh + i] = qrow[t];
                kh[t * dh + i] = krow[t];
                vh[t * dh + i] = vrow[t];
            }
        }
        for t in 0..len {
            let qt = &qh[t * dh..(t + 1) * dh];
            for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                let ks = &kh[s * dh..(s + 1) * dh];
                *score = crate::linalg::dot(qt, ks) * scale;
            }
            let max = scores[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for score in scores.iter_mut().take(t + 1) {
                *score = (*score - max).exp();
                total += *score;
            }
            mixed.fill(0.0);
            for s in 0..=t {
                let w = scores[s];
                let vs = &vh[s * dh..(s + 1) * dh];
                for (m, &value) in mixed.iter_mut().zip(vs) {
                    *m += w * value;
                }
            }
            for (i, m) in mixed.iter().enumerate() {
                out.set(base + i, t, m / total);
            }
        }
    }
    out
}

/// Runs the decoder over one token sequence.
///
/// Capture never alters the computation: importance passes stream cosine
/// sums per sublayer, stats passes stream Grams and channel accumulators at
/// every matmul boundary.
pub fn forward(
    model: &ToyModel,
    tokens: &[u32],
    capture: &mut CaptureState,
) -> Result<ForwardOutput, HarnessError> {
    if tokens.is_empty() {
        return Err(HarnessError::EmptySequence);
    }
    let cfg = &model.cfg;
    for &t in tokens {
        if t as usize >= cfg.vocab {
            return Err(HarnessError::TokenOutOfRange {
                token: t,
                vocab: cfg.vocab,
            });
        }
    }
    let len = tokens.len();
    let d = cfg.hidden;
    let mut macs = 0u64;

    let mut x = Matrix::zeros(d, len);
    for (m, &t) in tokens.iter().enumerate() {
        let row = model.embed.row(t as usize);
        for i in 0..d {
            x.set(i, m, row[i]);
        }
    }

    for (layer_idx, layer) in model.layers.iter().enumerate() {
        let mha_id = SublayerId::mha(layer_idx);
        let ffn_id = SublayerId::ffn(layer_idx);

        // MHA sublayer: x <- x + MHA(RMSNorm(x))
        let x_in = x;
        let normed = rms_norm(&x_in, &layer.attn_norm, cfg.norm_eps);
        let q = layer.wq.apply(&normed, &mut macs)?;
        capture.record_matmul(mha_id, "wq", &normed, &q);
        let k = layer.wk.apply(&normed, &mut macs)?;
        capture.record_matmul(mha_id, "wk", &normed, &k);
        let v = layer.wv.apply(&normed, &mut macs)?;
        capture.record_matmul(mha_id, "wv", &normed, &v);
        capture.record_joint_qk(mha_id, &q, &k);
        let mixed = attention(&q, &k, &v, cfg.heads);
        let o = layer.wo.apply(&mixed, &mut macs)?;
        capture.record_matmul(mha_id, "wo", &mixed, &o);
        let mut x_mha = x_in.clone();
        for (acc, delta) in x_mha.data_mut().iter_mut().zip(o.data()) {
            *acc += delta;
        }
        capture.record_io(mha_id, &x_in, &x_mha);

        // FFN sublayer: x <- x + W_d(SiLU(W_g u) .* W_u u)
        let normed = rms_norm(&x_mha, &layer.ffn_norm, cfg.norm_eps);
        let gated = layer.wg.apply(&normed, &mut macs)?;
        capture.record_matmul(ffn_id, "wg", &normed, &gated);
        let up = layer.wu.apply(&normed, &mut macs)?;
        capture.record_matmul(ffn_id, "wu", &normed, &up);
        let mut activated = gated;
        for (g, u) in activated.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        let down = layer.wd.apply(&activated, &mut macs)?;
        capture.record_matmul(ffn_id, "wd", &activated, &down);
        let mut x_ffn = x_mha.clone();
        for (acc, delta) in x_ffn.data_mut().iter_mut().zip(down.data()) {
            *acc += delta;
        }
        capture.record_io(ffn_id, &x_mha, &x_ffn);
        x = x_ffn;
    }

    let final_hidden = rms_norm(&x, &model.final_norm, cfg.norm_eps);
    // head is hidden x vocab; logits = head^T * hidden.
    macs += (model.head.rows() * model.head.cols() * len) as u64;
    let logits = model.head.matmul_transposed_self(&final_hidden)?;
    Ok(ForwardOutput {
        logits,
        final_hidden,
        slot_macs: macs,
    })
}

/// Two-pass calibration over the dataset, sequences processed in ascending
/// index order for bit-exact accumulators. Pass one collects importances,
/// pass two per-matrix statistics; both run on the given (uncompressed)
/// model.
pub fn collect_calibration(
    model: &ToyModel,
    dataset: &[Vec<u32>],
) -> Result<BTreeMap<SublayerId, SublayerStats>, HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }

    let mut pass1 = CaptureState::new(model, CaptureRequest::importance_pass());
    for sequence in dataset {
        forward(model, sequence, &mut pass1)?;
    }
    let importances = pass1.importances();

    let mut pass2 = CaptureState::new(model, CaptureRequest::stats_pass());
    for sequence in dataset {
        forward(model, sequence, &mut pass2)?;
    }

    let mut out = BTreeMap::new();
    for id in model.sublayer_ids() {
        let (importance, degenerate_columns) = importances[&id];
        let acc = pass2.stats.remove(&id).expect("stats accumulated");
        let mut matrices = BTreeMap::new();
        for (name, m) in acc.matrices {
            let n = m.tokens as f64;
            matrices.insert(
                name,
                MatrixStats {
                    d_in: m.d_in,
                    d_out: m.d_out,
                    gram_y: m.gram_y,
                    gram_x: m.gram_x,
                    mean_y: m.sum_y.iter().map(|s| s / n).collect(),
                    sum_x: m.sum_x,
                    scale_abs: m.sum_abs_x.iter().map(|s| s / n).collect(),
                    scale_l2: m.sum_sq_x.iter().map(|s| s.sqrt()).collect(),
                    token_count: m.tokens,
                    spectra: BTreeMap::new(),
                },
            );
        }
        out.insert(
            id,
            SublayerStats {
                id,
                importance,
                degenerate_columns,
                param_count: model.sublayer_dense_params(id),
                matrices,
                joint_qk_gram: acc.joint_gram,
                joint_spectrum: None,
            },
        );
    }
    Ok(out)
}

fn dense_weight<'a>(
    model: &'a ToyModel,
    layer: usize,
    name: &str,
) -> Result<&'a Matrix, HarnessError> {
    model
        .slot(layer, name)
        .ok_or_else(|| HarnessError::PlanModelMismatch(format!("no slot L{layer}.{name}")))?
        .dense()
        .ok_or_else(|| {
            HarnessError::PlanModelMismatch(format!("slot L{layer}.{name} already factored"))
        })
}

fn matrix_stats<'a>(
    stats: &'a BTreeMap<SublayerId, SublayerStats>,
    id: SublayerId,
    name: &str,
) -> Result<&'a MatrixStats, HarnessError> {
    stats
        .get(&id)
        .and_then(|s| s.matrices.get(name))
        .ok_or_else(|| HarnessError::MissingStats(format!("{id}.{name}")))
}

/// Rewrites the planned slots as factor pairs with the chosen backend,
/// returning a new model. Skipped sublayers stay dense; the input model is
/// untouched.
pub fn apply_plan(
    model: &ToyModel,
    plan: &AllocationPlan,
    stats: &BTreeMap<SublayerId, SublayerStats>,
    method: Method,
) -> Result<ToyModel, HarnessError> {
    let mut out = model.clone();
    for (id, ranks) in &plan.ranks {
        if plan.skipped.contains(id) {
            continue;
        }
        if id.layer >= model.layers.len() {
            return Err(HarnessError::PlanModelMismatch(format!(
                "plan references layer {} of a {}-layer model",
                id.layer,
                model.layers.len()
            )));
        }
        for (name, &rank) in ranks {
            if name == JOINT_QK {
                let wq = dense_weight(model, id.layer, "wq")?;
                let wk = dense_weight(model, id.layer, "wk")?;
                let joint_gram = stats
                    .get(id)
                    .and_then(|s| s.joint_qk_gram.as_ref())
                    .ok_or_else(|| HarnessError::MissingStats(format!("{id}.{JOINT_QK}")))?;
                let (pair_q, pair_k) =
                    decompose::joint_qk_decompose(wq, wk, Some(joint_gram), rank)?;
                *out.slot_mut(id.layer, "wq").unwrap() = WeightSlot::Factored(pair_q);
                *out.slot_mut(id.layer, "wk").unwrap() = WeightSlot::Factored(pair_k);
                continue;
            }
            let w = dense_weight(model, id.layer, name)?;
            let ms = matrix_stats(stats, *id, name)?;
            let pair = match method {
                Method::Svd => decompose::plain_svd_decompose(w, rank)?.0,
                Method::Asvd => {
                    let s = ScaleVector::new(ms.scale_abs.clone(), ScaleKind::MeanAbs);
                    decompose::weighted_svd_decompose(w, &s, rank)?.0
                }
                Method::Awsvd => {
                    let s = ScaleVector::new(ms.scale_l2.clone(), ScaleKind::L2Norm);
                    decompose::weighted_svd_decompose(w, &s, rank)?.0
                }
                Method::Pca | Method::JointQk => {
                    decompose::pca_decompose(w, &ms.gram_y, rank)?.0
                }
                Method::Afm => {
                    decompose::afm_decompose(w, &ms.gram_y, &ms.mean_y, ms.token_count, rank)?.0
                }
            };
            *out.slot_mut(id.layer, name).unwrap() = WeightSlot::Factored(pair);
        }
    }
    Ok(out)
}

/// Seeded uniform token sequences for calibration runs.
pub fn generate_token_dataset(
    vocab: usize,
    sequences: usize,
    tokens_per_sequence: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0, vocab as u32).expect("vocab > 0");
    (0..sequences)
        .map(|_| (0..tokens_per_sequence).map(|_| dist.sample(&mut rng)).collect())
        .collect()
}
