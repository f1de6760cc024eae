//! LSTM encoder plus dense decoder mapping a feature window to one reward
//! per backup controller.
//!
//! Gate blocks are laid out `[input, forget, cell, output]` along the
//! `4H` axis, and weights are stored `in x out` so a whole batch is one
//! matrix product. Backpropagation through time is written by hand; the
//! unit tests check it against central differences.

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::history::{Normalizer, Window};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "mbcbf-reward-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Hidden widths of the dense decoder.
    pub decoder: Vec<usize>,
    /// Number of backup controllers.
    pub outputs: usize,
    /// Window length the model is trained on.
    pub steps: usize,
    pub lstm_dropout: f64,
    pub decoder_dropout: f64,
    /// Train with softmax cross-entropy on the pre-sigmoid scores instead of
    /// on the sigmoid outputs.
    pub logits_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: super::FEATURE_COUNT,
            hidden: 100,
            layers: 2,
            decoder: vec![50, 25],
            outputs: 3,
            steps: super::HISTORY_LEN,
            lstm_dropout: 0.1,
            decoder_dropout: 0.2,
            logits_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input > 0
            && self.hidden > 0
            && self.layers > 0
            && self.outputs > 0
            && self.steps > 0
            && self.decoder.iter().all(|&d| d > 0);
        if !dims_ok {
            return Err(Error::InvalidParameter(format!("model dimensions must be positive: {self:?}")));
        }
        for p in [self.lstm_dropout, self.decoder_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("dropout rate must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `input x 4H`.
    pub w_x: Array2<f64>,
    /// `H x 4H`.
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `input x output`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Every trainable tensor. Gradients and optimizer moments use the same
/// shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub lstm: Vec<LstmParams>,
    pub dense: Vec<DenseParams>,
}

fn dense_dims(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let mut widths = vec![cfg.hidden];
    widths.extend(&cfg.decoder);
    widths.push(cfg.outputs);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let lstm = (0..cfg.layers)
            .map(|l| {
                let d = if l == 0 { cfg.input } else { h };
                LstmParams { w_x: Array2::zeros((d, 4 * h)), w_h: Array2::zeros((h, 4 * h)), b: Array1::zeros(4 * h) }
            })
            .collect();
        let dense = dense_dims(cfg)
            .into_iter()
            .map(|(i, o)| DenseParams { w: Array2::zeros((i, o)), b: Array1::zeros(o) })
            .collect();
        Self { lstm, dense }
    }

    /// Glorot-uniform weights, zero biases except a forget-gate bias of one.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let h = cfg.hidden;
        let mut fill = |a: &mut Array2<f64>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            a.mapv_inplace(|_| rng.random_range(-limit..limit));
        };
        for layer in &mut p.lstm {
            let d = layer.w_x.nrows();
            fill(&mut layer.w_x, d, h);
            fill(&mut layer.w_h, h, h);
            layer.b.slice_mut(s![h..2 * h]).fill(1.0);
        }
        for layer in &mut p.dense {
            let (i, o) = layer.w.dim();
            fill(&mut layer.w, i, o);
        }
        p
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, p) in self.lstm.iter().enumerate() {
            out.push((format!("lstm{l}.w_x"), p.w_x.view().into_dyn()));
            out.push((format!("lstm{l}.w_h"), p.w_h.view().into_dyn()));
            out.push((format!("lstm{l}.b"), p.b.view().into_dyn()));
        }
        for (l, p) in self.dense.iter().enumerate() {
            out.push((format!("dense{l}.w"), p.w.view().into_dyn()));
            out.push((format!("dense{l}.b"), p.b.view().into_dyn()));
        }
        out
    }

    /// Mutable views in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for p in &mut self.lstm {
            out.push(p.w_x.view_mut().into_dyn());
            out.push(p.w_h.view_mut().into_dyn());
            out.push(p.b.view_mut().into_dyn());
        }
        for p in &mut self.dense {
            out.push(p.w.view_mut().into_dyn());
            out.push(p.b.view_mut().into_dyn());
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v * v).collect::<Vec<_>>()).sum::<f64>().sqrt()
    }
}

/// Inverted-dropout masks for one batch; entries are `0` or `1 / (1 - p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One `B x H` mask per LSTM layer output, shared across time steps.
    pub lstm: Vec<Array2<f64>>,
    /// One `B x width` mask per decoder hidden layer.
    pub decoder: Vec<Array2<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(cfg: &ModelConfig, batch: usize, rng: &mut R) -> Self {
        let mut draw = |shape: (usize, usize), p: f64| {
            let keep = 1.0 / (1.0 - p);
            Array2::from_shape_fn(shape, |_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { keep })
        };
        let lstm = (0..cfg.layers).map(|_| draw((batch, cfg.hidden), cfg.lstm_dropout)).collect();
        let decoder = cfg.decoder.iter().map(|&w| draw((batch, w), cfg.decoder_dropout)).collect();
        Self { lstm, decoder }
    }
}

struct LstmCache {
    input: Array3<f64>,
    i: Array3<f64>,
    f: Array3<f64>,
    g: Array3<f64>,
    o: Array3<f64>,
    c: Array3<f64>,
    tanh_c: Array3<f64>,
    h: Array3<f64>,
}

struct DenseCache {
    input: Array2<f64>,
    pre: Array2<f64>,
}

struct ForwardCache {
    lstm: Vec<LstmCache>,
    dense: Vec<DenseCache>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `lhs . rhs`. Products with very few rows skip the packed GEMM kernel,
/// whose packing cost dominates for single-window inference.
fn matmul(lhs: &ArrayView2<'_, f64>, rhs: &Array2<f64>) -> Array2<f64> {
    const SMALL: usize = 4;
    let (m, k) = lhs.dim();
    let n = rhs.ncols();
    match rhs.as_slice() {
        Some(r) if m <= SMALL => {
            let mut out = Array2::zeros((m, n));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("fresh array is contiguous");
                for kk in 0..k {
                    let a = lhs[[i, kk]];
                    for (o, &b) in row.iter_mut().zip(&r[kk * n..(kk + 1) * n]) {
                        *o += a * b;
                    }
                }
            }
            out
        }
        _ => lhs.dot(rhs),
    }
}

fn flat(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (b, t, d) = a.dim();
    a.view().into_shape_with_order((b * t, d)).expect("contiguous batch tensor")
}

fn lstm_forward(p: &LstmParams, input: Array3<f64>) -> LstmCache {
    let (b, t_len, _) = input.dim();
    let h_dim = p.w_h.nrows();
    let xw = matmul(&flat(&input), &p.w_x);
    let mut cache = LstmCache {
        input,
        i: Array3::zeros((b, t_len, h_dim)),
        f: Array3::zeros((b, t_len, h_dim)),
        g: Array3::zeros((b, t_len, h_dim)),
        o: Array3::zeros((b, t_len, h_dim)),
        c: Array3::zeros((b, t_len, h_dim)),
        tanh_c: Array3::zeros((b, t_len, h_dim)),
        h: Array3::zeros((b, t_len, h_dim)),
    };
    let mut h_prev = Array2::<f64>::zeros((b, h_dim));
    let mut c_prev = Array2::<f64>::zeros((b, h_dim));
    for t in 0..t_len {
        let mut a = matmul(&h_prev.view(), &p.w_h);
        a += &xw.slice(s![t..;t_len, ..]);
        a += &p.b;
        let a = a.as_slice().expect("fresh array is contiguous");
        let hp = h_prev.as_slice_mut().expect("contiguous");
        let cp = c_prev.as_slice_mut().expect("contiguous");
        let [ci, cf, cg, co, cc, ctc, ch] = [
            &mut cache.i,
            &mut cache.f,
            &mut cache.g,
            &mut cache.o,
            &mut cache.c,
            &mut cache.tanh_c,
            &mut cache.h,
        ]
        .map(|x| x.as_slice_mut().expect("contiguous"));
        for bi in 0..b {
            let gates = &a[bi * 4 * h_dim..(bi + 1) * 4 * h_dim];
            let base = (bi * t_len + t) * h_dim;
            for k in 0..h_dim {
                let ig = sigmoid(gates[k]);
                let fg = sigmoid(gates[h_dim + k]);
                let gg = gates[2 * h_dim + k].tanh();
                let og = sigmoid(gates[3 * h_dim + k]);
                let c = fg * cp[bi * h_dim + k] + ig * gg;
                let tc = c.tanh();
                let h = og * tc;
                let at = base + k;
                (ci[at], cf[at], cg[at], co[at], cc[at], ctc[at], ch[at]) = (ig, fg, gg, og, c, tc, h);
                cp[bi * h_dim + k] = c;
                hp[bi * h_dim + k] = h;
            }
        }
    }
    cache
}

/// Returns `dL/d input` given `dL/d h` at every step.
fn lstm_backward(p: &LstmParams, cache: &LstmCache, dh_out: &Array3<f64>, grad: &mut LstmParams) -> Array3<f64> {
    let (b, t_len, h_dim) = cache.h.dim();
    let mut da = Array3::<f64>::zeros((b, t_len, 4 * h_dim));
    let mut h_prev_all = Array3::<f64>::zeros((b, t_len, h_dim));
    let mut dh_next = Array2::<f64>::zeros((b, h_dim));
    let mut dc_next = Array2::<f64>::zeros((b, h_dim));
    let [ci, cf, cg, co, cc, ctc, ch] =
        [&cache.i, &cache.f, &cache.g, &cache.o, &cache.c, &cache.tanh_c, &cache.h].map(|x| x.as_slice().expect("contiguous"));
    let dh_out = dh_out.as_slice().expect("contiguous");
    for t in (0..t_len).rev() {
        {
            let das = da.as_slice_mut().expect("contiguous");
            let hpa = h_prev_all.as_slice_mut().expect("contiguous");
            let dhn = dh_next.as_slice().expect("contiguous");
            let dcn = dc_next.as_slice_mut().expect("contiguous");
            for bi in 0..b {
                let base = (bi * t_len + t) * h_dim;
                let gate_base = (bi * t_len + t) * 4 * h_dim;
                for k in 0..h_dim {
                    let at = base + k;
                    let (ig, fg, gg, og, tc) = (ci[at], cf[at], cg[at], co[at], ctc[at]);
                    let c_prev = if t > 0 { cc[at - h_dim] } else { 0.0 };
                    let dh = dh_out[at] + dhn[bi * h_dim + k];
                    let dc = dcn[bi * h_dim + k] + dh * og * (1.0 - tc * tc);
                    das[gate_base + k] = dc * gg * ig * (1.0 - ig);
                    das[gate_base + h_dim + k] = dc * c_prev * fg * (1.0 - fg);
                    das[gate_base + 2 * h_dim + k] = dc * ig * (1.0 - gg * gg);
                    das[gate_base + 3 * h_dim + k] = dh * tc * og * (1.0 - og);
                    dcn[bi * h_dim + k] = dc * fg;
                    if t > 0 {
                        hpa[at] = ch[at - h_dim];
                    }
                }
            }
        }
        dh_next = da.index_axis(Axis(1), t).dot(&p.w_h.t());
    }
    let da_flat = flat(&da);
    grad.w_x += &flat(&cache.input).t().dot(&da_flat);
    grad.w_h += &flat(&h_prev_all).t().dot(&da_flat);
    grad.b += &da_flat.sum_axis(Axis(0));
    let d_in = da_flat.dot(&p.w_x.t());
    let d_in_dim = p.w_x.nrows();
    d_in.into_shape_with_order((b, t_len, d_in_dim)).expect("contiguous gradient")
}

/// Per-sample softmax cross-entropy and its gradient w.r.t. the scores.
fn softmax_ce(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = scores
        .iter()
        .enumerate()
        .map(|(k, s)| (s - lse).exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    (lse - scores[label], grad)
}

/// Cross-entropy of `softmax(pred)` against a one-hot label.
pub fn loss(pred: &[f64], label: usize) -> f64 {
    softmax_ce(pred, label).0
}

/// Mean loss over a batch of pre-sigmoid scores and `dL/d logits`.
pub fn batch_loss(logits: &Array2<f64>, labels: &[usize], logits_mode: bool) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (r, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        if logits_mode {
            let (l, g) = softmax_ce(row.as_slice().expect("row-major logits"), label);
            total += l;
            for (k, gk) in g.into_iter().enumerate() {
                grad[[r, k]] = gk / n;
            }
        } else {
            let s: Vec<f64> = row.iter().map(|&z| sigmoid(z)).collect();
            let (l, g) = softmax_ce(&s, label);
            total += l;
            for (k, gk) in g.into_iter().enumerate() {
                grad[[r, k]] = gk * s[k] * (1.0 - s[k]) / n;
            }
        }
    }
    (total / n, grad)
}

/// A reward model with its feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub config: ModelConfig,
    pub params: Parameters,
    pub normalizer: Option<Normalizer>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: RewardModel,
}

impl RewardModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, rng);
        Ok(Self { config, params, normalizer: None })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::zeros(&config);
        Ok(Self { config, params, normalizer: None })
    }

    fn forward_cached(&self, input: Array3<f64>, masks: Option<&DropoutMasks>) -> (Array2<f64>, ForwardCache) {
        let mut lstm = Vec::with_capacity(self.params.lstm.len());
        let mut x = input;
        for (l, p) in self.params.lstm.iter().enumerate() {
            let cache = lstm_forward(p, x);
            x = cache.h.clone();
            if let Some(m) = masks {
                x *= &m.lstm[l].view().insert_axis(Axis(1));
            }
            lstm.push(cache);
        }
        let last = x.dim().1 - 1;
        let mut z = x.index_axis(Axis(1), last).to_owned();
        let mut dense = Vec::with_capacity(self.params.dense.len());
        let n_dense = self.params.dense.len();
        for (j, p) in self.params.dense.iter().enumerate() {
            let pre = matmul(&z.view(), &p.w) + &p.b;
            let input = std::mem::replace(&mut z, pre.clone());
            if j + 1 < n_dense {
                z.mapv_inplace(|v| v.max(0.0));
                if let Some(m) = masks {
                    z *= &m.decoder[j];
                }
            }
            dense.push(DenseCache { input, pre });
        }
        (z, ForwardCache { lstm, dense })
    }

    /// Pre-sigmoid scores for a `B x steps x input` batch. `masks = None`
    /// is evaluation mode.
    pub fn logits(&self, batch: &Array3<f64>, masks: Option<&DropoutMasks>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let (z, _) = self.forward_cached(batch.to_owned(), masks);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite activation in forward pass".into()));
        }
        Ok(z)
    }

    /// Rewards in `(0, 1)` for a batch.
    pub fn forward(&self, batch: &Array3<f64>, masks: Option<&DropoutMasks>) -> Result<Array2<f64>> {
        Ok(self.logits(batch, masks)?.mapv(sigmoid))
    }

    /// Mean loss over the batch and the gradient of every parameter.
    pub fn gradients(
        &self,
        batch: &Array3<f64>,
        labels: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, Parameters)> {
        self.gradients_with_logits(batch, labels, masks).map(|(l, g, _)| (l, g))
    }

    /// [`RewardModel::gradients`] plus the forward-pass scores.
    pub fn gradients_with_logits(
        &self,
        batch: &Array3<f64>,
        labels: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, Parameters, Array2<f64>)> {
        self.check_batch(batch)?;
        if labels.len() != batch.dim().0 || labels.iter().any(|&l| l >= self.config.outputs) {
            return Err(Error::Model("labels do not match the batch or the output count".into()));
        }
        let (logits, cache) = self.forward_cached(batch.to_owned(), masks);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite activation in forward pass".into()));
        }
        let (loss, dlogits) = batch_loss(&logits, labels, self.config.logits_mode);
        let mut grad = Parameters::zeros(&self.config);

        let mut dz = dlogits;
        for j in (0..self.params.dense.len()).rev() {
            let c = &cache.dense[j];
            if j + 1 < self.params.dense.len() {
                if let Some(m) = masks {
                    dz *= &m.decoder[j];
                }
                Zip::from(&mut dz).and(&c.pre).for_each(|d, &p| {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grad.dense[j].w += &c.input.t().dot(&dz);
            grad.dense[j].b += &dz.sum_axis(Axis(0));
            dz = dz.dot(&self.params.dense[j].w.t());
        }

        let (b, t_len, _) = batch.dim();
        let h = self.config.hidden;
        let mut dh = Array3::<f64>::zeros((b, t_len, h));
        dh.index_axis_mut(Axis(1), t_len - 1).assign(&dz);
        for l in (0..self.params.lstm.len()).rev() {
            if let Some(m) = masks {
                dh *= &m.lstm[l].view().insert_axis(Axis(1));
            }
            dh = lstm_backward(&self.params.lstm[l], &cache.lstm[l], &dh, &mut grad.lstm[l]);
        }
        Ok((loss, grad, logits))
    }

    fn check_batch(&self, batch: &Array3<f64>) -> Result<()> {
        let (b, t, d) = batch.dim();
        if b == 0 || t == 0 || d != self.config.input {
            return Err(Error::Model(format!(
                "batch shape {:?} incompatible with input width {}",
                batch.dim(),
                self.config.input
            )));
        }
        Ok(())
    }

    /// Standardize a raw window with the stored normalizer. Windows that
    /// are already standardized are used as they are.
    pub fn prepare(&self, w: &Window) -> Result<Window> {
        match (&self.normalizer, w.is_normalized()) {
            (Some(n), false) => n.apply(w),
            _ => Ok(w.clone()),
        }
    }

    /// Evaluation-mode rewards for one window.
    pub fn rewards(&self, w: &Window) -> Result<Vec<f64>> {
        let w = self.prepare(w)?;
        let (t, d) = w.view().dim();
        let batch = w.view().to_owned().into_shape_with_order((1, t, d)).expect("contiguous window");
        Ok(self.forward(&batch, None)?.row(0).to_vec())
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let file = ModelFile { format: MODEL_FORMAT.into(), version: MODEL_VERSION, model: self.clone() };
        serde_json::to_writer(&mut out, &file)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(input)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                expected: format!("{MODEL_FORMAT} v{MODEL_VERSION}"),
                found: format!("{} v{}", file.format, file.version),
            });
        }
        let m = file.model;
        m.config.validate()?;
        if Parameters::zeros(&m.config).tensors().iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>()
            != m.params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>()
        {
            return Err(Error::Model("parameter shapes do not match the stored architecture".into()));
        }
        if !m.params.is_finite() {
            return Err(Error::Model("stored parameters are not finite".into()));
        }
        Ok(m)
    }

    pub fn save_path(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(f))
    }

    pub fn load_path(path: &std::path::Path) -> Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input: 5,
            hidden: 4,
            layers: 1,
            decoder: vec![5, 4],
            outputs: 3,
            steps: 3,
            lstm_dropout: 0.1,
            decoder_dropout: 0.2,
            logits_mode: false,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, d: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let m = RewardModel::zeros(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m.forward(&random_batch(&mut rng, 2, 15, 12), None).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_forward_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = RewardModel::new(ModelConfig::default(), &mut rng).unwrap();
        let x = random_batch(&mut rng, 3, 15, 12);
        let a = m.forward(&x, None).unwrap();
        let b = m.forward(&x, None).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        let masks = DropoutMasks::sample(&m.config, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let c = m.forward(&x, Some(&masks)).unwrap();
        let d = m.forward(&x, Some(&DropoutMasks::sample(&m.config, 3, &mut ChaCha8Rng::seed_from_u64(9)))).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn single_unit_cell_matches_hand_arithmetic() {
        let cfg = ModelConfig {
            input: 1,
            hidden: 1,
            layers: 1,
            decoder: vec![],
            outputs: 1,
            steps: 2,
            lstm_dropout: 0.0,
            decoder_dropout: 0.0,
            logits_mode: false,
        };
        let mut m = RewardModel::zeros(cfg).unwrap();
        // Gate order: input, forget, cell, output.
        let (wx, wh, b) = ([0.5, -0.3, 0.8, 0.2], [0.1, 0.4, -0.6, 0.7], [0.05, 1.0, -0.1, 0.2]);
        for k in 0..4 {
            m.params.lstm[0].w_x[[0, k]] = wx[k];
            m.params.lstm[0].w_h[[0, k]] = wh[k];
            m.params.lstm[0].b[k] = b[k];
        }
        m.params.dense[0].w[[0, 0]] = 1.5;
        m.params.dense[0].b[0] = -0.25;

        let xs = [0.7, -1.2];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for &x in &xs {
            let pre = |k: usize| wx[k] * x + wh[k] * h + b[k];
            let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
            c = f * c + i * g;
            h = o * c.tanh();
        }
        let expected = sig(1.5 * h - 0.25);
        let out = m.forward(&Array3::from_shape_vec((1, 2, 1), xs.to_vec()).unwrap(), None).unwrap();
        assert!((out[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        assert!((loss(&[0.4, 0.4, 0.4], 1) - 3f64.ln()).abs() < 1e-15);
        assert!(loss(&[0.99, 0.01, 0.01], 0) < 3f64.ln());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = rng.random_range(0..4);
            let direct = -(p[y].exp() / p.iter().map(|v| v.exp()).sum::<f64>()).ln();
            assert!((loss(&p, y) - direct).abs() < 1e-12);
        }
    }

    fn fd_check(cfg: ModelConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = RewardModel::new(cfg.clone(), &mut rng).unwrap();
        // Nonzero biases keep ReLU pre-activations away from the kink even
        // when a whole input row is dropped.
        for layer in &mut m.params.dense {
            layer.b.mapv_inplace(|_| rng.random_range(0.1..0.3) * if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
        let batch = random_batch(&mut rng, 4, cfg.steps, cfg.input);
        let labels = [0, 2, 1, 2];
        let masks = DropoutMasks::sample(&cfg, 4, &mut rng);
        let (_, grad) = m.gradients(&batch, &labels, Some(&masks)).unwrap();
        let eta = 1e-5;
        let loss_at = |p: &Parameters| {
            let probe = RewardModel { params: p.clone(), ..m.clone() };
            batch_loss(&probe.logits(&batch, Some(&masks)).unwrap(), &labels, cfg.logits_mode).0
        };
        let names: Vec<String> = m.params.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
        for (ti, name) in names.iter().enumerate() {
            for (k, &a) in analytic[ti].iter().enumerate() {
                let mut plus = m.params.clone();
                let mut minus = m.params.clone();
                *plus.tensors_mut()[ti].iter_mut().nth(k).unwrap() += eta;
                *minus.tensors_mut()[ti].iter_mut().nth(k).unwrap() -= eta;
                let n = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eta);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{name}[{k}]: analytic {a}, numeric {n}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(tiny_config(), 11);
    }

    #[test]
    fn gradients_match_finite_differences_two_layers_logits_mode() {
        fd_check(ModelConfig { layers: 2, logits_mode: true, ..tiny_config() }, 12);
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        let cfg = ModelConfig { logits_mode: true, ..tiny_config() };
        let mut m = RewardModel::zeros(cfg).unwrap();
        m.params.dense[2].b.assign(&Array1::from(vec![60.0, -60.0, -60.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, g) = m.gradients(&random_batch(&mut rng, 2, 3, 5), &[0, 0], None).unwrap();
        assert!(l < 1e-30 && g.norm() < 1e-30);
    }

    #[test]
    fn duplicated_batch_elements_get_identical_gradients() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = RewardModel::new(cfg.clone(), &mut rng).unwrap();
        let one = random_batch(&mut rng, 1, 3, 5);
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let (_, g1) = m.gradients(&one, &[1], None).unwrap();
        let (_, g2) = m.gradients(&two, &[1, 1], None).unwrap();
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = RewardModel::new(ModelConfig::default(), &mut rng).unwrap();
        m.normalizer = Some(Normalizer { mean: (0..12).map(|k| k as f64 / 7.0).collect(), scale: vec![0.3; 12] });
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = RewardModel::load(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
        let x = random_batch(&mut rng, 2, 15, 12);
        assert_eq!(back.forward(&x, None).unwrap(), m.forward(&x, None).unwrap());

        let tampered = String::from_utf8(buf).unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(RewardModel::load(tampered.as_bytes()), Err(Error::VersionMismatch { .. })));
    }
}
