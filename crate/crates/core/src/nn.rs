//! The next-event predictor: two stacked LSTM cells, a dropout layer and a
//! dense softmax head, with exact backpropagation through time.
//!
//! The network is many-to-one: it consumes `window_size` one-hot encoded
//! events and emits a probability for every event in the vocabulary. All
//! arithmetic is f64 and every reduction runs in a fixed order, so training
//! is bit-reproducible for a given seed (including under `rayon`: windows
//! are folded in fixed-size groups that are combined in index order).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowBatch;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};
use crate::{derive_seed, mix64};

/// Seed-stream tags; changing them invalidates persisted models.
const TAG_INIT: u64 = 0x494e_4954;
/// Windows per deterministic reduction group. The gradient of a batch is the
/// in-order sum of per-group sums, so the result does not depend on how many
/// threads computed the groups.
const REDUCTION_GROUP: usize = 64;

/// Parameters of one LSTM cell. Each weight matrix is
/// `hidden_size x (hidden_size + input_size)` and multiplies the
/// concatenation `[h_prev; x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Vector,
    pub b_i: Vector,
    pub b_c: Vector,
    pub b_o: Vector,
}

impl LstmCellParams {
    pub fn zeros(hidden_size: usize, input_size: usize) -> Self {
        let w = || Matrix::zeros(hidden_size, hidden_size + input_size);
        let b = || Vector::zeros(hidden_size);
        Self {
            w_f: w(),
            w_i: w(),
            w_c: w(),
            w_o: w(),
            b_f: b(),
            b_i: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_f.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_f.cols() - self.w_f.rows()
    }
}

/// Hidden and cell state of one LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        Self {
            h: Vector::zeros(hidden_size),
            c: Vector::zeros(hidden_size),
        }
    }
}

/// The full model: LSTM -> LSTM -> dropout -> dense softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub cell1: LstmCellParams,
    pub cell2: LstmCellParams,
    pub dense_w: Matrix,
    pub dense_b: Vector,
    pub dropout_rate: f64,
    pub hidden_size: usize,
    pub vocabulary_size: usize,
    pub window_size: usize,
    pub seed: u64,
}

/// Forward mode: `Train` applies inverted dropout from the supplied RNG,
/// `Infer` is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One time step's input: either a dense slice of `input_size` reals or the
/// index of the single 1.0 in a one-hot vector. The one-hot path computes
/// exactly what the dense path would (zero terms contribute exactly 0.0).
#[derive(Debug, Clone)]
enum StepX {
    Dense(Vec<f64>),
    Hot(usize),
}

/// Everything the backward pass needs from one cell step.
#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Intermediates of one window's forward pass, sufficient for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    xs: Vec<StepX>,
    steps1: Vec<StepCache>,
    steps2: Vec<StepCache>,
    /// Per-unit dropout multiplier (0.0 or 1/(1-rate); all 1.0 when inactive).
    mask: Vec<f64>,
    h_drop: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

/// Gradients shape-matched to `LstmModel`.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub cell1: LstmCellParams,
    pub cell2: LstmCellParams,
    pub dense_w: Matrix,
    pub dense_b: Vector,
}

impl GradientSet {
    pub fn zeros_like(model: &LstmModel) -> Self {
        Self {
            cell1: LstmCellParams::zeros(model.hidden_size, model.vocabulary_size),
            cell2: LstmCellParams::zeros(model.hidden_size, model.hidden_size),
            dense_w: Matrix::zeros(model.vocabulary_size, model.hidden_size),
            dense_b: Vector::zeros(model.vocabulary_size),
        }
    }

    fn arrays(&self) -> [&[f64]; 18] {
        [
            self.cell1.w_f.data(),
            self.cell1.w_i.data(),
            self.cell1.w_c.data(),
            self.cell1.w_o.data(),
            self.cell1.b_f.data(),
            self.cell1.b_i.data(),
            self.cell1.b_c.data(),
            self.cell1.b_o.data(),
            self.cell2.w_f.data(),
            self.cell2.w_i.data(),
            self.cell2.w_c.data(),
            self.cell2.w_o.data(),
            self.cell2.b_f.data(),
            self.cell2.b_i.data(),
            self.cell2.b_c.data(),
            self.cell2.b_o.data(),
            self.dense_w.data(),
            self.dense_b.data(),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut [f64]; 18] {
        [
            self.cell1.w_f.data_mut(),
            self.cell1.w_i.data_mut(),
            self.cell1.w_c.data_mut(),
            self.cell1.w_o.data_mut(),
            self.cell1.b_f.data_mut(),
            self.cell1.b_i.data_mut(),
            self.cell1.b_c.data_mut(),
            self.cell1.b_o.data_mut(),
            self.cell2.w_f.data_mut(),
            self.cell2.w_i.data_mut(),
            self.cell2.w_c.data_mut(),
            self.cell2.w_o.data_mut(),
            self.cell2.b_f.data_mut(),
            self.cell2.b_i.data_mut(),
            self.cell2.b_c.data_mut(),
            self.cell2.b_o.data_mut(),
            self.dense_w.data_mut(),
            self.dense_b.data_mut(),
        ]
    }

    fn add_assign(&mut self, other: &GradientSet) {
        let mut mine = self.arrays_mut();
        let theirs = other.arrays();
        for (dst, src) in mine.iter_mut().zip(theirs) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for arr in self.arrays_mut().iter_mut() {
            for v in arr.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sum = 0.0;
        for arr in self.arrays() {
            for &v in arr {
                sum += v * v;
            }
        }
        sum.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

impl LstmModel {
    fn param_arrays_mut(&mut self) -> [&mut [f64]; 18] {
        [
            self.cell1.w_f.data_mut(),
            self.cell1.w_i.data_mut(),
            self.cell1.w_c.data_mut(),
            self.cell1.w_o.data_mut(),
            self.cell1.b_f.data_mut(),
            self.cell1.b_i.data_mut(),
            self.cell1.b_c.data_mut(),
            self.cell1.b_o.data_mut(),
            self.cell2.w_f.data_mut(),
            self.cell2.w_i.data_mut(),
            self.cell2.w_c.data_mut(),
            self.cell2.w_o.data_mut(),
            self.cell2.b_f.data_mut(),
            self.cell2.b_i.data_mut(),
            self.cell2.b_c.data_mut(),
            self.cell2.b_o.data_mut(),
            self.dense_w.data_mut(),
            self.dense_b.data_mut(),
        ]
    }
}

/// Builds a model with Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))
/// per matrix), zero biases except the forget-gate biases which start at 1.0.
/// Bit-deterministic for a given seed.
pub fn init_model(
    vocabulary_size: usize,
    hidden_size: usize,
    window_size: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<LstmModel> {
    if vocabulary_size < 2 {
        return Err(Error::InvalidParameter(format!(
            "vocabulary_size must be >= 2, got {vocabulary_size}"
        )));
    }
    if hidden_size < 1 || window_size < 1 {
        return Err(Error::InvalidParameter(
            "hidden_size and window_size must be >= 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout_rate must be in [0,1), got {dropout_rate}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, TAG_INIT));
    let mut glorot = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Matrix::new(rows, cols, data).expect("finite init")
    };

    let mut cell = |input_size: usize| {
        let cols = hidden_size + input_size;
        LstmCellParams {
            w_f: glorot(hidden_size, cols, cols, hidden_size),
            w_i: glorot(hidden_size, cols, cols, hidden_size),
            w_c: glorot(hidden_size, cols, cols, hidden_size),
            w_o: glorot(hidden_size, cols, cols, hidden_size),
            b_f: Vector::new(vec![1.0; hidden_size]).expect("finite"),
            b_i: Vector::zeros(hidden_size),
            b_c: Vector::zeros(hidden_size),
            b_o: Vector::zeros(hidden_size),
        }
    };

    let cell1 = cell(vocabulary_size);
    let cell2 = cell(hidden_size);
    let dense_w = glorot(vocabulary_size, hidden_size, hidden_size, vocabulary_size);

    Ok(LstmModel {
        cell1,
        cell2,
        dense_w,
        dense_b: Vector::zeros(vocabulary_size),
        dropout_rate,
        hidden_size,
        vocabulary_size,
        window_size,
        seed,
    })
}

/// Gate pre-activation: out = b + W[:, :H]·h_prev + W[:, H:]·x.
/// Four rows are accumulated in parallel chains; each row's term order is
/// fixed (bias, h terms in index order, x terms in index order).
fn gate_pre(w: &Matrix, b: &Vector, h_prev: &[f64], x: &StepX, out: &mut [f64]) {
    let hidden = h_prev.len();
    let stride = w.cols();
    out.copy_from_slice(b.data());
    let wd = w.data();
    let rows = w.rows();

    // h part: out[r] += dot(w[r, 0..hidden], h_prev)
    let mut r = 0;
    while r + 4 <= rows {
        let r0 = &wd[r * stride..r * stride + hidden];
        let r1 = &wd[(r + 1) * stride..(r + 1) * stride + hidden];
        let r2 = &wd[(r + 2) * stride..(r + 2) * stride + hidden];
        let r3 = &wd[(r + 3) * stride..(r + 3) * stride + hidden];
        let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..hidden {
            let hj = h_prev[j];
            a0 += r0[j] * hj;
            a1 += r1[j] * hj;
            a2 += r2[j] * hj;
            a3 += r3[j] * hj;
        }
        out[r] += a0;
        out[r + 1] += a1;
        out[r + 2] += a2;
        out[r + 3] += a3;
        r += 4;
    }
    while r < rows {
        let row = &wd[r * stride..r * stride + hidden];
        let mut acc = 0.0;
        for j in 0..hidden {
            acc += row[j] * h_prev[j];
        }
        out[r] += acc;
        r += 1;
    }

    // x part
    match x {
        StepX::Hot(idx) => {
            for r in 0..rows {
                out[r] += wd[r * stride + hidden + idx];
            }
        }
        StepX::Dense(xv) => {
            for r in 0..rows {
                let row = &wd[r * stride + hidden..(r + 1) * stride];
                let mut acc = 0.0;
                for (wv, xv) in row.iter().zip(xv) {
                    acc += wv * xv;
                }
                out[r] += acc;
            }
        }
    }
}

fn cell_step(params: &LstmCellParams, h_prev: &[f64], c_prev: &[f64], x: &StepX) -> StepCache {
    let hidden = params.hidden_size();
    let mut f = vec![0.0; hidden];
    let mut i = vec![0.0; hidden];
    let mut g = vec![0.0; hidden];
    let mut o = vec![0.0; hidden];
    gate_pre(&params.w_f, &params.b_f, h_prev, x, &mut f);
    gate_pre(&params.w_i, &params.b_i, h_prev, x, &mut i);
    gate_pre(&params.w_c, &params.b_c, h_prev, x, &mut g);
    gate_pre(&params.w_o, &params.b_o, h_prev, x, &mut o);
    for v in f.iter_mut() {
        *v = numerics::sigmoid_scalar(*v);
    }
    for v in i.iter_mut() {
        *v = numerics::sigmoid_scalar(*v);
    }
    for v in g.iter_mut() {
        *v = v.tanh();
    }
    for v in o.iter_mut() {
        *v = numerics::sigmoid_scalar(*v);
    }

    let mut c = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for k in 0..hidden {
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }

    StepCache {
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        f,
        i,
        g,
        o,
        c,
        tanh_c,
        h,
    }
}

/// One LSTM step per the gate equations: f, i and o are sigmoid gates over
/// `[h_prev; x]`, the candidate is tanh, `c = f*c_prev + i*candidate`,
/// `h = o*tanh(c)`.
pub fn lstm_step(params: &LstmCellParams, x: &Vector, prev: &LstmState) -> Result<LstmState> {
    if x.len() != params.input_size() {
        return Err(Error::DimensionMismatch {
            op: "lstm_step",
            left: format!("input_size {}", params.input_size()),
            right: format!("x of length {}", x.len()),
        });
    }
    if prev.h.len() != params.hidden_size() || prev.c.len() != params.hidden_size() {
        return Err(Error::DimensionMismatch {
            op: "lstm_step",
            left: format!("hidden_size {}", params.hidden_size()),
            right: format!("state of length {}", prev.h.len()),
        });
    }
    let cache = cell_step(
        params,
        prev.h.data(),
        prev.c.data(),
        &StepX::Dense(x.data().to_vec()),
    );
    Ok(LstmState {
        h: Vector::from_raw(cache.h),
        c: Vector::from_raw(cache.c),
    })
}

/// Returns the index of the single 1.0 if the slice is exactly one-hot.
fn hot_index(slice: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in slice.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

fn window_inputs(model: &LstmModel, window: &[f64]) -> Result<Vec<StepX>> {
    let v = model.vocabulary_size;
    if window.len() != model.window_size * v {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: format!("window {}x{}", model.window_size, v),
            right: format!("slice of length {}", window.len()),
        });
    }
    Ok(window
        .chunks_exact(v)
        .map(|step| match hot_index(step) {
            Some(idx) => StepX::Hot(idx),
            None => StepX::Dense(step.to_vec()),
        })
        .collect())
}

fn forward_steps(model: &LstmModel, xs: Vec<StepX>, mode: Mode, rng: &mut impl Rng) -> ForwardCache {
    let hidden = model.hidden_size;
    let steps = xs.len();
    let mut steps1 = Vec::with_capacity(steps);
    let mut steps2 = Vec::with_capacity(steps);

    let mut h1 = vec![0.0; hidden];
    let mut c1 = vec![0.0; hidden];
    let mut h2 = vec![0.0; hidden];
    let mut c2 = vec![0.0; hidden];
    for x in &xs {
        let s1 = cell_step(&model.cell1, &h1, &c1, x);
        h1.copy_from_slice(&s1.h);
        c1.copy_from_slice(&s1.c);
        let s2 = cell_step(&model.cell2, &h2, &c2, &StepX::Dense(s1.h.clone()));
        h2.copy_from_slice(&s2.h);
        c2.copy_from_slice(&s2.c);
        steps1.push(s1);
        steps2.push(s2);
    }

    // Inverted dropout: survivors are scaled at train time so inference is
    // the identity.
    let mask: Vec<f64> = if mode == Mode::Train && model.dropout_rate > 0.0 {
        let keep_scale = 1.0 / (1.0 - model.dropout_rate);
        (0..hidden)
            .map(|_| {
                if rng.gen::<f64>() < model.dropout_rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    } else {
        vec![1.0; hidden]
    };
    let h_drop: Vec<f64> = h2.iter().zip(&mask).map(|(&h, &m)| h * m).collect();

    let mut logits = vec![0.0; model.vocabulary_size];
    numerics::matvec_into(
        model.dense_w.data(),
        model.vocabulary_size,
        hidden,
        &h_drop,
        &mut logits,
    );
    for (l, b) in logits.iter_mut().zip(model.dense_b.data()) {
        *l += *b;
    }
    numerics::softmax_in_place(&mut logits);

    ForwardCache {
        xs,
        steps1,
        steps2,
        mask,
        h_drop,
        probs: logits,
    }
}

/// Full forward pass over one window (flat `window_size * vocabulary_size`
/// one-hot slice). Returns the probability vector and a cache for backprop.
pub fn forward(
    model: &LstmModel,
    window: &[f64],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Vector, ForwardCache)> {
    let xs = window_inputs(model, window)?;
    let cache = forward_steps(model, xs, mode, rng);
    Ok((Vector::from_raw(cache.probs.clone()), cache))
}

/// Inference-mode probabilities without keeping a cache; buffers are reused
/// across steps so scoring large test sets stays allocation-light.
pub fn forward_infer_probs(model: &LstmModel, indices: &[usize]) -> Result<Vec<f64>> {
    let hidden = model.hidden_size;
    for &idx in indices {
        if idx >= model.vocabulary_size {
            return Err(Error::IndexOutOfRange {
                index: idx,
                vocabulary_size: model.vocabulary_size,
            });
        }
    }
    let mut h1 = vec![0.0; hidden];
    let mut c1 = vec![0.0; hidden];
    let mut h2 = vec![0.0; hidden];
    let mut c2 = vec![0.0; hidden];
    let mut f = vec![0.0; hidden];
    let mut i = vec![0.0; hidden];
    let mut g = vec![0.0; hidden];
    let mut o = vec![0.0; hidden];

    let mut step = |params: &LstmCellParams,
                    h: &mut Vec<f64>,
                    c: &mut Vec<f64>,
                    x: &StepX,
                    f: &mut Vec<f64>,
                    i: &mut Vec<f64>,
                    g: &mut Vec<f64>,
                    o: &mut Vec<f64>| {
        gate_pre(&params.w_f, &params.b_f, h, x, f);
        gate_pre(&params.w_i, &params.b_i, h, x, i);
        gate_pre(&params.w_c, &params.b_c, h, x, g);
        gate_pre(&params.w_o, &params.b_o, h, x, o);
        for k in 0..h.len() {
            let fk = numerics::sigmoid_scalar(f[k]);
            let ik = numerics::sigmoid_scalar(i[k]);
            let gk = g[k].tanh();
            let ok = numerics::sigmoid_scalar(o[k]);
            c[k] = fk * c[k] + ik * gk;
            h[k] = ok * c[k].tanh();
        }
    };

    let mut x2 = vec![0.0; hidden];
    for &idx in indices {
        step(
            &model.cell1,
            &mut h1,
            &mut c1,
            &StepX::Hot(idx),
            &mut f,
            &mut i,
            &mut g,
            &mut o,
        );
        x2.copy_from_slice(&h1);
        step(
            &model.cell2,
            &mut h2,
            &mut c2,
            &StepX::Dense(x2.clone()),
            &mut f,
            &mut i,
            &mut g,
            &mut o,
        );
    }

    let mut logits = vec![0.0; model.vocabulary_size];
    numerics::matvec_into(
        model.dense_w.data(),
        model.vocabulary_size,
        hidden,
        &h2,
        &mut logits,
    );
    for (l, b) in logits.iter_mut().zip(model.dense_b.data()) {
        *l += *b;
    }
    numerics::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Categorical cross-entropy for one window: -ln p[target], with p clamped
/// at 1e-15 so a (numerically) zero probability stays finite.
pub fn loss(probabilities: &Vector, target: usize) -> Result<f64> {
    if target >= probabilities.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            vocabulary_size: probabilities.len(),
        });
    }
    Ok(-probabilities.data()[target].max(1e-15).ln())
}

/// Mean loss over a batch (train-mode forwards, RNG consumed in window order).
pub fn cost(model: &LstmModel, batch: &WindowBatch, rng: &mut impl Rng) -> Result<f64> {
    Ok(cost_with_caches(model, batch, rng)?.0)
}

/// As `cost`, returning the per-window caches needed by `backward`.
pub fn cost_with_caches(
    model: &LstmModel,
    batch: &WindowBatch,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<ForwardCache>)> {
    if batch.batch_count() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut caches = Vec::with_capacity(batch.batch_count());
    let mut total = 0.0;
    for b in 0..batch.batch_count() {
        let xs = window_inputs(model, batch.window(b))?;
        let cache = forward_steps(model, xs, Mode::Train, rng);
        total += loss(&Vector::from_raw(cache.probs.clone()), batch.targets()[b])?;
        caches.push(cache);
    }
    Ok((total / batch.batch_count() as f64, caches))
}

/// dz = W^T·u restricted to a column range of W, accumulated into out.
fn accumulate_wt(w: &Matrix, col_from: usize, col_to: usize, u: &[f64], out: &mut [f64]) {
    let stride = w.cols();
    let wd = w.data();
    for (r, &ur) in u.iter().enumerate() {
        let row = &wd[r * stride + col_from..r * stride + col_to];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * ur;
        }
    }
}

struct CellGradSink<'a> {
    params: &'a LstmCellParams,
    grads: &'a mut LstmCellParams,
}

/// Backward through one cell step. `d_h` is the total gradient on h_t,
/// `d_c_next` the gradient flowing back from C_{t+1}. Returns gradients for
/// (h_prev, c_prev) and, when requested, the dense input x.
#[allow(clippy::too_many_arguments)]
fn cell_backward_step(
    sink: &mut CellGradSink<'_>,
    step: &StepCache,
    x: &StepX,
    d_h: &[f64],
    d_c_next: &[f64],
    d_h_prev: &mut [f64],
    d_c_prev: &mut [f64],
    mut d_x: Option<&mut [f64]>,
) {
    let hidden = step.h.len();
    let mut d_c = vec![0.0; hidden];
    let mut dpre_f = vec![0.0; hidden];
    let mut dpre_i = vec![0.0; hidden];
    let mut dpre_g = vec![0.0; hidden];
    let mut dpre_o = vec![0.0; hidden];

    for k in 0..hidden {
        let dtanh = d_h[k] * step.o[k];
        d_c[k] = d_c_next[k] + dtanh * (1.0 - step.tanh_c[k] * step.tanh_c[k]);
        dpre_o[k] = d_h[k] * step.tanh_c[k] * step.o[k] * (1.0 - step.o[k]);
        dpre_f[k] = d_c[k] * step.c_prev[k] * step.f[k] * (1.0 - step.f[k]);
        dpre_i[k] = d_c[k] * step.g[k] * step.i[k] * (1.0 - step.i[k]);
        dpre_g[k] = d_c[k] * step.i[k] * (1.0 - step.g[k] * step.g[k]);
        d_c_prev[k] = d_c[k] * step.f[k];
    }

    let input_size = sink.params.input_size();
    let stride = hidden + input_size;
    let gates: [(&Matrix, &mut Matrix, &mut Vector, &[f64]); 4] = [
        (
            &sink.params.w_f,
            &mut sink.grads.w_f,
            &mut sink.grads.b_f,
            &dpre_f,
        ),
        (
            &sink.params.w_i,
            &mut sink.grads.w_i,
            &mut sink.grads.b_i,
            &dpre_i,
        ),
        (
            &sink.params.w_c,
            &mut sink.grads.w_c,
            &mut sink.grads.b_c,
            &dpre_g,
        ),
        (
            &sink.params.w_o,
            &mut sink.grads.w_o,
            &mut sink.grads.b_o,
            &dpre_o,
        ),
    ];

    d_h_prev.fill(0.0);
    for (w, gw, gb, dpre) in gates {
        let gwd = gw.data_mut();
        // dW[:, :hidden] += dpre x h_prev; dW[:, hidden:] += dpre x x
        for r in 0..hidden {
            let dr = dpre[r];
            let row = &mut gwd[r * stride..r * stride + hidden];
            for (a, &hv) in row.iter_mut().zip(&step.h_prev) {
                *a += dr * hv;
            }
            match x {
                StepX::Hot(idx) => gwd[r * stride + hidden + idx] += dr,
                StepX::Dense(xv) => {
                    let row = &mut gwd[r * stride + hidden..(r + 1) * stride];
                    for (a, &xvv) in row.iter_mut().zip(xv) {
                        *a += dr * xvv;
                    }
                }
            }
        }
        for (b, &d) in gb.data_mut().iter_mut().zip(dpre) {
            *b += d;
        }
        accumulate_wt(w, 0, hidden, dpre, d_h_prev);
        if let Some(dx) = d_x.as_deref_mut() {
            accumulate_wt(w, hidden, stride, dpre, dx);
        }
    }
}

/// Accumulates one window's gradient contribution (of the summed batch loss)
/// into `acc`.
fn backward_window(model: &LstmModel, cache: &ForwardCache, target: usize, acc: &mut GradientSet) {
    let hidden = model.hidden_size;
    let vocab = model.vocabulary_size;
    let steps = cache.steps1.len();

    // Combined softmax + cross-entropy gradient at the logits.
    let mut dlogits = cache.probs.clone();
    dlogits[target] -= 1.0;

    numerics::add_outer(
        acc.dense_w.data_mut(),
        vocab,
        hidden,
        &dlogits,
        &cache.h_drop,
    );
    for (b, &d) in acc.dense_b.data_mut().iter_mut().zip(&dlogits) {
        *b += d;
    }

    // Into the dropout output, then through the mask.
    let mut d_h2 = vec![0.0; hidden];
    numerics::matvec_t_accumulate(model.dense_w.data(), vocab, hidden, &dlogits, &mut d_h2);
    for (d, &m) in d_h2.iter_mut().zip(&cache.mask) {
        *d *= m;
    }

    // Layer 2 BPTT; collect the gradient w.r.t. its inputs (= layer-1 h_t).
    let mut d_x2: Vec<Vec<f64>> = vec![vec![0.0; hidden]; steps];
    {
        let mut sink = CellGradSink {
            params: &model.cell2,
            grads: &mut acc.cell2,
        };
        let mut d_h = d_h2;
        let mut d_c = vec![0.0; hidden];
        let mut d_h_prev = vec![0.0; hidden];
        let mut d_c_prev = vec![0.0; hidden];
        for t in (0..steps).rev() {
            let x2 = StepX::Dense(cache.steps1[t].h.clone());
            cell_backward_step(
                &mut sink,
                &cache.steps2[t],
                &x2,
                &d_h,
                &d_c,
                &mut d_h_prev,
                &mut d_c_prev,
                Some(&mut d_x2[t]),
            );
            d_h.copy_from_slice(&d_h_prev);
            d_c.copy_from_slice(&d_c_prev);
        }
    }

    // Layer 1 BPTT; recurrent gradient plus the per-step feed into layer 2.
    {
        let mut sink = CellGradSink {
            params: &model.cell1,
            grads: &mut acc.cell1,
        };
        let mut d_h = vec![0.0; hidden];
        let mut d_c = vec![0.0; hidden];
        let mut d_h_prev = vec![0.0; hidden];
        let mut d_c_prev = vec![0.0; hidden];
        for t in (0..steps).rev() {
            for (a, &b) in d_h.iter_mut().zip(&d_x2[t]) {
                *a += b;
            }
            cell_backward_step(
                &mut sink,
                &cache.steps1[t],
                &cache.xs[t],
                &d_h,
                &d_c,
                &mut d_h_prev,
                &mut d_c_prev,
                None,
            );
            d_h.copy_from_slice(&d_h_prev);
            d_c.copy_from_slice(&d_c_prev);
        }
    }
}

/// Exact gradients of the mean batch loss w.r.t. every parameter, via BPTT
/// across both cells, the dropout mask and the dense softmax head.
/// `caches` must come from train-mode forwards over this batch.
pub fn backward(
    model: &LstmModel,
    batch: &WindowBatch,
    caches: &[ForwardCache],
) -> Result<GradientSet> {
    let m = batch.batch_count();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if caches.len() != m {
        return Err(Error::DimensionMismatch {
            op: "backward",
            left: format!("batch of {m}"),
            right: format!("{} caches", caches.len()),
        });
    }
    let targets = batch.targets();
    let groups: Vec<GradientSet> = caches
        .par_chunks(REDUCTION_GROUP)
        .enumerate()
        .map(|(gi, group)| {
            let mut acc = GradientSet::zeros_like(model);
            for (k, cache) in group.iter().enumerate() {
                backward_window(model, cache, targets[gi * REDUCTION_GROUP + k], &mut acc);
            }
            acc
        })
        .collect();
    let mut total = GradientSet::zeros_like(model);
    for g in &groups {
        total.add_assign(g);
    }
    total.scale(1.0 / m as f64);
    Ok(total)
}

/// Fused forward + backward over a batch with deterministic parallelism.
/// Per-window dropout masks are seeded from `mask_nonce` and the window index
/// so the result is independent of thread scheduling. Returns the mean cost
/// and the mean-loss gradient.
pub fn batch_gradients(
    model: &LstmModel,
    batch: &WindowBatch,
    mask_nonce: u64,
) -> Result<(f64, GradientSet)> {
    let m = batch.batch_count();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let targets = batch.targets();
    let results: Vec<(f64, GradientSet)> = (0..m)
        .collect::<Vec<_>>()
        .par_chunks(REDUCTION_GROUP)
        .map(|group| {
            let mut acc = GradientSet::zeros_like(model);
            let mut cost_sum = 0.0;
            for &b in group {
                let xs: Vec<StepX> = batch
                    .window(b)
                    .chunks_exact(model.vocabulary_size)
                    .map(|step| match hot_index(step) {
                        Some(idx) => StepX::Hot(idx),
                        None => StepX::Dense(step.to_vec()),
                    })
                    .collect();
                let mut rng = ChaCha12Rng::seed_from_u64(mask_nonce ^ mix64(b as u64));
                let cache = forward_steps(model, xs, Mode::Train, &mut rng);
                cost_sum += -cache.probs[targets[b]].max(1e-15).ln();
                backward_window(model, &cache, targets[b], &mut acc);
            }
            (cost_sum, acc)
        })
        .collect();

    let mut total = GradientSet::zeros_like(model);
    let mut cost_sum = 0.0;
    for (c, g) in &results {
        cost_sum += c;
        total.add_assign(g);
    }
    total.scale(1.0 / m as f64);
    Ok((cost_sum / m as f64, total))
}

/// One SGD update: clip the gradient to `clip_norm` (global L2), then
/// p := p - lr·g. Errors on non-finite gradients (divergence signal).
pub fn sgd_step(
    model: &mut LstmModel,
    grads: &GradientSet,
    learning_rate: f64,
    clip_norm: f64,
) -> Result<()> {
    if learning_rate <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "learning_rate must be > 0, got {learning_rate}"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let norm = grads.global_norm();
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    let step = learning_rate * scale;
    let mut params = model.param_arrays_mut();
    let gradient_arrays = grads.arrays();
    for (p, g) in params.iter_mut().zip(gradient_arrays) {
        for (pv, &gv) in p.iter_mut().zip(g) {
            *pv -= step * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{batch_windows, Window};

    fn tiny_model(vocab: usize, hidden: usize, window: usize, dropout: f64) -> LstmModel {
        init_model(vocab, hidden, window, dropout, 42).unwrap()
    }

    fn batch_of(windows: &[Window], vocab: usize) -> WindowBatch {
        batch_windows(windows.to_vec(), windows.len(), vocab)
            .next()
            .unwrap()
    }

    fn make_windows(vocab: usize, window: usize, specs: &[(&[usize], usize)]) -> Vec<Window> {
        specs
            .iter()
            .map(|(inputs, target)| {
                assert_eq!(inputs.len(), window);
                Window {
                    inputs: inputs.to_vec(),
                    target: *target,
                    target_label: false,
                    target_position: window,
                }
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_model(182, 64, 30, 0.2, 7).unwrap();
        let b = init_model(182, 64, 30, 0.2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dense_w.rows(), 182);
        assert_eq!(a.dense_w.cols(), 64);
        assert_eq!(a.cell1.w_f.cols(), 64 + 182);
        assert_eq!(a.cell2.w_f.cols(), 64 + 64);
        let c = init_model(182, 64, 30, 0.2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_glorot_bounds_and_forget_bias() {
        let m = tiny_model(10, 6, 3, 0.0);
        let bound = (6.0 / (16 + 6) as f64).sqrt();
        assert!(m.cell1.w_f.data().iter().all(|v| v.abs() <= bound));
        assert!(m.cell1.b_f.data().iter().all(|&v| v == 1.0));
        assert!(m.cell1.b_i.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_model(1, 4, 3, 0.0, 0).is_err());
        assert!(init_model(4, 0, 3, 0.0, 0).is_err());
        assert!(init_model(4, 4, 3, 1.0, 0).is_err());
    }

    /// Hand-derived oracle for the gate equations with all parameters zero:
    /// every sigmoid gate is 0.5, the candidate is 0, so
    /// c = 0.5*c_prev and h = 0.5*tanh(0.5*c_prev).
    #[test]
    fn lstm_step_zero_params_hand_oracle() {
        let params = LstmCellParams::zeros(3, 2);
        let c0 = [0.4, -1.2, 0.9];
        let prev = LstmState {
            h: Vector::new(vec![0.3, -0.5, 0.1]).unwrap(),
            c: Vector::new(c0.to_vec()).unwrap(),
        };
        let x = Vector::new(vec![0.7, -0.2]).unwrap();
        let next = lstm_step(&params, &x, &prev).unwrap();
        for k in 0..3 {
            let expect_c = 0.5 * c0[k];
            let expect_h = 0.5 * (0.5 * c0[k]).tanh();
            assert!((next.c.data()[k] - expect_c).abs() < 1e-12);
            assert!((next.h.data()[k] - expect_h).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_zero_params_zero_state_fixed_point() {
        let params = LstmCellParams::zeros(4, 3);
        let prev = LstmState::zeros(4);
        let x = Vector::zeros(3);
        let next = lstm_step(&params, &x, &prev).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_h_strictly_bounded() {
        let m = tiny_model(5, 4, 3, 0.0);
        let mut state = LstmState::zeros(4);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = Vector::new((0..5).map(|_| rng.gen::<f64>() * 2e3 - 1e3).collect()).unwrap();
            state = lstm_step(&m.cell1, &x, &state).unwrap();
            assert!(state.h.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn lstm_step_dimension_mismatch() {
        let params = LstmCellParams::zeros(3, 2);
        let prev = LstmState::zeros(3);
        assert!(lstm_step(&params, &Vector::zeros(5), &prev).is_err());
    }

    #[test]
    fn forward_probabilities_contract() {
        let m = tiny_model(6, 5, 4, 0.0);
        let mut window = vec![0.0; 4 * 6];
        for (t, idx) in [1usize, 3, 0, 5].iter().enumerate() {
            window[t * 6 + idx] = 1.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (p, _) = forward(&m, &window, Mode::Infer, &mut rng).unwrap();
        assert_eq!(p.len(), 6);
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.data().iter().all(|&x| x > 0.0));
        // Infer mode is deterministic.
        let (q, _) = forward(&m, &window, Mode::Infer, &mut rng).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn dropout_zero_train_equals_infer() {
        let m = tiny_model(5, 4, 3, 0.0);
        let mut window = vec![0.0; 3 * 5];
        for (t, idx) in [2usize, 0, 4].iter().enumerate() {
            window[t * 5 + idx] = 1.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (train_p, _) = forward(&m, &window, Mode::Train, &mut rng).unwrap();
        let (infer_p, _) = forward(&m, &window, Mode::Infer, &mut rng).unwrap();
        assert_eq!(train_p, infer_p);
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        // A one-hot window fed as dense data must produce identical values:
        // zero terms contribute exactly zero in the same summation order.
        let m = tiny_model(7, 5, 4, 0.0);
        let idxs = [3usize, 6, 1, 0];
        let probs_fast = forward_infer_probs(&m, &idxs).unwrap();
        let mut window = vec![0.0; 4 * 7];
        for (t, idx) in idxs.iter().enumerate() {
            window[t * 7 + idx] = 1.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (p, _) = forward(&m, &window, Mode::Infer, &mut rng).unwrap();
        assert_eq!(p.data(), probs_fast.as_slice());

        // Forcing the dense path (perturb a zero entry by 0.0 won't; instead
        // mark non-one-hot by using 0.5+0.5) is covered by the property that
        // hot_index() only fires on exact one-hot slices.
        assert_eq!(hot_index(&[0.0, 1.0, 0.0]), Some(1));
        assert_eq!(hot_index(&[0.0, 0.5, 0.5]), None);
        assert_eq!(hot_index(&[1.0, 1.0]), None);
    }

    #[test]
    fn loss_examples() {
        let uniform = Vector::new(vec![0.25; 4]).unwrap();
        assert!((loss(&uniform, 2).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        let half = Vector::new(vec![0.5, 0.5]).unwrap();
        assert!((loss(&half, 0).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        let perfect = Vector::new(vec![1.0, 0.0]).unwrap();
        assert!(loss(&perfect, 0).unwrap().abs() < 1e-12);
        assert!(loss(&perfect, 5).is_err());
    }

    #[test]
    fn cost_of_identical_windows_is_single_loss() {
        let m = tiny_model(5, 4, 3, 0.0);
        let w = make_windows(5, 3, &[(&[1, 2, 3], 4), (&[1, 2, 3], 4)]);
        let batch = batch_of(&w, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let c = cost(&m, &batch, &mut rng).unwrap();
        let single = loss(
            &Vector::from_raw(forward_infer_probs(&m, &[1, 2, 3]).unwrap()),
            4,
        )
        .unwrap();
        assert!((c - single).abs() < 1e-12);
        assert!(c >= 0.0);
    }

    #[test]
    fn cost_rejects_empty_batch() {
        let m = tiny_model(5, 4, 3, 0.0);
        let batch = WindowBatch::empty(3, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            cost(&m, &batch, &mut rng),
            Err(Error::EmptyBatch)
        ));
    }

    /// Central finite differences over every parameter.
    fn numeric_gradient(model: &LstmModel, batch: &WindowBatch, eps: f64) -> GradientSet {
        let mut grads = GradientSet::zeros_like(model);
        let n_arrays = grads.arrays().len();
        for a in 0..n_arrays {
            let len = grads.arrays()[a].len();
            for j in 0..len {
                let mut plus = model.clone();
                plus.param_arrays_mut()[a][j] += eps;
                let mut minus = model.clone();
                minus.param_arrays_mut()[a][j] -= eps;
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                let cp = cost(&plus, batch, &mut rng).unwrap();
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                let cm = cost(&minus, batch, &mut rng).unwrap();
                grads.arrays_mut()[a][j] = (cp - cm) / (2.0 * eps);
            }
        }
        grads
    }

    fn max_rel_error(analytic: &GradientSet, numeric: &GradientSet) -> f64 {
        let mut worst = 0.0f64;
        for (a, n) in analytic.arrays().iter().zip(numeric.arrays().iter()) {
            for (&av, &nv) in a.iter().zip(n.iter()) {
                let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        worst
    }

    /// The keystone property: analytic BPTT gradients match central finite
    /// differences over every parameter (dropout disabled).
    #[test]
    fn backward_matches_finite_differences() {
        let model = tiny_model(5, 4, 3, 0.0);
        let windows = make_windows(5, 3, &[(&[0, 2, 4], 1), (&[3, 3, 1], 0)]);
        let batch = batch_of(&windows, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (_, caches) = cost_with_caches(&model, &batch, &mut rng).unwrap();
        let analytic = backward(&model, &batch, &caches).unwrap();
        let numeric = numeric_gradient(&model, &batch, 1e-5);
        let worst = max_rel_error(&analytic, &numeric);
        assert!(
            worst < 1e-6,
            "max relative gradient error {worst:e} exceeds 1e-6"
        );
    }

    /// dJ/d_dense_b = mean over the batch of (p - onehot(target)); checked
    /// against both the closed form and finite differences above.
    #[test]
    fn dense_bias_gradient_identity() {
        let model = tiny_model(5, 4, 3, 0.0);
        let windows = make_windows(5, 3, &[(&[0, 2, 4], 1), (&[3, 3, 1], 0)]);
        let batch = batch_of(&windows, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (_, caches) = cost_with_caches(&model, &batch, &mut rng).unwrap();
        let grads = backward(&model, &batch, &caches).unwrap();

        let mut expect = vec![0.0; 5];
        for (b, cache) in caches.iter().enumerate() {
            for (k, e) in expect.iter_mut().enumerate() {
                let onehot = if k == batch.targets()[b] { 1.0 } else { 0.0 };
                *e += (cache.probs[k] - onehot) / 2.0;
            }
        }
        for (g, e) in grads.dense_b.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_vanish_at_perfect_prediction() {
        // A huge dense bias at the target makes p[target] ~ 1 for any input;
        // with the loss at its minimum every gradient must be ~ 0.
        let mut model = tiny_model(3, 4, 2, 0.0);
        model.dense_b.data_mut()[2] = 60.0;
        let windows = make_windows(3, 2, &[(&[0, 1], 2)]);
        let batch = batch_of(&windows, 3);
        let (cost_now, grads) = batch_gradients(&model, &batch, 0).unwrap();
        assert!(cost_now < 1e-12, "cost {cost_now}");
        assert!(grads.global_norm() < 1e-10, "norm {}", grads.global_norm());
    }

    #[test]
    fn backward_and_fused_path_agree() {
        let model = tiny_model(6, 5, 4, 0.0);
        let windows = make_windows(
            6,
            4,
            &[(&[0, 2, 4, 1], 1), (&[3, 3, 1, 5], 0), (&[5, 0, 0, 2], 3)],
        );
        let batch = batch_of(&windows, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let (c1, caches) = cost_with_caches(&model, &batch, &mut rng).unwrap();
        let g1 = backward(&model, &batch, &caches).unwrap();
        let (c2, g2) = batch_gradients(&model, &batch, 123).unwrap();
        assert_eq!(c1, c2);
        for (a, b) in g1.arrays().iter().zip(g2.arrays().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut model = tiny_model(5, 4, 3, 0.0);
        let snapshot = model.clone();
        let zero = GradientSet::zeros_like(&model);
        sgd_step(&mut model, &zero, 0.1, 5.0).unwrap();
        assert_eq!(model, snapshot);

        // w := w - alpha*g on a single parameter.
        let mut grads = GradientSet::zeros_like(&model);
        grads.dense_b.data_mut()[0] = 0.5;
        let before = model.dense_b.data()[0];
        sgd_step(&mut model, &grads, 1.0, 100.0).unwrap();
        assert!((model.dense_b.data()[0] - (before - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_clips_by_global_norm() {
        let mut model = tiny_model(5, 4, 3, 0.0);
        let mut grads = GradientSet::zeros_like(&model);
        // Two entries 6 and 8 -> global norm 10; clip 5 halves the step.
        grads.dense_b.data_mut()[0] = 6.0;
        grads.dense_b.data_mut()[1] = 8.0;
        let b0 = model.dense_b.data()[0];
        let b1 = model.dense_b.data()[1];
        sgd_step(&mut model, &grads, 1.0, 5.0).unwrap();
        assert!((model.dense_b.data()[0] - (b0 - 3.0)).abs() < 1e-12);
        assert!((model.dense_b.data()[1] - (b1 - 4.0)).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_rejects_non_finite() {
        let mut model = tiny_model(5, 4, 3, 0.0);
        let mut grads = GradientSet::zeros_like(&model);
        grads.dense_b.data_mut()[0] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut model, &grads, 0.1, 5.0),
            Err(Error::NonFiniteGradient)
        ));
    }

    /// A small SGD step along the analytic gradient must not increase the
    /// batch cost (checked over 100 random models and batches).
    #[test]
    fn small_sgd_step_does_not_increase_cost() {
        let mut outer = ChaCha12Rng::seed_from_u64(2024);
        for trial in 0..100 {
            let model = init_model(5, 4, 3, 0.0, outer.gen()).unwrap();
            let mk = |rng: &mut ChaCha12Rng| {
                let inputs: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
                (inputs, rng.gen_range(0..5))
            };
            let (i1, t1) = mk(&mut outer);
            let (i2, t2) = mk(&mut outer);
            let windows = make_windows(5, 3, &[(&i1, t1), (&i2, t2)]);
            let batch = batch_of(&windows, 5);
            let (before, grads) = batch_gradients(&model, &batch, 0).unwrap();
            let mut stepped = model.clone();
            sgd_step(&mut stepped, &grads, 1e-3, f64::INFINITY).unwrap();
            let (after, _) = batch_gradients(&stepped, &batch, 0).unwrap();
            assert!(
                after <= before + 1e-12,
                "trial {trial}: cost rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn train_mode_is_deterministic_given_seeded_rng() {
        let m = tiny_model(5, 4, 3, 0.4);
        let mut window = vec![0.0; 3 * 5];
        for (t, idx) in [2usize, 0, 4].iter().enumerate() {
            window[t * 5 + idx] = 1.0;
        }
        let mut r1 = ChaCha12Rng::seed_from_u64(77);
        let mut r2 = ChaCha12Rng::seed_from_u64(77);
        let (p1, _) = forward(&m, &window, Mode::Train, &mut r1).unwrap();
        let (p2, _) = forward(&m, &window, Mode::Train, &mut r2).unwrap();
        assert_eq!(p1, p2);
    }
}
