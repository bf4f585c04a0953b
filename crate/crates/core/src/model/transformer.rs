//! Forward pass and hand-written reverse-mode gradients.
//!
//! Layout per layer (pre-norm):
//!
//! ```text
//! h   = rms(x) * g_attn
//! q,k = rope(h Wq), rope(h Wk);  v = h Wv
//! x  += softmax_causal(scale * q k^T) v Wo
//! h2  = rms(x) * g_ffn
//! x  += gelu(h2 W_up) W_down
//! ```
//!
//! Activations are `(batch * seq_len, features)` matrices; attention runs per
//! sequence and head. RoPE phases come from the caller's position indices, not
//! from row offsets.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{ParamBuffer, ParameterSet};
use crate::error::{Error, Result};
use crate::rope::RopeParams;

pub const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Token ids and position indices for `batch` sequences of `seq_len` each,
/// stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inputs<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [usize],
    pub batch: usize,
    pub seq_len: usize,
}

impl Inputs<'_> {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.len() != self.rows() || self.positions.len() != self.rows() {
            return Err(Error::Shape {
                expected: format!("{} tokens and positions", self.rows()),
                got: format!("{} / {}", self.tokens.len(), self.positions.len()),
            });
        }
        if self.seq_len == 0 {
            return Err(Error::Shape {
                expected: "non-empty sequences".into(),
                got: "0".into(),
            });
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Data(format!("token {t} outside vocab {vocab}")));
        }
        for row in self.positions.chunks(self.seq_len) {
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("position indices must be strictly increasing"));
            }
        }
        Ok(())
    }
}

struct RmsOut {
    y: Array2<f64>,
    inv: Array1<f64>,
}

fn rms_norm(x: &Array2<f64>, gain: ndarray::ArrayView1<f64>) -> RmsOut {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + RMS_EPS).sqrt())
        .collect();
    let mut y = x.clone();
    for (mut row, &s) in y.rows_mut().into_iter().zip(inv.iter()) {
        row.zip_mut_with(&gain, |v, &g| *v *= s * g);
    }
    RmsOut { y, inv }
}

/// Returns dx and accumulates dgain.
fn rms_norm_back(
    x: &Array2<f64>,
    inv: &Array1<f64>,
    gain: ndarray::ArrayView1<f64>,
    dy: &Array2<f64>,
    dgain: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for ((xr, dyr), (mut dxr, &s)) in x
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dx.rows_mut().into_iter().zip(inv.iter()))
    {
        let mut proj = 0.0;
        for ((&xv, &dv), (&g, dg)) in xr.iter().zip(dyr.iter()).zip(gain.iter().zip(dgain.iter_mut())) {
            *dg += dv * xv * s;
            proj += dv * g * xv;
        }
        let k = s * s * s * proj / d;
        for ((o, &xv), (&dv, &g)) in dxr.iter_mut().zip(xr.iter()).zip(dyr.iter().zip(gain.iter())) {
            *o = s * dv * g - k * xv;
        }
    }
    dx
}

/// Per-row cos/sin of `position * theta[j]`.
struct Phases {
    cos: Array2<f64>,
    sin: Array2<f64>,
}

impl Phases {
    fn new(positions: &[usize], rope: &RopeParams) -> Self {
        let half = rope.theta.len();
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (r, &p) in positions.iter().enumerate() {
            for (j, &t) in rope.theta.iter().enumerate() {
                let (s, c) = (p as f64 * t).sin_cos();
                cos[[r, j]] = c;
                sin[[r, j]] = s;
            }
        }
        Self { cos, sin }
    }

    /// Rotates every head of every row; `inverse` rotates by the negative angle.
    fn rotate(&self, x: &mut Array2<f64>, head_dim: usize, inverse: bool) {
        let half = head_dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("contiguous row");
            for head in row.chunks_exact_mut(head_dim) {
                for j in 0..half {
                    let (c, s) = (self.cos[[r, j]], sign * self.sin[[r, j]]);
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    head[2 * j] = a * c - b * s;
                    head[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    attn_norm: RmsOut,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities, one `(seq_len, seq_len)` block per sequence and head.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    x_mid: Array2<f64>,
    ffn_norm: RmsOut,
    up: Array2<f64>,
    act: Array2<f64>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache {
    tokens: Vec<u32>,
    batch: usize,
    seq_len: usize,
    scale: f64,
    phases: Phases,
    layers: Vec<LayerCache>,
    x_final: Array2<f64>,
    final_norm: RmsOut,
    logits: Array2<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut c);
    c
}

fn check_finite(x: &Array2<f64>, layer: usize, stage: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer, stage })
    }
}

/// Runs the network and keeps every activation needed for the backward pass.
pub fn forward(params: &ParameterSet, rope: &RopeParams, inputs: &Inputs) -> Result<ForwardCache> {
    let cfg = &params.config;
    inputs.validate(cfg.vocab_size)?;
    if rope.head_dim != cfg.head_dim() {
        return Err(Error::config("rope table does not match model head_dim"));
    }
    let w = &params.weights;
    let layout = &params.layout;
    let (n, l, hd) = (inputs.rows(), inputs.seq_len, cfg.head_dim());
    let scale = rope.attn_scale / (hd as f64).sqrt();
    let phases = Phases::new(inputs.positions, rope);

    let embed = w.matrix(&layout.entries[layout.embed]);
    let mut x = Array2::zeros((n, cfg.d_model));
    for (mut row, &t) in x.rows_mut().into_iter().zip(inputs.tokens) {
        row.assign(&embed.row(t as usize));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, ids) in layout.layers.iter().enumerate() {
        let e = |id: usize| &layout.entries[id];
        let attn_norm = rms_norm(&x, w.vector(e(ids.attn_norm)));
        let h = attn_norm.y.view();
        let mut q = matmul(&h, &w.matrix(e(ids.wq)));
        let mut k = matmul(&h, &w.matrix(e(ids.wk)));
        let v = matmul(&h, &w.matrix(e(ids.wv)));
        phases.rotate(&mut q, hd, false);
        phases.rotate(&mut k, hd, false);

        let mut attn = Array2::zeros((n, cfg.d_model));
        let mut probs = Vec::with_capacity(inputs.batch * cfg.n_heads);
        for b in 0..inputs.batch {
            let rows = b * l..(b + 1) * l;
            for head in 0..cfg.n_heads {
                let cols = head * hd..(head + 1) * hd;
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let kb = k.slice(s![rows.clone(), cols.clone()]);
                let vb = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = matmul(&qb, &kb.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let row = row.as_slice_mut().expect("contiguous");
                    let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                    let mut z = 0.0;
                    for v in &mut row[..=i] {
                        *v = (*v * scale - max).exp();
                        z += *v;
                    }
                    row[..=i].iter_mut().for_each(|v| *v /= z);
                    row[i + 1..].fill(0.0);
                }
                let mut out = attn.slice_mut(s![rows.clone(), cols]);
                general_mat_mul(1.0, &p, &vb, 0.0, &mut out);
                probs.push(p);
            }
        }
        let x_mid = &x + &matmul(&attn.view(), &w.matrix(e(ids.wo)));
        check_finite(&x_mid, li, "attention")?;

        let ffn_norm = rms_norm(&x_mid, w.vector(e(ids.ffn_norm)));
        let up = matmul(&ffn_norm.y.view(), &w.matrix(e(ids.w_up)));
        let act = up.mapv(gelu);
        let x_out = &x_mid + &matmul(&act.view(), &w.matrix(e(ids.w_down)));
        check_finite(&x_out, li, "feed-forward")?;

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            attn_norm,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            ffn_norm,
            up,
            act,
        });
    }

    let final_norm = rms_norm(&x, w.vector(&layout.entries[layout.final_norm]));
    let logits = matmul(&final_norm.y.view(), &w.matrix(&layout.entries[layout.unembed]));
    check_finite(&logits, cfg.n_layers, "output")?;
    Ok(ForwardCache {
        tokens: inputs.tokens.to_vec(),
        batch: inputs.batch,
        seq_len: inputs.seq_len,
        scale,
        phases,
        layers,
        x_final: x,
        final_norm,
        logits,
    })
}

/// Logits only; rows follow the input order.
pub fn logits(params: &ParameterSet, rope: &RopeParams, inputs: &Inputs) -> Result<Array2<f64>> {
    Ok(forward(params, rope, inputs)?.logits)
}

/// Mean next-token cross-entropy in nats over all rows.
pub fn loss_next_token(logits: &ArrayView2<f64>, targets: &[u32]) -> Result<f64> {
    Ok(token_nll(logits, targets)?.iter().sum::<f64>() / targets.len().max(1) as f64)
}

/// Per-row negative log-likelihood of `targets`.
pub fn token_nll(logits: &ArrayView2<f64>, targets: &[u32]) -> Result<Vec<f64>> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape {
            expected: format!("{} targets", logits.nrows()),
            got: targets.len().to_string(),
        });
    }
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let t = t as usize;
            if t >= row.len() {
                return Err(Error::Data(format!("target {t} outside vocab {}", row.len())));
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok(lse - row[t])
        })
        .collect()
}

/// d(loss_scale * mean NLL) / d logits.
pub fn loss_grad(logits: &Array2<f64>, targets: &[u32], loss_scale: f64) -> Array2<f64> {
    let k = loss_scale / targets.len() as f64;
    let mut d = logits.clone();
    for (mut row, &t) in d.rows_mut().into_iter().zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| k * v / z);
        row[t as usize] -= k;
    }
    d
}

/// Gradients of every parameter given `d loss / d logits`.
pub fn backward(params: &ParameterSet, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<ParamBuffer> {
    let cfg = &params.config;
    let layout = &params.layout;
    let w = &params.weights;
    if dlogits.raw_dim() != cache.logits.raw_dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", cache.logits.dim()),
            got: format!("{:?}", dlogits.dim()),
        });
    }
    let (l, hd) = (cache.seq_len, cfg.head_dim());
    let mut grads = ParamBuffer::zeros(layout);
    let e = |id: usize| &layout.entries[id];

    {
        let mut gw = grads.matrix_mut(e(layout.unembed));
        general_mat_mul(1.0, &cache.final_norm.y.t(), dlogits, 1.0, &mut gw);
    }
    let dh = matmul(&dlogits.view(), &w.matrix(e(layout.unembed)).t());
    let mut dx = {
        let mut dg = grads.vector_mut(e(layout.final_norm));
        rms_norm_back(
            &cache.x_final,
            &cache.final_norm.inv,
            w.vector(e(layout.final_norm)),
            &dh,
            &mut dg,
        )
    };

    for (li, ids) in layout.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];
        // feed-forward branch
        {
            let mut g = grads.matrix_mut(e(ids.w_down));
            general_mat_mul(1.0, &c.act.t(), &dx, 1.0, &mut g);
        }
        let mut dup = matmul(&dx.view(), &w.matrix(e(ids.w_down)).t());
        dup.zip_mut_with(&c.up, |d, &u| *d *= gelu_grad(u));
        {
            let mut g = grads.matrix_mut(e(ids.w_up));
            general_mat_mul(1.0, &c.ffn_norm.y.t(), &dup, 1.0, &mut g);
        }
        let dh2 = matmul(&dup.view(), &w.matrix(e(ids.w_up)).t());
        {
            let mut dg = grads.vector_mut(e(ids.ffn_norm));
            dx += &rms_norm_back(&c.x_mid, &c.ffn_norm.inv, w.vector(e(ids.ffn_norm)), &dh2, &mut dg);
        }

        // attention branch
        {
            let mut g = grads.matrix_mut(e(ids.wo));
            general_mat_mul(1.0, &c.attn.t(), &dx, 1.0, &mut g);
        }
        let dattn = matmul(&dx.view(), &w.matrix(e(ids.wo)).t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        let scale = cache.scale;
        for b in 0..cache.batch {
            let rows = b * l..(b + 1) * l;
            for head in 0..cfg.n_heads {
                let cols = head * hd..(head + 1) * hd;
                let p = &c.probs[b * cfg.n_heads + head];
                let dout = dattn.slice(s![rows.clone(), cols.clone()]);
                let vb = c.v.slice(s![rows.clone(), cols.clone()]);
                let qb = c.q.slice(s![rows.clone(), cols.clone()]);
                let kb = c.k.slice(s![rows.clone(), cols.clone()]);
                {
                    let mut dvb = dv.slice_mut(s![rows.clone(), cols.clone()]);
                    general_mat_mul(1.0, &p.t(), &dout, 0.0, &mut dvb);
                }
                let mut ds = matmul(&dout, &vb.t());
                for (i, (mut drow, prow)) in ds.rows_mut().into_iter().zip(p.rows()).enumerate() {
                    let drow = drow.as_slice_mut().expect("contiguous");
                    let prow = prow.to_slice().expect("contiguous");
                    let dot: f64 = drow[..=i].iter().zip(&prow[..=i]).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in drow[..=i].iter_mut().zip(&prow[..=i]) {
                        *dv = scale * pv * (*dv - dot);
                    }
                    drow[i + 1..].fill(0.0);
                }
                {
                    let mut dqb = dq.slice_mut(s![rows.clone(), cols.clone()]);
                    general_mat_mul(1.0, &ds, &kb, 0.0, &mut dqb);
                }
                {
                    let mut dkb = dk.slice_mut(s![rows.clone(), cols]);
                    general_mat_mul(1.0, &ds.t(), &qb, 0.0, &mut dkb);
                }
            }
        }
        cache.phases.rotate(&mut dq, hd, true);
        cache.phases.rotate(&mut dk, hd, true);
        let h = c.attn_norm.y.t();
        for (id, d) in [(ids.wq, &dq), (ids.wk, &dk), (ids.wv, &dv)] {
            let mut g = grads.matrix_mut(e(id));
            general_mat_mul(1.0, &h, d, 1.0, &mut g);
        }
        let mut dh1 = matmul(&dq.view(), &w.matrix(e(ids.wq)).t());
        general_mat_mul(1.0, &dk, &w.matrix(e(ids.wk)).t(), 1.0, &mut dh1);
        general_mat_mul(1.0, &dv, &w.matrix(e(ids.wv)).t(), 1.0, &mut dh1);
        {
            let mut dg = grads.vector_mut(e(ids.attn_norm));
            dx += &rms_norm_back(&c.x_in, &c.attn_norm.inv, w.vector(e(ids.attn_norm)), &dh1, &mut dg);
        }
    }

    let mut ge = grads.matrix_mut(e(layout.embed));
    for (row, &t) in dx.rows().into_iter().zip(&cache.tokens) {
        let mut g = ge.row_mut(t as usize);
        g += &row;
    }
    Ok(grads)
}

/// Mean next-token loss and its gradient for one batch.
pub fn loss_and_grad(
    params: &ParameterSet,
    rope: &RopeParams,
    inputs: &Inputs,
    targets: &[u32],
    loss_scale: f64,
) -> Result<(f64, ParamBuffer)> {
    let cache = forward(params, rope, inputs)?;
    let loss = loss_next_token(&cache.logits.view(), targets)?;
    let dlogits = loss_grad(&cache.logits, targets, loss_scale);
    let grads = backward(params, &cache, &dlogits)?;
    Ok((loss, grads))
}

/// Stateful wrapper that remembers the last forward pass.
pub struct Transformer<'p> {
    params: &'p ParameterSet,
    rope: RopeParams,
    cache: Option<ForwardCache>,
}

impl<'p> Transformer<'p> {
    pub fn new(params: &'p ParameterSet) -> Result<Self> {
        Ok(Self {
            params,
            rope: params.config.rope()?,
            cache: None,
        })
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    pub fn forward(&mut self, inputs: &Inputs) -> Result<&Array2<f64>> {
        let cache = forward(self.params, &self.rope, inputs)?;
        Ok(&self.cache.insert(cache).logits)
    }

    /// Consumes the cached forward pass.
    pub fn backward(&mut self, targets: &[u32], loss_scale: f64) -> Result<ParamBuffer> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a cached forward pass".into()))?;
        let dlogits = loss_grad(&cache.logits, targets, loss_scale);
        backward(self.params, &cache, &dlogits)
    }
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
