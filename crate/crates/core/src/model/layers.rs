//! Transformer building blocks with hand-written backward passes.
//!
//! Every block follows the same shape: `forward` is `&self` and returns the
//! output plus whatever the backward pass needs; `backward` is `&mut self`,
//! accumulates parameter gradients into [`Param::g`], and returns the
//! gradient with respect to the block input. Activations are `(rows, dim)`
//! matrices with row index `batch * seq_len + position`.
//!
//! Attention context sums run per key in sequence order. Keys with exactly
//! zero probability are skipped, which keeps a masked key's contribution
//! exactly zero — the mask-soundness and shift-equivalence checks rely on
//! bitwise equality here, not just small error.

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Additive mask constant: large enough that exp(score - max) underflows to
/// exactly 0.0 for any finite activation scale.
pub const MASK_NEG: f64 = -1e9;

/// Epsilon added to the norm in ScaleNorm.
pub const SCALE_NORM_EPS: f64 = 1e-5;

/// Smoothing term inside FixNorm's row norm, sqrt(sum + eps^2).
const FIXNORM_EPS2: f64 = 1e-16;

/// Dropout sites run in training mode only; `Eval` disables them.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

fn dropout(x: &mut Array2<f64>, p: f64, mode: &mut Mode) -> Option<Array2<f64>> {
    let Mode::Train { rng } = mode else { return None };
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    let data: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Array2::from_shape_vec(x.dim(), data).expect("mask shape");
    *x *= &mask;
    Some(mask)
}

fn apply_dropout_grad(dy: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(mask) = mask {
        *dy *= mask;
    }
}

/// A named tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub w: Array2<f64>,
    pub g: Array2<f64>,
}

impl Param {
    pub fn xavier(name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            name: name.into(),
            w: Array2::from_shape_vec((rows, cols), data).expect("param shape"),
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            w: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            w: Array2::from_elem((1, 1), value),
            g: Array2::zeros((1, 1)),
        }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }
}

/// y = x W + b, with W stored (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(prefix: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::xavier(format!("{prefix}.w"), din, dout, rng),
            b: Param::zeros(format!("{prefix}.b"), 1, dout),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.w) + &self.b.w
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.w.g += &x.t().dot(dy);
        self.b.g += &dy.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        dy.dot(&self.w.w.t())
    }
}

/// ScaleNorm: y = g * x / (||x|| + eps) per row, one learned scalar g.
#[derive(Debug, Clone)]
pub struct ScaleNorm {
    pub gain: Param,
}

/// The standalone vector form of ScaleNorm.
pub fn scale_norm(x: &[f64], gain: f64) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let coef = gain / (norm + SCALE_NORM_EPS);
    x.iter().map(|v| v * coef).collect()
}

impl ScaleNorm {
    pub fn new(prefix: &str, model_dim: usize) -> Self {
        Self {
            gain: Param::scalar(format!("{prefix}.gain"), (model_dim as f64).sqrt()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
        let g = self.gain.w[[0, 0]];
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            row *= g / (n + SCALE_NORM_EPS);
        }
        (y, norms)
    }

    pub fn backward(&mut self, x: &Array2<f64>, norms: &[f64], dy: &Array2<f64>) -> Array2<f64> {
        let g = self.gain.w[[0, 0]];
        let mut dx = Array2::zeros(x.dim());
        let mut dg = 0.0;
        for r in 0..x.nrows() {
            let n = norms[r];
            let xr = x.row(r);
            let dyr = dy.row(r);
            let dot = xr.dot(&dyr);
            dg += dot / (n + SCALE_NORM_EPS);
            let c1 = g / (n + SCALE_NORM_EPS);
            let c2 = g * dot / (n.max(1e-30) * (n + SCALE_NORM_EPS).powi(2));
            let mut dxr = dx.row_mut(r);
            dxr.scaled_add(c1, &dyr);
            dxr.scaled_add(-c2, &xr);
        }
        self.gain.g[[0, 0]] += dg;
        dx
    }
}

/// Token embedding under FixNorm: rows are L2-normalized at lookup and
/// multiplied by one learned scalar, then the positional encoding is added.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
    pub gain: Param,
}

impl Embedding {
    pub fn new(prefix: &str, vocab: usize, model_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: Param::xavier(format!("{prefix}.table"), vocab, model_dim, rng),
            gain: Param::scalar(format!("{prefix}.gain"), (model_dim as f64).sqrt()),
        }
    }

    fn row_norm(&self, id: usize) -> f64 {
        (self.table.w.row(id).iter().map(|v| v * v).sum::<f64>() + FIXNORM_EPS2).sqrt()
    }

    pub fn forward(&self, ids: &[usize], pe: &Array2<f64>) -> Array2<f64> {
        let g = self.gain.w[[0, 0]];
        let mut x = pe.clone();
        for (r, &id) in ids.iter().enumerate() {
            let n = self.row_norm(id);
            x.row_mut(r).scaled_add(g / n, &self.table.w.row(id));
        }
        x
    }

    pub fn backward(&mut self, ids: &[usize], dy: &Array2<f64>) {
        let g = self.gain.w[[0, 0]];
        let mut dg = 0.0;
        for (r, &id) in ids.iter().enumerate() {
            let n = self.row_norm(id);
            let e = self.table.w.row(id).to_owned();
            let dyr = dy.row(r);
            let dot = e.dot(&dyr);
            dg += dot / n;
            let mut grad = self.table.g.row_mut(id);
            grad.scaled_add(g / n, &dyr);
            grad.scaled_add(-g * dot / n.powi(3), &e);
        }
        self.gain.g[[0, 0]] += dg;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    /// (B, H, Tq, Tk) post-softmax probabilities; masked keys hold exact 0.
    pub probs: Array4<f64>,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, model_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Linear::new(&format!("{prefix}.wq"), model_dim, model_dim, rng),
            wk: Linear::new(&format!("{prefix}.wk"), model_dim, model_dim, rng),
            wv: Linear::new(&format!("{prefix}.wv"), model_dim, model_dim, rng),
            wo: Linear::new(&format!("{prefix}.wo"), model_dim, model_dim, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        x_q: &Array2<f64>,
        x_kv: &Array2<f64>,
        dims: AttnDims,
        allowed: &Array3<bool>,
    ) -> (Array2<f64>, AttnCache) {
        let d = x_q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x_q);
        let k = self.wk.forward(x_kv);
        let v = self.wv.forward(x_kv);

        let mut probs = Array4::zeros((dims.batch, self.heads, dims.q_len, dims.k_len));
        let mut ctx = Array2::zeros((dims.batch * dims.q_len, d));
        let mut scores = vec![0.0; dims.k_len];
        for b in 0..dims.batch {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..dims.q_len {
                    let qi = q.slice(s![b * dims.q_len + i, cols.clone()]);
                    let mut max = f64::NEG_INFINITY;
                    for (j, score) in scores.iter_mut().enumerate() {
                        *score = if allowed[[b, i, j]] {
                            qi.dot(&k.slice(s![b * dims.k_len + j, cols.clone()])) * scale
                        } else {
                            MASK_NEG
                        };
                        max = max.max(*score);
                    }
                    let mut denom = 0.0;
                    for score in scores.iter_mut() {
                        *score = (*score - max).exp();
                        denom += *score;
                    }
                    let mut ctx_i = ctx.slice_mut(s![b * dims.q_len + i, cols.clone()]);
                    for (j, &e) in scores.iter().enumerate() {
                        let p = e / denom;
                        probs[[b, h, i, j]] = p;
                        if p != 0.0 {
                            ctx_i.scaled_add(p, &v.slice(s![b * dims.k_len + j, cols.clone()]));
                        }
                    }
                }
            }
        }

        let out = self.wo.forward(&ctx);
        (out, AttnCache { q, k, v, ctx, probs })
    }

    /// Returns (d_x_q, d_x_kv); for self-attention the caller adds them.
    pub fn backward(
        &mut self,
        x_q: &Array2<f64>,
        x_kv: &Array2<f64>,
        cache: &AttnCache,
        dims: AttnDims,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = x_q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_ctx = self.wo.backward(&cache.ctx, dy);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());

        let mut dp = vec![0.0; dims.k_len];
        for b in 0..dims.batch {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..dims.q_len {
                    let d_ctx_i = d_ctx.slice(s![b * dims.q_len + i, cols.clone()]);
                    let mut dot_dp_p = 0.0;
                    for j in 0..dims.k_len {
                        let p = cache.probs[[b, h, i, j]];
                        if p != 0.0 {
                            dp[j] = d_ctx_i.dot(&cache.v.slice(s![b * dims.k_len + j, cols.clone()]));
                            dot_dp_p += dp[j] * p;
                        } else {
                            dp[j] = 0.0;
                        }
                    }
                    let qi = cache.q.slice(s![b * dims.q_len + i, cols.clone()]).to_owned();
                    let mut dq_i = dq.slice_mut(s![b * dims.q_len + i, cols.clone()]);
                    for j in 0..dims.k_len {
                        let p = cache.probs[[b, h, i, j]];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot_dp_p);
                        dq_i.scaled_add(ds * scale, &cache.k.slice(s![b * dims.k_len + j, cols.clone()]));
                        dk.slice_mut(s![b * dims.k_len + j, cols.clone()])
                            .scaled_add(ds * scale, &qi);
                        dv.slice_mut(s![b * dims.k_len + j, cols.clone()])
                            .scaled_add(p, &d_ctx_i);
                    }
                }
            }
        }

        let d_x_q = self.wq.backward(x_q, &dq);
        let mut d_x_kv = self.wk.backward(x_kv, &dk);
        d_x_kv += &self.wv.backward(x_kv, &dv);
        (d_x_q, d_x_kv)
    }
}

/// Two-layer position-wise feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct FfCache {
    h: Array2<f64>, // post-ReLU
}

impl FeedForward {
    pub fn new(prefix: &str, model_dim: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(&format!("{prefix}.lin1"), model_dim, ff_dim, rng),
            lin2: Linear::new(&format!("{prefix}.lin2"), ff_dim, model_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfCache) {
        let mut h = self.lin1.forward(x);
        h.mapv_inplace(|v| v.max(0.0));
        let y = self.lin2.forward(&h);
        (y, FfCache { h })
    }

    pub fn backward(&mut self, x: &Array2<f64>, cache: &FfCache, dy: &Array2<f64>) -> Array2<f64> {
        let mut dh = self.lin2.backward(&cache.h, dy);
        ndarray::Zip::from(&mut dh).and(&cache.h).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.lin1.backward(x, &dh)
    }
}

/// PreNorm encoder layer: x + Drop(Attn(Norm(x))), then x + Drop(FF(Norm(x))).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: ScaleNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: ScaleNorm,
    pub ff: FeedForward,
}

pub struct EncLayerCache {
    x: Array2<f64>,
    xn: Array2<f64>,
    xn_norms: Vec<f64>,
    pub attn: AttnCache,
    drop_attn: Option<Array2<f64>>,
    x1: Array2<f64>,
    x1n: Array2<f64>,
    x1n_norms: Vec<f64>,
    ff: FfCache,
    drop_ff: Option<Array2<f64>>,
}

impl EncoderLayer {
    pub fn new(prefix: &str, model_dim: usize, ff_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm_attn: ScaleNorm::new(&format!("{prefix}.norm_attn"), model_dim),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), model_dim, heads, rng),
            norm_ff: ScaleNorm::new(&format!("{prefix}.norm_ff"), model_dim),
            ff: FeedForward::new(&format!("{prefix}.ff"), model_dim, ff_dim, rng),
        }
    }

    pub fn forward(
        &self,
        x: Array2<f64>,
        dims: AttnDims,
        allowed: &Array3<bool>,
        p: f64,
        mode: &mut Mode,
    ) -> (Array2<f64>, EncLayerCache) {
        let (xn, xn_norms) = self.norm_attn.forward(&x);
        let (mut a, attn) = self.attn.forward(&xn, &xn, dims, allowed);
        let drop_attn = dropout(&mut a, p, mode);
        let x1 = &x + &a;

        let (x1n, x1n_norms) = self.norm_ff.forward(&x1);
        let (mut f, ff) = self.ff.forward(&x1n);
        let drop_ff = dropout(&mut f, p, mode);
        let y = &x1 + &f;

        (
            y,
            EncLayerCache {
                x,
                xn,
                xn_norms,
                attn,
                drop_attn,
                x1,
                x1n,
                x1n_norms,
                ff,
                drop_ff,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncLayerCache, dims: AttnDims, dy: &Array2<f64>) -> Array2<f64> {
        let mut df = dy.clone();
        apply_dropout_grad(&mut df, &cache.drop_ff);
        let d_x1n = self.ff.backward(&cache.x1n, &cache.ff, &df);
        let mut d_x1 = self.norm_ff.backward(&cache.x1, &cache.x1n_norms, &d_x1n);
        d_x1 += dy;

        let mut da = d_x1.clone();
        apply_dropout_grad(&mut da, &cache.drop_attn);
        let (dq, dkv) = self.attn.backward(&cache.xn, &cache.xn, &cache.attn, dims, &da);
        let d_xn = dq + dkv;
        let mut dx = self.norm_attn.backward(&cache.x, &cache.xn_norms, &d_xn);
        dx += &d_x1;
        dx
    }
}

/// PreNorm decoder layer: causal self-attention, cross-attention over the
/// encoder output, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_self: ScaleNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: ScaleNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: ScaleNorm,
    pub ff: FeedForward,
}

pub struct DecLayerCache {
    x: Array2<f64>,
    xn: Array2<f64>,
    xn_norms: Vec<f64>,
    pub self_attn: AttnCache,
    drop_self: Option<Array2<f64>>,
    x1: Array2<f64>,
    x1n: Array2<f64>,
    x1n_norms: Vec<f64>,
    pub cross_attn: AttnCache,
    drop_cross: Option<Array2<f64>>,
    x2: Array2<f64>,
    x2n: Array2<f64>,
    x2n_norms: Vec<f64>,
    ff: FfCache,
    drop_ff: Option<Array2<f64>>,
}

impl DecoderLayer {
    pub fn new(prefix: &str, model_dim: usize, ff_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm_self: ScaleNorm::new(&format!("{prefix}.norm_self"), model_dim),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), model_dim, heads, rng),
            norm_cross: ScaleNorm::new(&format!("{prefix}.norm_cross"), model_dim),
            cross_attn: MultiHeadAttention::new(&format!("{prefix}.cross_attn"), model_dim, heads, rng),
            norm_ff: ScaleNorm::new(&format!("{prefix}.norm_ff"), model_dim),
            ff: FeedForward::new(&format!("{prefix}.ff"), model_dim, ff_dim, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: Array2<f64>,
        enc_out: &Array2<f64>,
        self_dims: AttnDims,
        cross_dims: AttnDims,
        allowed_self: &Array3<bool>,
        allowed_cross: &Array3<bool>,
        p: f64,
        mode: &mut Mode,
    ) -> (Array2<f64>, DecLayerCache) {
        let (xn, xn_norms) = self.norm_self.forward(&x);
        let (mut a, self_attn) = self.self_attn.forward(&xn, &xn, self_dims, allowed_self);
        let drop_self = dropout(&mut a, p, mode);
        let x1 = &x + &a;

        let (x1n, x1n_norms) = self.norm_cross.forward(&x1);
        let (mut c, cross_attn) = self.cross_attn.forward(&x1n, enc_out, cross_dims, allowed_cross);
        let drop_cross = dropout(&mut c, p, mode);
        let x2 = &x1 + &c;

        let (x2n, x2n_norms) = self.norm_ff.forward(&x2);
        let (mut f, ff) = self.ff.forward(&x2n);
        let drop_ff = dropout(&mut f, p, mode);
        let y = &x2 + &f;

        (
            y,
            DecLayerCache {
                x,
                xn,
                xn_norms,
                self_attn,
                drop_self,
                x1,
                x1n,
                x1n_norms,
                cross_attn,
                drop_cross,
                x2,
                x2n,
                x2n_norms,
                ff,
                drop_ff,
            },
        )
    }

    /// Returns (dx, d_enc_out).
    pub fn backward(
        &mut self,
        cache: &DecLayerCache,
        enc_out: &Array2<f64>,
        self_dims: AttnDims,
        cross_dims: AttnDims,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut df = dy.clone();
        apply_dropout_grad(&mut df, &cache.drop_ff);
        let d_x2n = self.ff.backward(&cache.x2n, &cache.ff, &df);
        let mut d_x2 = self.norm_ff.backward(&cache.x2, &cache.x2n_norms, &d_x2n);
        d_x2 += dy;

        let mut dc = d_x2.clone();
        apply_dropout_grad(&mut dc, &cache.drop_cross);
        let (d_x1n, d_enc) =
            self.cross_attn
                .backward(&cache.x1n, enc_out, &cache.cross_attn, cross_dims, &dc);
        let mut d_x1 = self.norm_cross.backward(&cache.x1, &cache.x1n_norms, &d_x1n);
        d_x1 += &d_x2;

        let mut da = d_x1.clone();
        apply_dropout_grad(&mut da, &cache.drop_self);
        let (dq, dkv) = self
            .self_attn
            .backward(&cache.xn, &cache.xn, &cache.self_attn, self_dims, &da);
        let d_xn = dq + dkv;
        let mut dx = self.norm_self.backward(&cache.x, &cache.xn_norms, &d_xn);
        dx += &d_x1;
        (dx, d_enc)
    }
}
