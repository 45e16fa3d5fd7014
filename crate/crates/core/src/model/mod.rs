//! Encoder-decoder transformer with PreNorm residual blocks, ScaleNorm,
//! FixNorm embeddings, and sinusoidal absolute positional encodings driven by
//! the explicit per-token indices carried in each batch.
//!
//! Everything is f64 on the CPU with hand-written backward passes; gradients
//! accumulate into each parameter's grad buffer between [`zero_grads`] calls.

mod checkpoint;
mod layers;
mod masks;
mod pe;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{scale_norm, Mode, Param, MASK_NEG, SCALE_NORM_EPS};
pub use masks::{build_masks, AttentionMaskSpec, MaskMode};
pub use pe::positional_encoding;

use ndarray::{Array2, Array4};

use crate::batching::Minibatch;
use crate::error::{Error, Result};
use crate::rng;
use layers::{AttnDims, DecLayerCache, DecoderLayer, Embedding, EncLayerCache, EncoderLayer, ScaleNorm};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_position: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset_standard()
    }
}

impl ModelConfig {
    /// The small-data preset: 4 layers, 4 heads, dropout 0.4.
    pub fn preset_gl_en() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dropout: 0.4,
            ..Self::preset_standard()
        }
    }

    /// The preset shared by the three larger language pairs.
    pub fn preset_standard() -> Self {
        Self {
            layers: 6,
            heads: 8,
            model_dim: 512,
            ff_dim: 2048,
            dropout: 0.3,
            max_position: 1024,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::InvalidConfig("model_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("need at least one layer".into()));
        }
        Ok(())
    }
}

/// All learnable tensors. The embedded config is the one the layer shapes
/// were built from.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    src_embed: Embedding,
    tgt_embed: Embedding,
    /// (V, D) output projection; `None` when tied to the target embedding.
    out_proj: Option<Param>,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    enc_norm: ScaleNorm,
    dec_norm: ScaleNorm,
}

impl ModelParams {
    pub fn new(cfg: &ModelConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let d = cfg.model_dim;
        let src_embed = Embedding::new("src_embed", src_vocab, d, &mut r);
        let tgt_embed = Embedding::new("tgt_embed", tgt_vocab, d, &mut r);
        let out_proj = if cfg.tie_embeddings {
            None
        } else {
            Some(Param::xavier("out_proj", tgt_vocab, d, &mut r))
        };
        let enc = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&format!("enc.{i}"), d, cfg.ff_dim, cfg.heads, &mut r))
            .collect();
        let dec = (0..cfg.layers)
            .map(|i| DecoderLayer::new(&format!("dec.{i}"), d, cfg.ff_dim, cfg.heads, &mut r))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            src_vocab,
            tgt_vocab,
            src_embed,
            tgt_embed,
            out_proj,
            enc,
            dec,
            enc_norm: ScaleNorm::new("enc_norm", d),
            dec_norm: ScaleNorm::new("dec_norm", d),
        })
    }

    /// Visits every parameter tensor in the fixed checkpoint order.
    /// Keep in sync with [`Self::visit_params_mut`]; a test pins the order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.src_embed.table);
        f(&self.src_embed.gain);
        f(&self.tgt_embed.table);
        f(&self.tgt_embed.gain);
        if let Some(p) = self.out_proj.as_ref() {
            f(p);
        }
        for layer in &self.enc {
            f(&layer.norm_attn.gain);
            for lin in [&layer.attn.wq, &layer.attn.wk, &layer.attn.wv, &layer.attn.wo] {
                f(&lin.w);
                f(&lin.b);
            }
            f(&layer.norm_ff.gain);
            f(&layer.ff.lin1.w);
            f(&layer.ff.lin1.b);
            f(&layer.ff.lin2.w);
            f(&layer.ff.lin2.b);
        }
        f(&self.enc_norm.gain);
        for layer in &self.dec {
            f(&layer.norm_self.gain);
            for lin in [
                &layer.self_attn.wq,
                &layer.self_attn.wk,
                &layer.self_attn.wv,
                &layer.self_attn.wo,
            ] {
                f(&lin.w);
                f(&lin.b);
            }
            f(&layer.norm_cross.gain);
            for lin in [
                &layer.cross_attn.wq,
                &layer.cross_attn.wk,
                &layer.cross_attn.wv,
                &layer.cross_attn.wo,
            ] {
                f(&lin.w);
                f(&lin.b);
            }
            f(&layer.norm_ff.gain);
            f(&layer.ff.lin1.w);
            f(&layer.ff.lin1.b);
            f(&layer.ff.lin2.w);
            f(&layer.ff.lin2.b);
        }
        f(&self.dec_norm.gain);
    }

    /// Mutable twin of [`Self::visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.src_embed.table);
        f(&mut self.src_embed.gain);
        f(&mut self.tgt_embed.table);
        f(&mut self.tgt_embed.gain);
        if let Some(p) = self.out_proj.as_mut() {
            f(p);
        }
        for layer in &mut self.enc {
            f(&mut layer.norm_attn.gain);
            for lin in [&mut layer.attn.wq, &mut layer.attn.wk, &mut layer.attn.wv, &mut layer.attn.wo] {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut layer.norm_ff.gain);
            f(&mut layer.ff.lin1.w);
            f(&mut layer.ff.lin1.b);
            f(&mut layer.ff.lin2.w);
            f(&mut layer.ff.lin2.b);
        }
        f(&mut self.enc_norm.gain);
        for layer in &mut self.dec {
            f(&mut layer.norm_self.gain);
            for lin in [
                &mut layer.self_attn.wq,
                &mut layer.self_attn.wk,
                &mut layer.self_attn.wv,
                &mut layer.self_attn.wo,
            ] {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut layer.norm_cross.gain);
            for lin in [
                &mut layer.cross_attn.wq,
                &mut layer.cross_attn.wk,
                &mut layer.cross_attn.wv,
                &mut layer.cross_attn.wo,
            ] {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut layer.norm_ff.gain);
            f(&mut layer.ff.lin1.w);
            f(&mut layer.ff.lin1.b);
            f(&mut layer.ff.lin2.w);
            f(&mut layer.ff.lin2.b);
        }
        f(&mut self.dec_norm.gain);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.is_finite());
        ok
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.w.len());
        n
    }

    fn out_proj_matrix(&self) -> &Array2<f64> {
        match &self.out_proj {
            Some(p) => &p.w,
            None => &self.tgt_embed.table.w,
        }
    }
}

fn flatten_usize(grid: &Array2<usize>) -> Vec<usize> {
    grid.iter().copied().collect()
}

struct EncoderPass {
    layer_caches: Vec<EncLayerCache>,
    drop_mask: Option<Array2<f64>>,
    pre_norm: Array2<f64>,
    pre_norms: Vec<f64>,
    out: Array2<f64>,
}

struct DecoderPass {
    layer_caches: Vec<DecLayerCache>,
    drop_mask: Option<Array2<f64>>,
    pre_norm: Array2<f64>,
    pre_norms: Vec<f64>,
    out: Array2<f64>,
}

/// Forward results plus everything [`backward`] needs.
pub struct ForwardOutput {
    /// (B*T, V) row-major; row index is `batch_row * target_len + position`.
    pub logits: Array2<f64>,
    pub batch_rows: usize,
    pub source_len: usize,
    pub target_len: usize,
    enc: EncoderPass,
    dec: DecoderPass,
}

impl ForwardOutput {
    /// Post-softmax encoder self-attention probabilities, (B, H, S, S).
    pub fn encoder_self_attention(&self, layer: usize) -> &Array4<f64> {
        &self.enc.layer_caches[layer].attn.probs
    }

    /// Decoder self-attention probabilities, (B, H, T, T).
    pub fn decoder_self_attention(&self, layer: usize) -> &Array4<f64> {
        &self.dec.layer_caches[layer].self_attn.probs
    }

    /// Cross-attention probabilities, (B, H, T, S).
    pub fn cross_attention(&self, layer: usize) -> &Array4<f64> {
        &self.dec.layer_caches[layer].cross_attn.probs
    }

    pub fn encoder_output(&self) -> &Array2<f64> {
        &self.enc.out
    }
}

fn check_mask_shapes(batch: &Minibatch, masks: &AttentionMaskSpec) -> Result<()> {
    let (b, s, t) = (batch.rows(), batch.source_len(), batch.target_len());
    let expected = [(b, s, s), (b, t, t), (b, t, s)];
    let got = [masks.self_source.dim(), masks.self_target.dim(), masks.cross.dim()];
    if expected != got {
        return Err(Error::ShapeMismatch {
            context: "attention masks",
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

fn run_encoder(
    params: &ModelParams,
    batch: &Minibatch,
    masks: &AttentionMaskSpec,
    mode: &mut Mode,
) -> Result<EncoderPass> {
    let cfg = &params.cfg;
    let (b, s) = (batch.rows(), batch.source_len());
    let ids = flatten_usize(&batch.source);
    let positions = flatten_usize(&batch.source_positions);
    let pe = positional_encoding(&positions, cfg.model_dim, cfg.max_position)?;
    let mut x = params.src_embed.forward(&ids, &pe);
    let drop_mask = layers_dropout(&mut x, cfg.dropout, mode);

    let dims = AttnDims { batch: b, q_len: s, k_len: s };
    let mut layer_caches = Vec::with_capacity(params.enc.len());
    for layer in &params.enc {
        let (y, cache) = layer.forward(x, dims, &masks.self_source, cfg.dropout, mode);
        layer_caches.push(cache);
        x = y;
    }
    let (out, pre_norms) = params.enc_norm.forward(&x);
    Ok(EncoderPass {
        layer_caches,
        drop_mask,
        pre_norm: x,
        pre_norms,
        out,
    })
}

fn run_decoder(
    params: &ModelParams,
    batch: &Minibatch,
    masks: &AttentionMaskSpec,
    enc_out: &Array2<f64>,
    mode: &mut Mode,
) -> Result<DecoderPass> {
    let cfg = &params.cfg;
    let (b, s, t) = (batch.rows(), batch.source_len(), batch.target_len());
    let ids = flatten_usize(&batch.target_in);
    let positions = flatten_usize(&batch.target_positions);
    let pe = positional_encoding(&positions, cfg.model_dim, cfg.max_position)?;
    let mut x = params.tgt_embed.forward(&ids, &pe);
    let drop_mask = layers_dropout(&mut x, cfg.dropout, mode);

    let self_dims = AttnDims { batch: b, q_len: t, k_len: t };
    let cross_dims = AttnDims { batch: b, q_len: t, k_len: s };
    let mut layer_caches = Vec::with_capacity(params.dec.len());
    for layer in &params.dec {
        let (y, cache) = layer.forward(
            x,
            enc_out,
            self_dims,
            cross_dims,
            &masks.self_target,
            &masks.cross,
            cfg.dropout,
            mode,
        );
        layer_caches.push(cache);
        x = y;
    }
    let (out, pre_norms) = params.dec_norm.forward(&x);
    Ok(DecoderPass {
        layer_caches,
        drop_mask,
        pre_norm: x,
        pre_norms,
        out,
    })
}

// Post-embedding dropout shares the layer implementation.
fn layers_dropout(x: &mut Array2<f64>, p: f64, mode: &mut Mode) -> Option<Array2<f64>> {
    match mode {
        Mode::Train { rng } => {
            if p <= 0.0 {
                return None;
            }
            let keep = 1.0 - p;
            let data: Vec<f64> = (0..x.len())
                .map(|_| if rand::Rng::gen::<f64>(rng) < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Array2::from_shape_vec(x.dim(), data).expect("mask shape");
            *x *= &mask;
            Some(mask)
        }
        Mode::Eval => None,
    }
}

/// Runs only the encoder stack; used by decoding and the structural
/// equivalence checks.
pub fn encode(
    params: &ModelParams,
    batch: &Minibatch,
    masks: &AttentionMaskSpec,
    mode: &mut Mode,
) -> Result<Array2<f64>> {
    check_mask_shapes(batch, masks)?;
    Ok(run_encoder(params, batch, masks, mode)?.out)
}

/// Full teacher-forced forward pass: embeddings, encoder, decoder, output
/// projection. Returns logits plus cached activations for [`backward`].
pub fn forward(
    params: &ModelParams,
    batch: &Minibatch,
    masks: &AttentionMaskSpec,
    mode: &mut Mode,
) -> Result<ForwardOutput> {
    check_mask_shapes(batch, masks)?;
    let enc = run_encoder(params, batch, masks, mode)?;
    let dec = run_decoder(params, batch, masks, &enc.out, mode)?;
    let logits = dec.out.dot(&params.out_proj_matrix().t());
    Ok(ForwardOutput {
        logits,
        batch_rows: batch.rows(),
        source_len: batch.source_len(),
        target_len: batch.target_len(),
        enc,
        dec,
    })
}

/// Accumulates gradients for one forward pass. `dlogits` must match the
/// logits shape of `out`.
pub fn backward(
    params: &mut ModelParams,
    out: &ForwardOutput,
    batch: &Minibatch,
    dlogits: &Array2<f64>,
) -> Result<()> {
    if dlogits.dim() != out.logits.dim() {
        return Err(Error::ShapeMismatch {
            context: "dlogits",
            expected: format!("{:?}", out.logits.dim()),
            got: format!("{:?}", dlogits.dim()),
        });
    }
    let (b, s, t) = (out.batch_rows, out.source_len, out.target_len);

    // Output projection.
    let d_dec_out = dlogits.dot(params.out_proj_matrix());
    let w_grad = dlogits.t().dot(&out.dec.out);
    match params.out_proj.as_mut() {
        Some(p) => p.g += &w_grad,
        None => params.tgt_embed.table.g += &w_grad,
    }

    // Decoder stack.
    let mut dy = params
        .dec_norm
        .backward(&out.dec.pre_norm, &out.dec.pre_norms, &d_dec_out);
    let self_dims = AttnDims { batch: b, q_len: t, k_len: t };
    let cross_dims = AttnDims { batch: b, q_len: t, k_len: s };
    let mut d_enc_total = Array2::zeros(out.enc.out.dim());
    for (layer, cache) in params.dec.iter_mut().zip(&out.dec.layer_caches).rev() {
        let (dx, d_enc) = layer.backward(cache, &out.enc.out, self_dims, cross_dims, &dy);
        d_enc_total += &d_enc;
        dy = dx;
    }
    if let Some(mask) = &out.dec.drop_mask {
        dy *= mask;
    }
    params
        .tgt_embed
        .backward(&flatten_usize(&batch.target_in), &dy);

    // Encoder stack.
    let mut dy = params
        .enc_norm
        .backward(&out.enc.pre_norm, &out.enc.pre_norms, &d_enc_total);
    let dims = AttnDims { batch: b, q_len: s, k_len: s };
    for (layer, cache) in params.enc.iter_mut().zip(&out.enc.layer_caches).rev() {
        dy = layer.backward(cache, dims, &dy);
    }
    if let Some(mask) = &out.enc.drop_mask {
        dy *= mask;
    }
    params.src_embed.backward(&flatten_usize(&batch.source), &dy);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{concat_pair, Provenance, TrainExample};
    use crate::batching::materialize_examples;
    use crate::corpus::NumberizedPair;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ff_dim: 32,
            dropout: 0.0,
            max_position: 64,
            tie_embeddings: false,
        }
    }

    fn example(src: &[usize], tgt: &[usize]) -> TrainExample {
        TrainExample::from_pair(&NumberizedPair {
            source: src.to_vec(),
            target: tgt.to_vec(),
            origin_index: 0,
        })
    }

    #[test]
    fn logits_have_batch_by_time_by_vocab_shape() {
        let params = ModelParams::new(&tiny_cfg(), 7, 7, 0).unwrap();
        let batch = materialize_examples(&[example(&[4, 5], &[4, 5, 6])], &[0]);
        let masks = build_masks(&batch, MaskMode::Unmasked);
        let out = forward(&params, &batch, &masks, &mut Mode::Eval).unwrap();
        assert_eq!(out.logits.dim(), (4, 7)); // B*T = 1*4, V = 7
        assert_eq!(out.target_len, 4);
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let params = ModelParams::new(&tiny_cfg(), 9, 9, 1).unwrap();
        let batch = materialize_examples(&[example(&[4, 5, 6], &[7, 8])], &[0]);
        let masks = build_masks(&batch, MaskMode::Unmasked);
        let a = forward(&params, &batch, &masks, &mut Mode::Eval).unwrap();
        let b = forward(&params, &batch, &masks, &mut Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn segment_masked_attention_mass_across_segments_is_zero() {
        let cfg = ModelConfig { layers: 2, ..tiny_cfg() };
        let params = ModelParams::new(&cfg, 9, 9, 2).unwrap();
        let ex = concat_pair(&example(&[4, 5], &[6]), &example(&[7], &[8, 4]), Provenance::Rand);
        let batch = materialize_examples(&[ex], &[0]);
        let masks = build_masks(&batch, MaskMode::SegmentMasked);
        let out = forward(&params, &batch, &masks, &mut Mode::Eval).unwrap();

        let s = batch.source_len();
        for layer in 0..cfg.layers {
            let probs = out.encoder_self_attention(layer);
            for h in 0..cfg.heads {
                for q in 0..s {
                    for k in 0..s {
                        if batch.source_segments[[0, q]] != batch.source_segments[[0, k]] {
                            assert_eq!(probs[[0, h, q, k]], 0.0, "layer {layer} head {h} ({q},{k})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_batch_rows_permutes_logits_rows() {
        let params = ModelParams::new(&tiny_cfg(), 9, 9, 3).unwrap();
        let examples = [example(&[4, 5], &[6, 7]), example(&[8, 4, 5], &[7])];
        let fwd = materialize_examples(&examples, &[0, 1]);
        let rev = materialize_examples(&examples, &[1, 0]);
        let out_fwd = forward(&params, &fwd, &build_masks(&fwd, MaskMode::Unmasked), &mut Mode::Eval).unwrap();
        let out_rev = forward(&params, &rev, &build_masks(&rev, MaskMode::Unmasked), &mut Mode::Eval).unwrap();
        let t = out_fwd.target_len;
        for pos in 0..t {
            assert_eq!(out_fwd.logits.row(pos), out_rev.logits.row(t + pos));
            assert_eq!(out_fwd.logits.row(t + pos), out_rev.logits.row(pos));
        }
    }

    #[test]
    fn mask_shape_mismatch_is_reported() {
        let params = ModelParams::new(&tiny_cfg(), 9, 9, 0).unwrap();
        let batch = materialize_examples(&[example(&[4, 5], &[6])], &[0]);
        let other = materialize_examples(&[example(&[4, 5, 6], &[6])], &[0]);
        let masks = build_masks(&other, MaskMode::Unmasked);
        assert!(matches!(
            forward(&params, &batch, &masks, &mut Mode::Eval),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let cfg = ModelConfig { model_dim: 15, ..tiny_cfg() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { dropout: 1.0, ..tiny_cfg() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tied_embeddings_share_the_output_projection() {
        let cfg = ModelConfig { tie_embeddings: true, ..tiny_cfg() };
        let mut params = ModelParams::new(&cfg, 9, 9, 4).unwrap();
        let mut names = Vec::new();
        params.visit_params_mut(&mut |p| names.push(p.name.clone()));
        assert!(!names.iter().any(|n| n == "out_proj"));
    }

    #[test]
    fn both_visitors_yield_the_same_tensor_order() {
        let mut params = ModelParams::new(&tiny_cfg(), 9, 9, 4).unwrap();
        let mut immut = Vec::new();
        params.visit_params(&mut |p| immut.push(p.name.clone()));
        let mut muta = Vec::new();
        params.visit_params_mut(&mut |p| muta.push(p.name.clone()));
        assert_eq!(immut, muta);
        assert!(immut.len() > 20);
    }
}
