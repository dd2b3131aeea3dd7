//! Forward computation of the multiscale detector, built from tape ops so
//! that every stage is differentiable.
//!
//! All tensors carry a leading batch axis: windows are `[B, T, d_in]`.

use rand_chacha::ChaCha8Rng;

use super::params::{LayerIndex, ModelParams};
use crate::autodiff::{Activation, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Tape handles for one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl LayerVars {
    fn bind(vars: &[Var], ix: &LayerIndex) -> Self {
        LayerVars {
            wq: vars[ix.wq],
            wk: vars[ix.wk],
            wv: vars[ix.wv],
            wo: vars[ix.wo],
            ln1_gain: vars[ix.ln1_gain],
            ln1_bias: vars[ix.ln1_bias],
            ffn_w1: vars[ix.ffn_w1],
            ffn_b1: vars[ix.ffn_b1],
            ffn_w2: vars[ix.ffn_w2],
            ffn_b2: vars[ix.ffn_b2],
            ln2_gain: vars[ix.ln2_gain],
            ln2_bias: vars[ix.ln2_bias],
        }
    }
}

/// Output of [`self_attention`]: the projected result plus the
/// `[B, heads, T, T]` attention probabilities.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub attention: Tensor,
}

/// Fused representation and the `[B, S]` scale weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub fused: Var,
    pub weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// `[B]` anomaly probabilities.
    pub scores: Var,
    /// `[B, S]` fusion coefficients.
    pub scale_weights: Var,
    /// `[B, T, d]` fused representation.
    pub fused: Var,
}

/// Single-window result.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub score: f64,
    pub scale_weights: Vec<f64>,
    pub fused: Tensor,
}

fn check_finite(tape: &Tape, v: Var, stage: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { stage: stage() })
    }
}

/// `H⁽⁰⁾ = X + P`, with `P: [T_s, d]` shared across the batch.
pub fn positional_encode(tape: &mut Tape, x: Var, pos: Var) -> Result<Var> {
    let (sx, sp) = (tape.shape(x), tape.shape(pos));
    if sx.len() < 2 || sx[sx.len() - 2..] != sp[..] {
        return Err(Error::shape("positional_encode", sx, sp));
    }
    tape.add_broadcast(x, pos)
}

/// Multi-head scaled dot-product self-attention without a causal mask.
///
/// `wq`, `wk`, `wv` are fused `d × d` matrices whose column blocks of width
/// `d / heads` belong to the individual heads.
pub fn self_attention(
    tape: &mut Tape,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let mixed = tape.multi_head_attention(q, k, v, heads)?;
    let attention = tape.attention_probs(mixed).expect("attention node");
    Ok(AttentionOutput {
        output: tape.matmul(mixed, wo)?,
        attention,
    })
}

/// Post-norm encoder layer: `H' = LN(H + MHA(H))`, `H'' = LN(H' + FFN(H'))`.
pub fn encoder_layer(
    tape: &mut Tape,
    h: Var,
    w: &LayerVars,
    heads: usize,
    activation: Activation,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let attn = self_attention(tape, h, w.wq, w.wk, w.wv, w.wo, heads)?.output;
    let (attn, rng) = match dropout {
        Some((rate, rng)) => (tape.dropout(attn, rate, rng)?, Some((rate, rng))),
        None => (attn, None),
    };
    let res = tape.add(h, attn)?;
    let h1 = tape.layer_norm(res, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;

    let hidden = tape.matmul(h1, w.ffn_w1)?;
    let hidden = tape.add_broadcast(hidden, w.ffn_b1)?;
    let hidden = tape.activation(hidden, activation);
    let ffn = tape.matmul(hidden, w.ffn_w2)?;
    let ffn = tape.add_broadcast(ffn, w.ffn_b2)?;
    let ffn = match rng {
        Some((rate, rng)) => tape.dropout(ffn, rate, rng)?,
        None => ffn,
    };
    let res = tape.add(h1, ffn)?;
    tape.layer_norm(res, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)
}

/// Downsampled copies of the raw window, one per scale factor.
pub fn build_scale_inputs(tape: &mut Tape, x: Var, factors: &[usize]) -> Result<Vec<Var>> {
    let t = tape.shape(x)[tape.shape(x).len() - 2];
    let max_factor = factors.iter().copied().max().unwrap_or(1);
    if t < max_factor {
        return Err(Error::Data(format!(
            "window of {t} steps is shorter than scale factor {max_factor}"
        )));
    }
    factors
        .iter()
        .map(|&f| {
            if f == 1 {
                Ok(x)
            } else {
                tape.avg_pool_time(x, f)
            }
        })
        .collect()
}

/// Interpolates a scale's features back to `target` steps, then applies the
/// scale's affine `d → d` map.
pub fn align_scale(tape: &mut Tape, h: Var, weight: Var, bias: Var, target: usize) -> Result<Var> {
    let up = tape.upsample_time(h, target)?;
    let projected = tape.matmul(up, weight)?;
    tape.add_broadcast(projected, bias)
}

/// Attention-weighted fusion of aligned scale features.
///
/// Each scale's score is the time-mean of `wᵀ·tanh(W·h̃_t)`; the scores are
/// softmax-normalized across scales and weight the sum of the features.
pub fn fuse_scales(tape: &mut Tape, aligned: &[Var], proj: Var, vec: Var) -> Result<Fusion> {
    if aligned.is_empty() {
        return Err(Error::Contract("fusion needs at least one scale".into()));
    }
    let first = tape.shape(aligned[0]).to_vec();
    for &a in &aligned[1..] {
        if tape.shape(a) != first.as_slice() {
            return Err(Error::shape("fuse_scales", &first, tape.shape(a)));
        }
    }
    let mut scores = Vec::with_capacity(aligned.len());
    for &h in aligned {
        let z = tape.matmul_nt(h, proj)?;
        let z = tape.activation(z, Activation::Tanh);
        let per_step = tape.matmul(z, vec)?;
        scores.push(tape.mean_over_axis(per_step, 1)?);
    }
    let scores = tape.concat_last_axis(&scores)?;
    let weights = tape.softmax(scores, 1)?;
    let mut fused = None;
    for (s, &h) in aligned.iter().enumerate() {
        let a_s = tape.slice_last_axis(weights, s, 1)?;
        let term = tape.mul_batch_scalar(h, a_s)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(Fusion {
        fused: fused.unwrap(),
        weights,
    })
}

/// Window-level head: mean over time, affine map to a logit, sigmoid.
pub fn detection_head(tape: &mut Tape, fused: Var, weight: Var, bias: Var) -> Result<Var> {
    let pooled = tape.mean_over_axis(fused, 1)?;
    let logit = tape.matmul(pooled, weight)?;
    let logit = tape.add_broadcast(logit, bias)?;
    let score = tape.sigmoid(logit);
    let batch = tape.shape(score)[0];
    tape.reshape(score, vec![batch])
}

impl ModelParams {
    /// Puts every parameter on the tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    /// Forward pass over a `[B, T, d_in]` batch. Passing an RNG enables
    /// dropout (training mode).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let cfg = self.config();
        let ix = self.index();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.window_len || shape[2] != cfg.feature_dim {
            return Err(Error::shape(
                "forward",
                &shape,
                &[0, cfg.window_len, cfg.feature_dim],
            ));
        }
        let inputs = build_scale_inputs(tape, x, &cfg.scale_factors)?;
        let mut aligned = Vec::with_capacity(inputs.len());
        for (s, (xs, sx)) in inputs.into_iter().zip(&ix.scales).enumerate() {
            let e = tape.matmul(xs, vars[ix.input_w])?;
            let e = tape.add_broadcast(e, vars[ix.input_b])?;
            let mut h = positional_encode(tape, e, vars[sx.pos])?;
            for layer in &sx.layers {
                let lv = LayerVars::bind(vars, layer);
                let drop = match (&mut rng, cfg.dropout > 0.0) {
                    (Some(r), true) => Some((cfg.dropout, &mut **r)),
                    _ => None,
                };
                h = encoder_layer(tape, h, &lv, cfg.heads, cfg.activation, drop)?;
            }
            check_finite(tape, h, || format!("encoder (scale {s})"))?;
            let a = align_scale(tape, h, vars[sx.align_w], vars[sx.align_b], cfg.window_len)?;
            check_finite(tape, a, || format!("alignment (scale {s})"))?;
            aligned.push(a);
        }
        let fusion = fuse_scales(tape, &aligned, vars[ix.fusion_w], vars[ix.fusion_v])?;
        check_finite(tape, fusion.fused, || "fusion".into())?;
        let scores = detection_head(tape, fusion.fused, vars[ix.head_w], vars[ix.head_b])?;
        check_finite(tape, scores, || "detection head".into())?;
        Ok(ForwardPass {
            scores,
            scale_weights: fusion.weights,
            fused: fusion.fused,
        })
    }

    /// Inference on a single `[T, d_in]` window.
    pub fn forward(&self, window: &Tensor) -> Result<Prediction> {
        let cfg = self.config();
        if window.shape() != [cfg.window_len, cfg.feature_dim] {
            return Err(Error::shape(
                "forward",
                window.shape(),
                &[cfg.window_len, cfg.feature_dim],
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let x = tape.constant(
            window
                .clone()
                .reshape(vec![1, cfg.window_len, cfg.feature_dim])?,
        );
        let pass = self.forward_batch(&mut tape, &vars, x, None)?;
        let fused = tape.value(pass.fused).clone();
        let t = fused.shape()[1];
        let d = fused.shape()[2];
        Ok(Prediction {
            score: tape.value(pass.scores).values()[0],
            scale_weights: tape.value(pass.scale_weights).values().to_vec(),
            fused: fused.reshape(vec![t, d])?,
        })
    }

    /// Scores a flat `[n, T, d_in]` buffer of windows in chunks of `batch`.
    pub fn score_windows(&self, windows: &[f64], batch: usize) -> Result<Vec<f64>> {
        let cfg = self.config();
        let per = cfg.window_len * cfg.feature_dim;
        if per == 0 || windows.len() % per != 0 {
            return Err(Error::shape("score_windows", &[windows.len()], &[per]));
        }
        let mut out = Vec::with_capacity(windows.len() / per);
        for chunk in windows.chunks(per * batch.max(1)) {
            let b = chunk.len() / per;
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::new(
                vec![b, cfg.window_len, cfg.feature_dim],
                chunk.to_vec(),
            )?);
            let pass = self.forward_batch(&mut tape, &vars, x, None)?;
            out.extend_from_slice(tape.value(pass.scores).values());
        }
        Ok(out)
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }
}
