//! The Motion Style Mamba denoiser.
//!
//! The denoiser consumes a noisy token sequence, a scalar timestep, and the
//! fused condition tokens, and predicts the clean motion directly. The
//! assembled sequence is
//!
//! ```text
//! D_in = [in_proj(x_t) ; t_token ; condition tokens]
//! ```
//!
//! followed by a shared input linear producing D^0, three MSM blocks (causal
//! depthwise convolution feeding forward and backward selective state-space
//! scans, instance norms, and a per-block skip), a long residual back to the
//! input linear, a multi-head-attention residual, and a feed-forward head.
//! The prediction is read from the x_t span of the output and projected back
//! to token width by a stream-specific head.
//!
//! Everything here builds on [`Tape`] so the same code path serves both
//! sampling (values only) and training (values plus gradients).

use crate::attention::ConditionTensor;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{self, timestep_embedding, ModelParams};
use crate::tape::{Tape, Var};

/// Selects the output head (and expected token width) for a forward pass.
///
/// Content tokens are quaternion rows plus root motion; style tokens are
/// plain joint positions. Both streams share every other denoiser parameter.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Content,
    Style,
}

impl StreamKind {
    fn key(self) -> &'static str {
        match self {
            StreamKind::Content => "content",
            StreamKind::Style => "style",
        }
    }

    /// Token width this stream's head produces (and its inputs must have).
    pub fn token_width(self, config: &crate::nn::ModelConfig) -> usize {
        match self {
            StreamKind::Content => config.content_width(),
            StreamKind::Style => config.style_width(),
        }
    }
}

/// Timestep token: sinusoidal code through a two-layer MLP with GELU.
pub fn embed_timestep(tape: &mut Tape, params: &ModelParams, t: usize) -> Result<Var> {
    if t > params.config.t_max {
        return Err(Error::Config(format!(
            "timestep {t} out of range 0..={}",
            params.config.t_max
        )));
    }
    let code = tape.constant(timestep_embedding(t, params.config.d_model));
    let w1 = params.var(tape, "msm.t_mlp.w1")?;
    let b1 = params.var(tape, "msm.t_mlp.b1")?;
    let w2 = params.var(tape, "msm.t_mlp.w2")?;
    let b2 = params.var(tape, "msm.t_mlp.b2")?;
    let h = nn::linear(tape, code, w1, b1);
    let g = tape.gelu(h);
    Ok(nn::linear(tape, g, w2, b2))
}

/// The assembled denoiser input plus the length of the x_t span, which is
/// the part of the output sequence the prediction is read from.
pub struct AssembledInput {
    pub d_in: Var,
    pub x_len: usize,
}

/// Builds `D_in = [in_proj(x_t) ; t_token ; condition]`.
///
/// `condition` carries fused tokens at `d_model`; passing it as a graph
/// variable keeps the attention block trainable through the denoiser.
pub fn assemble_input(
    tape: &mut Tape,
    params: &ModelParams,
    x_t: Var,
    t: usize,
    condition: Var,
    stream: StreamKind,
) -> Result<AssembledInput> {
    let config = &params.config;
    let (n, width) = tape.value(x_t).shape();
    if n == 0 {
        return Err(Error::Dimension(
            "denoiser needs at least one noisy token".into(),
        ));
    }
    let want = stream.token_width(config);
    if width != want {
        return Err(Error::Dimension(format!(
            "{} tokens are {want} wide, got {width}",
            stream.key()
        )));
    }
    let (m, cond_width) = tape.value(condition).shape();
    if m == 0 {
        return Err(Error::Dimension(
            "condition must contain at least one token".into(),
        ));
    }
    if cond_width != config.d_model {
        return Err(Error::Dimension(format!(
            "condition tokens are {cond_width} wide, expected d_model {}",
            config.d_model
        )));
    }

    let w = params.var(tape, &format!("msm.in_proj.{}.w", stream.key()))?;
    let b = params.var(tape, &format!("msm.in_proj.{}.b", stream.key()))?;
    let projected = nn::linear(tape, x_t, w, b);
    let t_token = embed_timestep(tape, params, t)?;
    let d_in = tape.concat_rows(&[projected, t_token, condition]);
    Ok(AssembledInput { d_in, x_len: n })
}

// One direction of the selective scan. Delta, B, and C are projected from
// the scan input itself; only delta carries a bias (then softplus).
fn ssm_branch(
    tape: &mut Tape,
    params: &ModelParams,
    u: Var,
    prefix: &str,
    dir: &str,
    reversed: bool,
) -> Result<Var> {
    let w_delta = params.var(tape, &format!("{prefix}.{dir}.w_delta"))?;
    let b_delta = params.var(tape, &format!("{prefix}.{dir}.b_delta"))?;
    let w_b = params.var(tape, &format!("{prefix}.{dir}.w_b"))?;
    let w_c = params.var(tape, &format!("{prefix}.{dir}.w_c"))?;
    let a = params.var(tape, &format!("{prefix}.{dir}.a"))?;
    let d = params.var(tape, &format!("{prefix}.{dir}.d"))?;
    let pre = nn::linear(tape, u, w_delta, b_delta);
    let delta = tape.softplus(pre);
    let b = tape.matmul(u, w_b);
    let c = tape.matmul(u, w_c);
    Ok(tape.ssm_scan(u, delta, b, c, a, d, reversed))
}

/// One MSM block. The block's linear layer is shared between the scan
/// branch and the skip branch:
///
/// ```text
/// D_r = IN(fwd(conv(LN(D))) + bwd(conv(LN(D))))
/// D'  = IN(LN(D)) + D_r
/// ```
pub fn msm_block(tape: &mut Tape, params: &ModelParams, d_prev: Var, block: usize) -> Result<Var> {
    let p = format!("msm.block{block}");
    let lw = params.var(tape, &format!("{p}.ln.w"))?;
    let lb = params.var(tape, &format!("{p}.ln.b"))?;
    let ln = nn::linear(tape, d_prev, lw, lb);

    let kernel = params.var(tape, &format!("{p}.conv.k"))?;
    let mu = tape.causal_conv(ln, kernel);
    let fwd = ssm_branch(tape, params, mu, &p, "fwd", false)?;
    let bwd = ssm_branch(tape, params, mu, &p, "bwd", true)?;
    let both = tape.add(fwd, bwd);

    let r_scale = params.var(tape, &format!("{p}.in_r.scale"))?;
    let r_shift = params.var(tape, &format!("{p}.in_r.shift"))?;
    let d_r = tape.instance_norm(both, r_scale, r_shift);

    let s_scale = params.var(tape, &format!("{p}.in_skip.scale"))?;
    let s_shift = params.var(tape, &format!("{p}.in_skip.shift"))?;
    let skip = tape.instance_norm(ln, s_scale, s_shift);
    Ok(tape.add(skip, d_r))
}

/// Full denoiser graph; returns predicted clean tokens for the x_t span.
pub fn msm_graph(
    tape: &mut Tape,
    params: &ModelParams,
    x_t: Var,
    t: usize,
    condition: Var,
    stream: StreamKind,
) -> Result<Var> {
    let config = &params.config;
    let assembled = assemble_input(tape, params, x_t, t, condition, stream)?;

    // Shared input linear: produces D^0 and anchors the long residual.
    let in_w = params.var(tape, "msm.input_lin.w")?;
    let in_b = params.var(tape, "msm.input_lin.b")?;
    let d0 = nn::linear(tape, assembled.d_in, in_w, in_b);

    let mut d = d0;
    for i in 1..=config.n_blocks {
        d = msm_block(tape, params, d, i)?;
    }
    let d_res = tape.add(d0, d);

    // MHA residual over the shared res linear.
    let res_w = params.var(tape, "msm.res_lin.w")?;
    let res_b = params.var(tape, "msm.res_lin.b")?;
    let res = nn::linear(tape, d_res, res_w, res_b);
    let sg_scale = params.var(tape, "msm.in_sigma.scale")?;
    let sg_shift = params.var(tape, "msm.in_sigma.shift")?;
    let normed = tape.instance_norm(res, sg_scale, sg_shift);
    let wq = params.var(tape, "msm.mha.wq")?;
    let bq = params.var(tape, "msm.mha.bq")?;
    let wk = params.var(tape, "msm.mha.wk")?;
    let bk = params.var(tape, "msm.mha.bk")?;
    let wv = params.var(tape, "msm.mha.wv")?;
    let bv = params.var(tape, "msm.mha.bv")?;
    let wo = params.var(tape, "msm.mha.wo")?;
    let bo = params.var(tape, "msm.mha.bo")?;
    let attended = nn::mha(
        tape,
        res,
        res,
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        config.n_heads,
    );
    let sigma = tape.add(normed, attended);

    // FFN head with an instance-norm residual.
    let f1w = params.var(tape, "msm.ffn.w1")?;
    let f1b = params.var(tape, "msm.ffn.b1")?;
    let f2w = params.var(tape, "msm.ffn.w2")?;
    let f2b = params.var(tape, "msm.ffn.b2")?;
    let fed = nn::ffn(tape, sigma, f1w, f1b, f2w, f2b);
    let o_scale = params.var(tape, "msm.in_out.scale")?;
    let o_shift = params.var(tape, "msm.in_out.shift")?;
    let o_norm = tape.instance_norm(sigma, o_scale, o_shift);
    let d_out = tape.add(fed, o_norm);

    let span = tape.slice_rows(d_out, 0, assembled.x_len);
    let hw = params.var(tape, &format!("msm.head.{}.w", stream.key()))?;
    let hb = params.var(tape, &format!("msm.head.{}.b", stream.key()))?;
    Ok(nn::linear(tape, span, hw, hb))
}

/// Plain forward pass: predicted clean tokens, same shape as `x_t`.
pub fn msm_forward(
    params: &ModelParams,
    x_t: &Mat,
    t: usize,
    condition: &ConditionTensor,
    stream: StreamKind,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let c = tape.constant(condition.tokens.clone());
    let out = msm_graph(&mut tape, params, x, t, c, stream)?;
    Ok(tape.value(out).clone())
}

/// Borrowed params plus a stream choice, usable wherever a
/// [`crate::diffusion::Denoiser`] is expected.
pub struct MsmDenoiser<'a> {
    pub params: &'a ModelParams,
    pub stream: StreamKind,
}

impl crate::diffusion::Denoiser for MsmDenoiser<'_> {
    fn denoise(&self, x_t: &Mat, t: usize, condition: &ConditionTensor) -> Result<Mat> {
        msm_forward(self.params, x_t, t, condition, self.stream)
    }
}
