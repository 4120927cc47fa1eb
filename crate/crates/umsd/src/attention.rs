//! Two-stream fusion attention: embeds content and style token streams,
//! concatenates them, and runs a three-stage cross/self/cross attention
//! symmetrically over both streams. The output conditions the denoiser.
//!
//! Stage wiring: stage 1 crosses the streams (each stream queries the
//! other), stage 2 is self-attention within each stream, stage 3 crosses
//! again. Stage-i projections belong to the stream whose stage-i tokens
//! they consume: a query projection applies to the querying stream's
//! tokens, key/value projections to the source stream's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{self, ModelParams};
use crate::tape::{Tape, Var};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn d_key(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Stricter check for training-scale configs: small keys make the
    /// attention logits degenerate, so keep d_key usable.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.d_key() < 8 {
            return Err(Error::Config(format!(
                "d_key = d_model / n_heads = {} is below the minimum of 8",
                self.d_key()
            )));
        }
        Ok(())
    }
}

impl Default for AttentionConfig {
    fn default() -> AttentionConfig {
        AttentionConfig {
            d_model: 64,
            n_heads: 4,
        }
    }
}

/// Fused condition produced by the attention block: the first `split_index`
/// token rows belong to the content stream, the rest to the style stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTensor {
    pub tokens: Mat,
    pub split_index: usize,
}

impl ConditionTensor {
    pub fn new(tokens: Mat, split_index: usize) -> Result<ConditionTensor> {
        if split_index == 0 || split_index >= tokens.rows() {
            return Err(Error::Dimension(format!(
                "split index {split_index} must lie strictly inside 0..{}",
                tokens.rows()
            )));
        }
        Ok(ConditionTensor {
            tokens,
            split_index,
        })
    }

    pub fn content_rows(&self) -> usize {
        self.split_index
    }

    pub fn style_rows(&self) -> usize {
        self.tokens.rows() - self.split_index
    }
}

/// Adds positional codes to embedded tokens, row by row.
pub fn positional_encode(tokens: &Mat, table: &Mat) -> Result<Mat> {
    if tokens.cols() != table.cols() {
        return Err(Error::Dimension(format!(
            "token width {} does not match encoding width {}",
            tokens.cols(),
            table.cols()
        )));
    }
    let pe = nn::pe_rows(table, tokens.rows())?;
    tokens.add(&pe)
}

/// One attention stage: project queries from `q_src` and keys/values from
/// `kv_src` (projections carry no bias), then scaled dot-product attention
/// with the heads concatenated back to full width.
pub fn attend(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    n_heads: usize,
) -> Var {
    let q = tape.matmul(q_src, wq);
    let k = tape.matmul(kv_src, wk);
    let v = tape.matmul(kv_src, wv);
    nn::attend_heads(tape, q, k, v, n_heads)
}

/// The fused condition as tape nodes, for use inside larger graphs.
pub struct ConditionGraph {
    pub tokens: Var,
    pub split_index: usize,
}

struct StageVars {
    wq: Var,
    wk: Var,
    wv: Var,
}

fn stage_vars(
    tape: &mut Tape,
    params: &ModelParams,
    stage: usize,
    stream: &str,
) -> Result<StageVars> {
    Ok(StageVars {
        wq: params.var(tape, &format!("umsd.stage{stage}.{stream}.wq"))?,
        wk: params.var(tape, &format!("umsd.stage{stage}.{stream}.wk"))?,
        wv: params.var(tape, &format!("umsd.stage{stage}.{stream}.wv"))?,
    })
}

/// Builds the full fusion block on a tape. `content` is N_c x (4J + 3)
/// tokens, `style` is N_s x 3J tokens; both streams must be non-empty.
pub fn umsd_condition_graph(
    tape: &mut Tape,
    params: &ModelParams,
    content: Var,
    style: Var,
) -> Result<ConditionGraph> {
    let config = &params.config;
    let (n_c, w_c) = tape.value(content).shape();
    let (n_s, w_s) = tape.value(style).shape();
    if n_c == 0 || n_s == 0 {
        return Err(Error::Dimension(
            "both token streams must be non-empty".into(),
        ));
    }
    if w_c != config.content_cond_width() || w_s != config.style_width() {
        return Err(Error::Dimension(format!(
            "stream widths ({w_c}, {w_s}) do not match the model's ({}, {})",
            config.content_cond_width(),
            config.style_width()
        )));
    }
    let heads = config.n_heads;

    // Embed each stream to d_model and add positional codes per stream
    // frame index; this happens once, before stage 1.
    let w_embed_c = params.var(tape, "umsd.embed_content.w")?;
    let b_embed_c = params.var(tape, "umsd.embed_content.b")?;
    let w_embed_s = params.var(tape, "umsd.embed_style.w")?;
    let b_embed_s = params.var(tape, "umsd.embed_style.b")?;
    if n_c.max(n_s) > config.max_len {
        return Err(Error::Dimension(format!(
            "sequence length {} exceeds positional table capacity {}",
            n_c.max(n_s),
            config.max_len
        )));
    }
    let pe = params.var(tape, "umsd.pe")?;
    let pe_c = tape.slice_rows(pe, 0, n_c);
    let pe_s = tape.slice_rows(pe, 0, n_s);
    let ec = nn::linear(tape, content, w_embed_c, b_embed_c);
    let zc1 = tape.add(ec, pe_c);
    let es = nn::linear(tape, style, w_embed_s, b_embed_s);
    let zs1 = tape.add(es, pe_s);

    // Stage 1: cross attention, each stream querying the other.
    let s1c = stage_vars(tape, params, 1, "content")?;
    let s1s = stage_vars(tape, params, 1, "style")?;
    let zc2 = attend(tape, zc1, zs1, s1c.wq, s1s.wk, s1s.wv, heads);
    let zs2 = attend(tape, zs1, zc1, s1s.wq, s1c.wk, s1c.wv, heads);

    // Stage 2: self attention within each stream.
    let s2c = stage_vars(tape, params, 2, "content")?;
    let s2s = stage_vars(tape, params, 2, "style")?;
    let zc3 = attend(tape, zc2, zc2, s2c.wq, s2c.wk, s2c.wv, heads);
    let zs3 = attend(tape, zs2, zs2, s2s.wq, s2s.wk, s2s.wv, heads);

    // Stage 3: cross attention again, on the stage-2 outputs.
    let s3c = stage_vars(tape, params, 3, "content")?;
    let s3s = stage_vars(tape, params, 3, "style")?;
    let zc4 = attend(tape, zc3, zs3, s3c.wq, s3s.wk, s3s.wv, heads);
    let zs4 = attend(tape, zs3, zc3, s3s.wq, s3c.wk, s3c.wv, heads);

    // Residual combine: Z_u1 + linear(Z_u2).
    let zu1 = tape.concat_rows(&[zc1, zs1]);
    let zu2 = tape.concat_rows(&[zc4, zs4]);
    let w_out = params.var(tape, "umsd.out.w")?;
    let b_out = params.var(tape, "umsd.out.b")?;
    let projected = nn::linear(tape, zu2, w_out, b_out);
    let tokens = tape.add(zu1, projected);
    Ok(ConditionGraph {
        tokens,
        split_index: n_c,
    })
}

/// Plain forward pass producing the condition for sampling and evaluation.
pub fn umsd_forward(params: &ModelParams, content: &Mat, style: &Mat) -> Result<ConditionTensor> {
    let mut tape = Tape::new();
    let c = tape.constant(content.clone());
    let s = tape.constant(style.clone());
    let graph = umsd_condition_graph(&mut tape, params, c, s)?;
    ConditionTensor::new(tape.value(graph.tokens).clone(), graph.split_index)
}
