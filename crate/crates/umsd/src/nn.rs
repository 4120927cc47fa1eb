//! Model hyperparameters, the flat parameter store with its named layout,
//! deterministic initialization, and shared graph building blocks (linear,
//! multi-head attention, FFN, sinusoidal encodings).
//!
//! All parameters live in one flat f64 vector. The layout maps names to
//! (shape, offset) and carries each entry's init rule, so checkpoints can
//! verify shape compatibility and initialization is reproducible from a
//! seed alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tape::{Tape, Var};

/// Resolved model hyperparameters; everything needed to rebuild the
/// parameter layout from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// SSM state width per channel.
    pub state_dim: usize,
    pub conv_width: usize,
    pub n_blocks: usize,
    /// FFN hidden width as a multiple of d_model.
    pub ffn_mult: usize,
    /// Diffusion steps; bounds the timestep embedding domain.
    pub t_max: usize,
    /// Positional-encoding table capacity in frames.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            joints: 21,
            d_model: 64,
            n_heads: 4,
            state_dim: 16,
            conv_width: 4,
            n_blocks: 3,
            ffn_mult: 4,
            t_max: 50,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    /// Width of diffusion-state content tokens: rotations only.
    pub fn content_width(&self) -> usize {
        4 * self.joints
    }

    /// Width of the content conditioning stream: rotations + root translation.
    pub fn content_cond_width(&self) -> usize {
        4 * self.joints + 3
    }

    /// Width of style tokens: joint positions.
    pub fn style_width(&self) -> usize {
        3 * self.joints
    }

    pub fn d_key(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.joints == 0 {
            return Err(Error::Config("joints must be positive".into()));
        }
        if self.state_dim == 0 || self.conv_width == 0 || self.n_blocks == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "state_dim, conv_width, n_blocks and ffn_mult must be positive".into(),
            ));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        self.attention().validate_for_training()
    }
}

/// How an entry is filled by [`init_params`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Uniform in +-sqrt(6 / (rows + cols)).
    Xavier,
    Zero,
    One,
    /// Uniform in +-sqrt(6 / (width + 1)); for depthwise conv kernels.
    Conv,
    /// A[c, s] = -(s + 1): stable negative state matrix.
    StateRamp,
    /// Row `pos` gets the sinusoidal position code (trainable thereafter).
    Sinusoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: InitKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named map into the flat parameter vector. Entry order is the layout's
/// construction order and determines both offsets and init draw order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> ParamLayout {
        ParamLayout {
            entries: Vec::new(),
            total: 0,
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: InitKind) {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let entry = ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            offset: self.total,
            init,
        };
        self.total += entry.len();
        self.entries.push(entry);
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownId(format!("parameter '{name}'")))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

impl Default for ParamLayout {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds the complete parameter inventory for the fusion attention block
/// and the denoiser at the given hyperparameters.
pub fn model_layout(config: &ModelConfig) -> ParamLayout {
    let d = config.d_model;
    let s = config.state_dim;
    let mut l = ParamLayout::new();

    // Fusion attention: stream embeddings, 3 stages x 2 streams x {Q, K, V},
    // output linear.
    l.add(
        "umsd.embed_content.w",
        config.content_cond_width(),
        d,
        InitKind::Xavier,
    );
    l.add("umsd.embed_content.b", 1, d, InitKind::Zero);
    l.add(
        "umsd.embed_style.w",
        config.style_width(),
        d,
        InitKind::Xavier,
    );
    l.add("umsd.embed_style.b", 1, d, InitKind::Zero);
    l.add("umsd.pe", config.max_len, d, InitKind::Sinusoid);
    for stage in 1..=3 {
        for stream in ["content", "style"] {
            for proj in ["wq", "wk", "wv"] {
                l.add(
                    &format!("umsd.stage{stage}.{stream}.{proj}"),
                    d,
                    d,
                    InitKind::Xavier,
                );
            }
        }
    }
    l.add("umsd.out.w", d, d, InitKind::Xavier);
    l.add("umsd.out.b", 1, d, InitKind::Zero);

    // Denoiser front: timestep MLP, per-stream input projections, the shared
    // input linear producing D^0 (reused for the long residual).
    l.add("msm.t_mlp.w1", d, d, InitKind::Xavier);
    l.add("msm.t_mlp.b1", 1, d, InitKind::Zero);
    l.add("msm.t_mlp.w2", d, d, InitKind::Xavier);
    l.add("msm.t_mlp.b2", 1, d, InitKind::Zero);
    l.add(
        "msm.in_proj.content.w",
        config.content_width(),
        d,
        InitKind::Xavier,
    );
    l.add("msm.in_proj.content.b", 1, d, InitKind::Zero);
    l.add(
        "msm.in_proj.style.w",
        config.style_width(),
        d,
        InitKind::Xavier,
    );
    l.add("msm.in_proj.style.b", 1, d, InitKind::Zero);
    l.add("msm.input_lin.w", d, d, InitKind::Xavier);
    l.add("msm.input_lin.b", 1, d, InitKind::Zero);

    for i in 1..=config.n_blocks {
        let p = format!("msm.block{i}");
        l.add(&format!("{p}.ln.w"), d, d, InitKind::Xavier);
        l.add(&format!("{p}.ln.b"), 1, d, InitKind::Zero);
        l.add(&format!("{p}.conv.k"), config.conv_width, d, InitKind::Conv);
        for dir in ["fwd", "bwd"] {
            l.add(&format!("{p}.{dir}.a"), d, s, InitKind::StateRamp);
            l.add(&format!("{p}.{dir}.w_delta"), d, d, InitKind::Xavier);
            l.add(&format!("{p}.{dir}.b_delta"), 1, d, InitKind::Zero);
            l.add(&format!("{p}.{dir}.w_b"), d, s, InitKind::Xavier);
            l.add(&format!("{p}.{dir}.w_c"), d, s, InitKind::Xavier);
            l.add(&format!("{p}.{dir}.d"), 1, d, InitKind::One);
        }
        l.add(&format!("{p}.in_r.scale"), 1, d, InitKind::One);
        l.add(&format!("{p}.in_r.shift"), 1, d, InitKind::Zero);
        l.add(&format!("{p}.in_skip.scale"), 1, d, InitKind::One);
        l.add(&format!("{p}.in_skip.shift"), 1, d, InitKind::Zero);
    }

    // Post: shared res linear, IN + MHA residual, FFN + IN head, and the
    // per-stream output heads.
    l.add("msm.res_lin.w", d, d, InitKind::Xavier);
    l.add("msm.res_lin.b", 1, d, InitKind::Zero);
    l.add("msm.in_sigma.scale", 1, d, InitKind::One);
    l.add("msm.in_sigma.shift", 1, d, InitKind::Zero);
    for proj in ["wq", "wk", "wv", "wo"] {
        l.add(&format!("msm.mha.{proj}"), d, d, InitKind::Xavier);
        l.add(
            &format!("msm.mha.{}", proj.replace('w', "b")),
            1,
            d,
            InitKind::Zero,
        );
    }
    l.add("msm.ffn.w1", d, config.ffn_hidden(), InitKind::Xavier);
    l.add("msm.ffn.b1", 1, config.ffn_hidden(), InitKind::Zero);
    l.add("msm.ffn.w2", config.ffn_hidden(), d, InitKind::Xavier);
    l.add("msm.ffn.b2", 1, d, InitKind::Zero);
    l.add("msm.in_out.scale", 1, d, InitKind::One);
    l.add("msm.in_out.shift", 1, d, InitKind::Zero);
    l.add(
        "msm.head.content.w",
        d,
        config.content_width(),
        InitKind::Xavier,
    );
    l.add(
        "msm.head.content.b",
        1,
        config.content_width(),
        InitKind::Zero,
    );
    l.add(
        "msm.head.style.w",
        d,
        config.style_width(),
        InitKind::Xavier,
    );
    l.add("msm.head.style.b", 1, config.style_width(), InitKind::Zero);
    l
}

/// All model parameters: config, layout, and the flat value vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub flat: Vec<f64>,
}

impl ModelParams {
    /// Copies one named entry out as a matrix.
    pub fn mat_of(&self, name: &str) -> Result<Mat> {
        let e = self.layout.entry(name)?;
        let data = self.flat[e.offset..e.offset + e.len()].to_vec();
        Mat::from_vec(e.rows, e.cols, data)
    }

    /// Registers the named entry on a tape as a differentiable leaf.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let e = self.layout.entry(name)?;
        Ok(tape.param(self.mat_of(name)?, e.offset))
    }

    /// Overwrites one named entry; shapes must match exactly.
    pub fn set_mat(&mut self, name: &str, m: &Mat) -> Result<()> {
        let e = self.layout.entry(name)?;
        if (e.rows, e.cols) != m.shape() {
            return Err(Error::Dimension(format!(
                "parameter '{name}' is {}x{}, got {}x{}",
                e.rows,
                e.cols,
                m.rows(),
                m.cols()
            )));
        }
        self.flat[e.offset..e.offset + e.len()].copy_from_slice(m.data());
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.layout.total()
    }
}

/// Deterministic initialization: entries are filled in layout order from a
/// seeded generator, so (config, seed) fully determine the parameters.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let layout = model_layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = init_layout(&layout, &mut rng);
    Ok(ModelParams {
        config: config.clone(),
        layout,
        flat,
    })
}

/// Fills a fresh flat buffer for `layout`, drawing from `rng` in entry order.
pub fn init_layout(layout: &ParamLayout, rng: &mut impl Rng) -> Vec<f64> {
    let mut flat = vec![0.0; layout.total()];
    for e in layout.entries() {
        let dst = &mut flat[e.offset..e.offset + e.len()];
        match e.init {
            InitKind::Xavier => {
                let bound = (6.0 / (e.rows + e.cols) as f64).sqrt();
                for v in dst {
                    *v = rng.random_range(-bound..bound);
                }
            }
            InitKind::Zero => {}
            InitKind::One => dst.fill(1.0),
            InitKind::Conv => {
                let bound = (6.0 / (e.rows + 1) as f64).sqrt();
                for v in dst {
                    *v = rng.random_range(-bound..bound);
                }
            }
            InitKind::StateRamp => {
                for c in 0..e.rows {
                    for s in 0..e.cols {
                        dst[c * e.cols + s] = -((s + 1) as f64);
                    }
                }
            }
            InitKind::Sinusoid => {
                let table = sinusoidal_table(e.rows, e.cols);
                dst.copy_from_slice(table.data());
            }
        }
    }
    flat
}

/// Sinusoidal table: row `pos`, column `2k` holds sin(pos * w_k), column
/// `2k + 1` holds cos(pos * w_k), with w_k = 10000^(-2k/d).
pub fn sinusoidal_table(max_len: usize, d: usize) -> Mat {
    Mat::from_fn(max_len, d, |pos, i| {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// First `n` rows of an encoding table; errors when the sequence is longer
/// than the table.
pub fn pe_rows(table: &Mat, n: usize) -> Result<Mat> {
    if n > table.rows() {
        return Err(Error::Dimension(format!(
            "sequence length {n} exceeds positional table capacity {}",
            table.rows()
        )));
    }
    Ok(table.slice_rows(0, n))
}

/// Sinusoidal embedding of a scalar timestep, as a 1 x d row.
pub fn timestep_embedding(t: usize, d: usize) -> Mat {
    Mat::from_fn(1, d, |_, i| {
        let k = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * k / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// x W + b with the bias broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    tape.add_row_broadcast(xw, b)
}

/// Scaled dot-product attention over already-projected q, k, v, split into
/// `n_heads` column blocks. Head outputs are concatenated back to full
/// width; no output projection is applied here.
pub fn attend_heads(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
    let width = tape.value(q).cols();
    debug_assert_eq!(width % n_heads, 0);
    let d_key = width / n_heads;
    let scale = 1.0 / (d_key as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_key, d_key);
        let kh = tape.slice_cols(k, h * d_key, d_key);
        let vh = tape.slice_cols(v, h * d_key, d_key);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let scaled = tape.scale(logits, scale);
        let weights = tape.softmax_rows(scaled);
        heads.push(tape.matmul(weights, vh));
    }
    if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    }
}

/// Full multi-head attention with input projections (and biases) and an
/// output projection, queries from `q_in`, keys/values from `kv_in`.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    n_heads: usize,
) -> Var {
    let q = linear(tape, q_in, wq, bq);
    let k = linear(tape, kv_in, wk, bk);
    let v = linear(tape, kv_in, wv, bv);
    let out = attend_heads(tape, q, k, v, n_heads);
    linear(tape, out, wo, bo)
}

/// Two-layer feed-forward: linear, GELU, linear.
pub fn ffn(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = linear(tape, x, w1, b1);
    let g = tape.gelu(h);
    linear(tape, g, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            joints: 1,
            d_model: 4,
            n_heads: 2,
            state_dim: 2,
            conv_width: 4,
            n_blocks: 3,
            ffn_mult: 4,
            t_max: 10,
            max_len: 32,
        }
    }

    #[test]
    fn layout_offsets_are_contiguous_and_named_lookup_works() {
        let l = model_layout(&toy_config());
        let mut at = 0;
        for e in l.entries() {
            assert_eq!(e.offset, at);
            at += e.len();
        }
        assert_eq!(at, l.total());
        assert!(l.entry("msm.block2.fwd.a").is_ok());
        assert!(matches!(
            l.entry("msm.block9.fwd.a"),
            Err(Error::UnknownId(_))
        ));
        let stage_mats = l
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("umsd.stage"))
            .count();
        assert_eq!(stage_mats, 18);
    }

    #[test]
    fn total_matches_independent_count() {
        let c = toy_config();
        let (d, s, w) = (c.d_model, c.state_dim, c.conv_width);
        let (cw, ccw, sw) = (c.content_width(), c.content_cond_width(), c.style_width());
        let umsd = (ccw * d + d) + (sw * d + d) + c.max_len * d + 18 * d * d + (d * d + d);
        let front = 2 * (d * d + d) + (cw * d + d) + (sw * d + d) + (d * d + d);
        let ssm = d * s + d * d + d + d * s + d * s + d;
        let block = (d * d + d) + w * d + 2 * ssm + 4 * d;
        let post = (d * d + d)
            + 2 * d
            + 4 * (d * d + d)
            + (d * c.ffn_hidden() + c.ffn_hidden() + c.ffn_hidden() * d + d)
            + 2 * d
            + (d * cw + cw)
            + (d * sw + sw);
        let want = umsd + front + 3 * block + post;
        assert_eq!(model_layout(&c).total(), want);
    }

    #[test]
    fn init_is_deterministic_and_follows_rules() {
        let c = toy_config();
        let a = init_params(&c, 5).unwrap();
        let b = init_params(&c, 5).unwrap();
        assert_eq!(a.flat, b.flat);
        let other = init_params(&c, 6).unwrap();
        assert_ne!(a.flat, other.flat);

        let scale = a.mat_of("msm.block1.in_r.scale").unwrap();
        assert!(scale.data().iter().all(|&v| v == 1.0));
        let shift = a.mat_of("msm.block1.in_r.shift").unwrap();
        assert!(shift.data().iter().all(|&v| v == 0.0));
        let skip = a.mat_of("msm.block1.fwd.d").unwrap();
        assert!(skip.data().iter().all(|&v| v == 1.0));
        let am = a.mat_of("msm.block1.fwd.a").unwrap();
        for ch in 0..am.rows() {
            for st in 0..am.cols() {
                assert_eq!(am.at(ch, st), -((st + 1) as f64));
            }
        }
        let w = a.mat_of("umsd.stage1.style.wq").unwrap();
        let bound = (6.0 / (c.d_model * 2) as f64).sqrt();
        assert!(w.data().iter().all(|&v| v.abs() < bound));
        assert!(w.data().iter().any(|&v| v != 0.0));
        let k = a.mat_of("msm.block1.conv.k").unwrap();
        let kb = (6.0 / (c.conv_width + 1) as f64).sqrt();
        assert!(k.data().iter().all(|&v| v.abs() < kb));
    }

    #[test]
    fn sinusoidal_pairs_have_unit_norm() {
        let t = sinusoidal_table(16, 8);
        for pos in 0..16 {
            for k in 0..4 {
                let s = t.at(pos, 2 * k);
                let c = t.at(pos, 2 * k + 1);
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
        assert!(pe_rows(&t, 16).is_ok());
        assert!(pe_rows(&t, 17).is_err());
    }

    #[test]
    fn timestep_embeddings_distinguish_timesteps() {
        for seed in 0..10 {
            let t1 = 1 + (seed * 3) % 40;
            let t2 = t1 + 1 + seed % 5;
            let a = timestep_embedding(t1, 16);
            let b = timestep_embedding(t2, 16);
            assert!(a.sub(&b).unwrap().max_abs() > 1e-6, "t {t1} vs {t2}");
        }
    }

    #[test]
    fn linear_graph_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_fn(2, 3, |r, c| (r + c) as f64));
        let w = tape.constant(Mat::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.5));
        let b = tape.constant(Mat::from_vec(1, 2, vec![0.25, -0.5]).unwrap());
        let y = linear(&mut tape, x, w, b);
        let got = tape.value(y);
        for r in 0..2 {
            for c in 0..2 {
                let mut want = if c == 0 { 0.25 } else { -0.5 };
                for k in 0..3 {
                    want += (r + k) as f64 * (k as f64 - c as f64) * 0.5;
                }
                assert!((got.at(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_kv_token_attention_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1));
        let k = tape.constant(Mat::from_fn(1, 4, |_, c| c as f64));
        let v = tape.constant(Mat::from_vec(1, 4, vec![9.0, -1.0, 2.5, 0.0]).unwrap());
        for heads in [1, 2] {
            let out = attend_heads(&mut tape, q, k, v, heads);
            let m = tape.value(out).clone();
            for r in 0..3 {
                assert_eq!(m.row(r), &[9.0, -1.0, 2.5, 0.0], "heads {heads}");
            }
        }
    }
}
