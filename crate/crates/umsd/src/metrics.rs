//! Evaluation metrics: Frechet motion distance, kernel motion distance,
//! diversity, and content/style recognition accuracy, plus the small
//! self-trained feature extractor they run on.
//!
//! The extractor is a 1-D convolution + pooling classifier over per-frame
//! joint positions, trained on the synthetic dataset labels; its penultimate
//! layer (width 32 by default) is the feature space used by the distribution
//! metrics. A handcrafted gait-statistics baseline is included as a sanity
//! anchor that carries no learned parameters.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{sqrt_psd, symmetric_eigen, trace};
use crate::mat::Mat;
use crate::motion::MotionClip;
use crate::nn::{init_layout, InitKind, ParamLayout};
use crate::par;
use crate::tape::{Tape, Var};
use crate::train::{adamw_update, OptimizerState, TrainConfig};

/// Added to rank-deficient covariances before the matrix square root.
const COV_EPSILON: f64 = 1e-6;
/// Relative eigenvalue threshold below which a covariance counts as
/// rank deficient.
const RANK_TOL: f64 = 1e-10;
/// Subset size and repeat count for the kernel distance estimator.
const KMD_SUBSET: usize = 50;
const KMD_REPEATS: usize = 10;

/// Per-clip feature vectors, one row per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: Mat,
}

impl FeatureSet {
    pub fn new(features: Mat) -> Result<FeatureSet> {
        if features.cols() < 2 {
            return Err(Error::Dimension(format!(
                "feature vectors need at least 2 dimensions, got {}",
                features.cols()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::Dimension("feature set has no rows".into()));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(FeatureSet { features })
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    /// Number of clips.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Which clip label a classifier predicts.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Content,
    Style,
}

impl LabelKind {
    pub fn label_of<'a>(&self, clip: &'a MotionClip) -> &'a str {
        match self {
            LabelKind::Content => &clip.content_label,
            LabelKind::Style => &clip.style_label,
        }
    }
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

/// Gaussian summary of a feature set.
#[derive(Clone, Debug)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

/// Mean and unbiased covariance of the rows of `features`.
pub fn moments_of(features: &Mat) -> Result<Moments> {
    let n = features.rows();
    let d = features.cols();
    if n < 2 {
        return Err(Error::Dimension(format!(
            "covariance estimation needs at least 2 rows, got {n}"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| features.at(r, c)).sum::<f64>() / n as f64)
        .collect();
    let cov = Mat::from_fn(d, d, |a, b| {
        (0..n)
            .map(|r| (features.at(r, a) - mean[a]) * (features.at(r, b) - mean[b]))
            .sum::<f64>()
            / (n - 1) as f64
    });
    Ok(Moments { mean, cov })
}

// Adds COV_EPSILON to the diagonal when the spectrum says the covariance is
// rank deficient, so the matrix square root stays well defined.
fn regularized(cov: &Mat) -> Result<Mat> {
    let (eig, _) = symmetric_eigen(cov)?;
    let top = eig.last().copied().unwrap_or(0.0).max(0.0);
    let bottom = eig.first().copied().unwrap_or(0.0);
    if bottom <= RANK_TOL * top.max(1e-12) {
        log::warn!("rank-deficient covariance; adding {COV_EPSILON} to the diagonal");
        return Ok(Mat::from_fn(cov.rows(), cov.cols(), |r, c| {
            cov.at(r, c) + if r == c { COV_EPSILON } else { 0.0 }
        }));
    }
    Ok(cov.clone())
}

/// Frechet distance between two Gaussian summaries:
/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
pub fn fmd_from_moments(a: &Moments, b: &Moments) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Dimension(format!(
            "moment dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let ca = regularized(&a.cov)?;
    let cb = regularized(&b.cov)?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ca_half = sqrt_psd(&ca)?;
    let inner = ca_half.matmul(&cb)?.matmul(&ca_half)?;
    let cross = sqrt_psd(&inner)?;
    let value = mean_term + trace(&ca) + trace(&cb) - 2.0 * trace(&cross);
    if !value.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    // The exact quantity is nonnegative; roundoff may dip barely below zero.
    Ok(value.max(0.0))
}

/// Frechet motion distance between two feature sets.
pub fn fmd(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    fmd_from_moments(&moments_of(a.features())?, &moments_of(b.features())?)
}

// ---------------------------------------------------------------------------
// Kernel distance
// ---------------------------------------------------------------------------

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

// Unbiased MMD^2 between the selected rows of two feature matrices.
fn mmd_unbiased(a: &Mat, ai: &[usize], b: &Mat, bi: &[usize]) -> f64 {
    let m = ai.len();
    let n = bi.len();
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += poly_kernel(a.row(ai[i]), a.row(ai[j]));
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += poly_kernel(b.row(bi[i]), b.row(bi[j]));
            }
        }
    }
    let mut kab = 0.0;
    for i in 0..m {
        for j in 0..n {
            kab += poly_kernel(a.row(ai[i]), b.row(bi[j]));
        }
    }
    kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64
}

/// Kernel motion distance: unbiased MMD^2 with the cubic polynomial kernel
/// (x.y/d + 1)^3, averaged over random subsets of 50 clips per side (a single
/// pass over everything when either side has 50 or fewer).
pub fn kmd(a: &FeatureSet, b: &FeatureSet, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let size = KMD_SUBSET.min(a.len()).min(b.len());
    if size < 2 {
        return Err(Error::Dimension(
            "kernel distance needs at least 2 clips per side".into(),
        ));
    }
    let all_a: Vec<usize> = (0..a.len()).collect();
    let all_b: Vec<usize> = (0..b.len()).collect();
    if size == a.len() && size == b.len() {
        return Ok(mmd_unbiased(a.features(), &all_a, b.features(), &all_b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..KMD_REPEATS {
        let ai = rand::seq::index::sample(&mut rng, a.len(), size).into_vec();
        let bi = rand::seq::index::sample(&mut rng, b.len(), size).into_vec();
        total += mmd_unbiased(a.features(), &ai, b.features(), &bi);
    }
    Ok(total / KMD_REPEATS as f64)
}

// ---------------------------------------------------------------------------
// Diversity
// ---------------------------------------------------------------------------

/// Mean Euclidean distance over `n_pairs` random pairs of distinct rows.
pub fn diversity(set: &FeatureSet, n_pairs: usize, seed: u64) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Dimension("diversity needs at least 2 clips".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("diversity needs at least one pair".into()));
    }
    let f = set.features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let d2: f64 = f
            .row(i)
            .iter()
            .zip(f.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / n_pairs as f64)
}

// ---------------------------------------------------------------------------
// Recognition accuracy
// ---------------------------------------------------------------------------

/// Fraction of clips whose predicted label matches the clip's own label of
/// the given kind.
pub fn recognition_accuracy<F>(clips: &[MotionClip], classify: F, kind: LabelKind) -> Result<f64>
where
    F: Fn(&MotionClip) -> Result<String> + Sync + Send,
{
    if clips.is_empty() {
        return Err(Error::Config(
            "recognition accuracy over an empty clip set".into(),
        ));
    }
    let hits = par::try_run_indexed(clips.len(), |i| {
        let predicted = classify(&clips[i])?;
        Ok::<bool, Error>(predicted == kind.label_of(&clips[i]))
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / clips.len() as f64)
}

// ---------------------------------------------------------------------------
// Learned feature extractor
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Temporal window of the 1-D convolution.
    pub conv_width: usize,
    pub conv_channels: usize,
    /// Penultimate layer width; this is the metric feature dimension.
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            conv_width: 5,
            conv_channels: 16,
            feature_dim: 32,
            steps: 300,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_width == 0 || self.conv_channels == 0 || self.feature_dim < 2 {
            return Err(Error::Config(
                "extractor layer sizes must be positive (features >= 2)".into(),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "extractor training needs steps and a batch".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "extractor learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Convolution + pooling classifier over per-frame joint positions. The
/// penultimate activations are the feature space of the distribution
/// metrics; the final layer predicts the training label.
#[derive(Clone, Debug)]
pub struct Extractor {
    config: ExtractorConfig,
    kind: LabelKind,
    classes: Vec<String>,
    joints: usize,
    layout: ParamLayout,
    flat: Vec<f64>,
}

fn extractor_layout(config: &ExtractorConfig, joints: usize, n_classes: usize) -> ParamLayout {
    let mut l = ParamLayout::new();
    l.add(
        "ext.conv.w",
        3 * joints * config.conv_width,
        config.conv_channels,
        InitKind::Xavier,
    );
    l.add("ext.conv.b", 1, config.conv_channels, InitKind::Zero);
    l.add(
        "ext.fc.w",
        config.conv_channels,
        config.feature_dim,
        InitKind::Xavier,
    );
    l.add("ext.fc.b", 1, config.feature_dim, InitKind::Zero);
    l.add(
        "ext.head.w",
        config.feature_dim,
        n_classes,
        InitKind::Xavier,
    );
    l.add("ext.head.b", 1, n_classes, InitKind::Zero);
    l
}

// Positions with the hips x/z subtracted per frame. Height stays absolute so
// vertical style cues survive; horizontal drift (mostly content) drops out.
fn extractor_input(clip: &MotionClip) -> Result<Mat> {
    let pos = clip.positions()?;
    Ok(Mat::from_fn(pos.rows(), pos.cols(), |f, c| {
        let axis = c % 3;
        if axis == 1 {
            pos.at(f, c)
        } else {
            pos.at(f, c) - pos.at(f, axis)
        }
    }))
}

impl Extractor {
    /// Trains the classifier on the clips' labels of the given kind.
    pub fn train(
        clips: &[MotionClip],
        kind: LabelKind,
        config: &ExtractorConfig,
    ) -> Result<Extractor> {
        config.validate()?;
        if clips.is_empty() {
            return Err(Error::Config("extractor training set is empty".into()));
        }
        let joints = clips[0].skeleton.joint_count();
        for c in clips {
            if c.skeleton.joint_count() != joints {
                return Err(Error::Dimension(
                    "extractor training clips mix skeletons".into(),
                ));
            }
        }
        let mut classes: Vec<String> = clips.iter().map(|c| kind.label_of(c).to_string()).collect();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Config(
                "extractor training needs at least 2 classes".into(),
            ));
        }

        let layout = extractor_layout(config, joints, classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let flat = init_layout(&layout, &mut rng);
        let mut ext = Extractor {
            config: config.clone(),
            kind,
            classes,
            joints,
            layout,
            flat,
        };

        let inputs = par::try_run_indexed(clips.len(), |i| extractor_input(&clips[i]))?;
        let targets: Vec<usize> = clips
            .iter()
            .map(|c| {
                let label = kind.label_of(c);
                ext.classes
                    .iter()
                    .position(|l| l == label)
                    .expect("label in classes")
            })
            .collect();

        let opt_config = TrainConfig {
            learning_rate: config.learning_rate,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState {
            m: vec![0.0; ext.layout.total()],
            v: vec![0.0; ext.layout.total()],
            step: 0,
        };
        for _ in 0..config.steps {
            let batch: Vec<usize> = (0..config.batch_size)
                .map(|_| rng.random_range(0..clips.len()))
                .collect();
            let grad_parts = par::try_run_indexed(batch.len(), |k| {
                let idx = batch[k];
                let mut tape = Tape::new();
                let (_, logits) = ext.forward(&mut tape, &inputs[idx])?;
                let loss = ext.cross_entropy(&mut tape, logits, targets[idx]);
                let grads = tape.backward(loss);
                Ok::<Vec<f64>, Error>(grads.param_flat(&tape, ext.layout.total()))
            })?;
            let mut grads = vec![0.0; ext.layout.total()];
            for part in &grad_parts {
                for (g, p) in grads.iter_mut().zip(part) {
                    *g += p / batch.len() as f64;
                }
            }
            if !grads.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite("extractor gradient".into()));
            }
            adamw_update(&mut ext.flat, &grads, &mut opt, &opt_config)?;
        }
        Ok(ext)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    fn param(&self, tape: &mut Tape, name: &str) -> Var {
        let e = self.layout.entry(name).expect("extractor layout entry");
        let m = Mat::from_fn(e.rows, e.cols, |r, c| self.flat[e.offset + r * e.cols + c]);
        tape.param(m, e.offset)
    }

    // Feature and logit heads for one preprocessed clip.
    fn forward(&self, tape: &mut Tape, input: &Mat) -> Result<(Var, Var)> {
        let w = self.config.conv_width;
        if input.cols() != 3 * self.joints {
            return Err(Error::Dimension(format!(
                "clip has {} position columns, extractor expects {}",
                input.cols(),
                3 * self.joints
            )));
        }
        if input.rows() < w {
            return Err(Error::Dimension(format!(
                "clip has {} frames, extractor window needs {w}",
                input.rows()
            )));
        }
        let rows = input.rows() - w + 1;
        let x = tape.constant(input.clone());
        let windows: Vec<Var> = (0..w).map(|o| tape.slice_rows(x, o, rows)).collect();
        let stacked = tape.concat_cols(&windows);

        let conv_w = self.param(tape, "ext.conv.w");
        let conv_b = self.param(tape, "ext.conv.b");
        let h = tape.matmul(stacked, conv_w);
        let h = tape.add_row_broadcast(h, conv_b);
        let h = tape.gelu(h);

        let pool = tape.constant(Mat::from_fn(1, rows, |_, _| 1.0 / rows as f64));
        let pooled = tape.matmul(pool, h);

        let fc_w = self.param(tape, "ext.fc.w");
        let fc_b = self.param(tape, "ext.fc.b");
        let f = tape.matmul(pooled, fc_w);
        let f = tape.add_row_broadcast(f, fc_b);
        let features = tape.gelu(f);

        let head_w = self.param(tape, "ext.head.w");
        let head_b = self.param(tape, "ext.head.b");
        let logits = tape.matmul(features, head_w);
        let logits = tape.add_row_broadcast(logits, head_b);
        Ok((features, logits))
    }

    fn cross_entropy(&self, tape: &mut Tape, logits: Var, target: usize) -> Var {
        let probs = tape.softmax_rows(logits);
        let onehot = tape.constant(Mat::from_fn(1, self.classes.len(), |_, c| {
            f64::from(c == target)
        }));
        let picked = tape.mul_elem(probs, onehot);
        let p = tape.sum_all(picked);
        let logp = tape.ln(p);
        tape.scale(logp, -1.0)
    }

    /// Penultimate-layer activations for one clip.
    pub fn features(&self, clip: &MotionClip) -> Result<Vec<f64>> {
        let input = extractor_input(clip)?;
        let mut tape = Tape::new();
        let (features, _) = self.forward(&mut tape, &input)?;
        Ok(tape.value(features).row(0).to_vec())
    }

    /// Most probable class label for one clip.
    pub fn classify(&self, clip: &MotionClip) -> Result<String> {
        let input = extractor_input(clip)?;
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, &input)?;
        let row = tape.value(logits).row(0);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        Ok(self.classes[best].clone())
    }

    /// Mean cross-entropy over a clip set; a training diagnostic.
    pub fn mean_loss(&self, clips: &[MotionClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::Config("loss over an empty clip set".into()));
        }
        let losses = par::try_run_indexed(clips.len(), |i| {
            let clip = &clips[i];
            let label = self.kind.label_of(clip);
            let target = self
                .classes
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::UnknownId(format!("label '{label}'")))?;
            let input = extractor_input(clip)?;
            let mut tape = Tape::new();
            let (_, logits) = self.forward(&mut tape, &input)?;
            let loss = self.cross_entropy(&mut tape, logits, target);
            Ok::<f64, Error>(tape.value(loss).item())
        })?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Runs the extractor over every clip; one feature row per clip, in order.
pub fn extract_features(clips: &[MotionClip], extractor: &Extractor) -> Result<FeatureSet> {
    if clips.is_empty() {
        return Err(Error::Config(
            "feature extraction over an empty clip set".into(),
        ));
    }
    let rows = par::try_run_indexed(clips.len(), |i| extractor.features(&clips[i]))?;
    FeatureSet::new(Mat::from_rows(&rows)?)
}

// ---------------------------------------------------------------------------
// Handcrafted style statistics baseline
// ---------------------------------------------------------------------------

const STAT_DIM: usize = 5;

/// Five gait statistics that track the synthetic style axes: torso lean,
/// vertical bounce, stride tempo, stride amplitude, and arm swing.
///
/// Joints are looked up by name (hips, chest, wrists, ankles), so this only
/// works on humanoid-named skeletons.
pub fn style_statistics(clip: &MotionClip) -> Result<Vec<f64>> {
    let pos = clip.positions()?;
    let n = pos.rows();
    if n < 4 {
        return Err(Error::Dimension(format!(
            "style statistics need >= 4 frames, got {n}"
        )));
    }
    let joint = |name: &str| {
        clip.skeleton
            .index_of(name)
            .ok_or_else(|| Error::UnknownId(format!("joint '{name}'")))
    };
    let hips = joint("hips")?;
    let chest = joint("chest")?;
    let l_wrist = joint("l_wrist")?;
    let r_wrist = joint("r_wrist")?;
    let l_ankle = joint("l_ankle")?;
    let r_ankle = joint("r_ankle")?;
    let p = |f: usize, j: usize, axis: usize| pos.at(f, 3 * j + axis);

    let mean_std = |values: &[f64]| {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
        (m, var.sqrt())
    };

    // Signed torso pitch: forward offset of the chest over the hips.
    let lean: f64 = (0..n)
        .map(|f| {
            let dz = p(f, chest, 2) - p(f, hips, 2);
            let dy = p(f, chest, 1) - p(f, hips, 1);
            dz.atan2(dy.max(1e-9))
        })
        .sum::<f64>()
        / n as f64;

    let hips_y: Vec<f64> = (0..n).map(|f| p(f, hips, 1)).collect();
    let (_, bounce) = mean_std(&hips_y);

    // Forward ankle separation oscillates at stride frequency regardless of
    // the style, so its zero crossings give tempo and its spread amplitude.
    let stride: Vec<f64> = (0..n)
        .map(|f| p(f, l_ankle, 2) - p(f, r_ankle, 2))
        .collect();
    let (stride_mean, amplitude) = mean_std(&stride);
    let mut crossings = 0usize;
    for k in 1..n {
        let a = stride[k - 1] - stride_mean;
        let b = stride[k] - stride_mean;
        if (a >= 0.0) != (b >= 0.0) {
            crossings += 1;
        }
    }
    let duration = (n - 1) as f64 / clip.fps;
    let tempo = crossings as f64 / duration.max(1e-9);

    let lw: Vec<f64> = (0..n).map(|f| p(f, l_wrist, 2) - p(f, hips, 2)).collect();
    let rw: Vec<f64> = (0..n).map(|f| p(f, r_wrist, 2) - p(f, hips, 2)).collect();
    let (_, lsw) = mean_std(&lw);
    let (_, rsw) = mean_std(&rw);
    let arm_swing = 0.5 * (lsw + rsw);

    Ok(vec![lean, bounce, tempo, amplitude, arm_swing])
}

/// Nearest-neighbor style classifier over z-scored gait statistics. No
/// learned parameters; serves as a floor the trained extractor must clear
/// and as a style-recognition oracle for the synthetic set.
#[derive(Clone, Debug)]
pub struct StyleBaseline {
    stats: Mat,
    labels: Vec<String>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl StyleBaseline {
    pub fn fit(clips: &[MotionClip]) -> Result<StyleBaseline> {
        if clips.len() < 2 {
            return Err(Error::Config("baseline needs at least 2 clips".into()));
        }
        let rows = par::try_run_indexed(clips.len(), |i| style_statistics(&clips[i]))?;
        let raw = Mat::from_rows(&rows)?;
        let n = raw.rows();
        let mut mean = vec![0.0; STAT_DIM];
        let mut std = vec![0.0; STAT_DIM];
        for c in 0..STAT_DIM {
            mean[c] = (0..n).map(|r| raw.at(r, c)).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|r| (raw.at(r, c) - mean[c]).powi(2))
                .sum::<f64>()
                / n as f64;
            std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let stats = Mat::from_fn(n, STAT_DIM, |r, c| (raw.at(r, c) - mean[c]) / std[c]);
        let labels = clips.iter().map(|c| c.style_label.clone()).collect();
        Ok(StyleBaseline {
            stats,
            labels,
            mean,
            std,
        })
    }

    fn zscore(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(c, v)| (v - self.mean[c]) / self.std[c])
            .collect()
    }

    pub fn classify(&self, clip: &MotionClip) -> Result<String> {
        let z = self.zscore(&style_statistics(clip)?);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for r in 0..self.stats.rows() {
            let d: f64 = self
                .stats
                .row(r)
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        Ok(self.labels[best].clone())
    }

    /// Leave-one-out style recognition accuracy over the fitted set.
    pub fn leave_one_out_sra(&self) -> Result<f64> {
        let n = self.stats.rows();
        if n < 2 {
            return Err(Error::Config("leave-one-out needs at least 2 clips".into()));
        }
        let mut hits = 0usize;
        for i in 0..n {
            let mut best = None;
            let mut best_d = f64::INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d: f64 = self
                    .stats
                    .row(i)
                    .iter()
                    .zip(self.stats.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = Some(j);
                }
            }
            if self.labels[best.expect("n >= 2")] == self.labels[i] {
                hits += 1;
            }
        }
        Ok(hits as f64 / n as f64)
    }
}
