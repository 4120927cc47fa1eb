//! Training objectives.
//!
//! The objective combines two diffusion-based consistency terms with three
//! geometric regularisers:
//!
//! - content consistency: noise the content tokens, denoise them under the
//!   fused condition, take the element-averaged L1 distance to the clean
//!   tokens;
//! - style consistency: the same with the style tokens and the style head;
//! - positions, velocities, and masked foot velocities of the predicted
//!   clean content, all measured on forward-kinematics joint positions
//!   against the target clip.
//!
//! The condition is always built from the *clean* clips. Geometric terms are
//! evaluated on the content-stream prediction; the foot-contact mask comes
//! from the target positions, so it stays constant under parameter changes.
//!
//! Every term exists twice: a plain function over matrices (usable with any
//! [`TransferModel`], including hand-written oracles) and a tape graph used
//! by the training loop. The two paths share their random draws, so given
//! the same generator state they produce the same numbers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{umsd_condition_graph, ConditionTensor};
use crate::denoiser::{msm_graph, StreamKind};
use crate::diffusion::{noise_to, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::motion::{self, fk_graph, forward_kinematics, ContentRepr, MotionClip, StyleRepr};
use crate::nn::ModelParams;
use crate::skeleton::Skeleton;
use crate::tape::{Tape, Var};

/// Per-term weights; the total is the weighted sum. Defaults are all 1.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dcc: f64,
    pub dsc: f64,
    pub pos: f64,
    pub vel: f64,
    pub foot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dcc: 1.0,
            dsc: 1.0,
            pos: 1.0,
            vel: 1.0,
            foot: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dcc", self.dcc),
            ("dsc", self.dsc),
            ("pos", self.pos),
            ("vel", self.vel),
            ("foot", self.foot),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Raw per-term values plus the weighted total for one batch (or item).
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dcc: f64,
    pub dsc: f64,
    pub pos: f64,
    pub vel: f64,
    pub foot: f64,
    pub total: f64,
}

impl LossReport {
    fn accumulate(&mut self, o: &LossReport) {
        self.dcc += o.dcc;
        self.dsc += o.dsc;
        self.pos += o.pos;
        self.vel += o.vel;
        self.foot += o.foot;
        self.total += o.total;
    }

    fn scaled(mut self, k: f64) -> LossReport {
        self.dcc *= k;
        self.dsc *= k;
        self.pos *= k;
        self.vel *= k;
        self.foot *= k;
        self.total *= k;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.dcc, self.dsc, self.pos, self.vel, self.foot, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Anything that can condition on a clip pair and denoise tokens. The model
/// parameters implement this via the attention block and the denoiser;
/// tests substitute hand-written oracles.
pub trait TransferModel {
    /// `content` rows are content tokens with root (N_c x (4J+3)); `style`
    /// rows are joint positions (N_s x 3J).
    fn condition(&self, content: &Mat, style: &Mat) -> Result<ConditionTensor>;
    fn denoise(
        &self,
        x_t: &Mat,
        t: usize,
        condition: &ConditionTensor,
        stream: StreamKind,
    ) -> Result<Mat>;
}

impl TransferModel for ModelParams {
    fn condition(&self, content: &Mat, style: &Mat) -> Result<ConditionTensor> {
        crate::attention::umsd_forward(self, content, style)
    }

    fn denoise(
        &self,
        x_t: &Mat,
        t: usize,
        condition: &ConditionTensor,
        stream: StreamKind,
    ) -> Result<Mat> {
        crate::denoiser::msm_forward(self, x_t, t, condition, stream)
    }
}

/// One training pair: the clip providing the content stream and the clip
/// providing the style stream. Both may be the same clip.
#[derive(Copy, Clone)]
pub struct TrainPair<'a> {
    pub content: &'a MotionClip,
    pub style: &'a MotionClip,
}

impl<'a> TrainPair<'a> {
    pub fn content_repr(&self) -> Result<&'a ContentRepr> {
        self.content
            .content
            .as_ref()
            .ok_or_else(|| Error::Dimension("content clip carries no rotations".into()))
    }

    pub fn style_repr(&self) -> Result<&'a StyleRepr> {
        self.style
            .style
            .as_ref()
            .ok_or_else(|| Error::Dimension("style clip carries no positions".into()))
    }
}

fn l1_mean(pred: &Mat, target: &Mat) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

// Noise the clean tokens, denoise, and measure the element-averaged L1
// distance back to them. Returns the prediction for downstream geometry.
fn consistency_term<M: TransferModel, R: Rng>(
    tokens0: &Mat,
    t: usize,
    condition: &ConditionTensor,
    stream: StreamKind,
    schedule: &NoiseSchedule,
    model: &M,
    rng: &mut R,
) -> Result<(f64, Mat)> {
    let (x_t, _eps) = noise_to(tokens0, t, schedule, rng)?;
    let pred = model.denoise(&x_t, t, condition, stream)?;
    Ok((l1_mean(&pred, tokens0)?, pred))
}

/// Content consistency: noise the content tokens to step `t`, denoise under
/// the clean-pair condition, and take the mean L1 error.
pub fn loss_dcc<M: TransferModel, R: Rng>(
    content: &ContentRepr,
    style: &StyleRepr,
    t: usize,
    schedule: &NoiseSchedule,
    model: &M,
    rng: &mut R,
) -> Result<f64> {
    let condition = model.condition(&content.tokens_with_root(), &style.positions)?;
    let (loss, _) = consistency_term(
        &content.quats,
        t,
        &condition,
        StreamKind::Content,
        schedule,
        model,
        rng,
    )?;
    Ok(loss)
}

/// Style consistency: the same construction over the style tokens.
pub fn loss_dsc<M: TransferModel, R: Rng>(
    content: &ContentRepr,
    style: &StyleRepr,
    t: usize,
    schedule: &NoiseSchedule,
    model: &M,
    rng: &mut R,
) -> Result<f64> {
    let condition = model.condition(&content.tokens_with_root(), &style.positions)?;
    let (loss, _) = consistency_term(
        &style.positions,
        t,
        &condition,
        StreamKind::Style,
        schedule,
        model,
        rng,
    )?;
    Ok(loss)
}

/// Mean squared distance between predicted and target joint positions,
/// averaged over frames and joints (each joint contributes its full squared
/// 3-vector distance).
pub fn loss_pos(pred: &ContentRepr, target: &ContentRepr, skel: &Skeleton) -> Result<f64> {
    if pred.frames() != target.frames() {
        return Err(Error::Dimension(format!(
            "prediction has {} frames, target {}",
            pred.frames(),
            target.frames()
        )));
    }
    let p = forward_kinematics(pred, skel)?;
    let t = forward_kinematics(target, skel)?;
    let (n, j) = (pred.frames(), skel.joint_count());
    let mut acc = 0.0;
    for f in 0..n {
        for c in 0..3 * j {
            acc += (p.at(f, c) - t.at(f, c)).powi(2);
        }
    }
    Ok(acc / (n * j) as f64)
}

/// Mean squared difference between frame-to-frame position deltas.
pub fn loss_vel(pred: &ContentRepr, target: &ContentRepr, skel: &Skeleton) -> Result<f64> {
    if pred.frames() != target.frames() {
        return Err(Error::Dimension(format!(
            "prediction has {} frames, target {}",
            pred.frames(),
            target.frames()
        )));
    }
    let n = pred.frames();
    if n < 2 {
        return Err(Error::Dimension(
            "velocity loss needs at least 2 frames".into(),
        ));
    }
    let p = forward_kinematics(pred, skel)?;
    let t = forward_kinematics(target, skel)?;
    let j = skel.joint_count();
    let mut acc = 0.0;
    for f in 0..n - 1 {
        for c in 0..3 * j {
            let pv = p.at(f + 1, c) - p.at(f, c);
            let tv = t.at(f + 1, c) - t.at(f, c);
            acc += (pv - tv).powi(2);
        }
    }
    Ok(acc / ((n - 1) * j) as f64)
}

/// Foot-contact mask over velocity slots: row `k` covers the step from
/// frame `k` to `k+1` and is set when the foot is low and slow at the step's
/// end, matching [`motion::foot_contact_mask`] shifted by one frame.
pub fn contact_mask(target_positions: &Mat, foot_joints: &[usize]) -> Mat {
    let full = motion::foot_contact_mask(target_positions, foot_joints);
    Mat::from_fn(full.rows().saturating_sub(1), foot_joints.len(), |k, f| {
        full.at(k + 1, f)
    })
}

/// Mean squared foot speed over masked slots; 0 when nothing is masked.
pub fn loss_foot(pred: &ContentRepr, skel: &Skeleton, mask: &Mat) -> Result<f64> {
    let n = pred.frames();
    let feet = skel.foot_joints();
    if mask.shape() != (n.saturating_sub(1), feet.len()) {
        return Err(Error::Dimension(format!(
            "contact mask is {}x{}, expected {}x{}",
            mask.rows(),
            mask.cols(),
            n.saturating_sub(1),
            feet.len()
        )));
    }
    let p = forward_kinematics(pred, skel)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in 0..n.saturating_sub(1) {
        for (fi, &joint) in feet.iter().enumerate() {
            if mask.at(k, fi) == 0.0 {
                continue;
            }
            let v2: f64 = (0..3)
                .map(|c| (p.at(k + 1, joint * 3 + c) - p.at(k, joint * 3 + c)).powi(2))
                .sum();
            acc += v2;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

// Plain mirror of Tape::normalize_quat_rows so the reporting path and the
// training graph normalise predictions identically.
fn normalize_quat_mat(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for q in out.row_mut(r).chunks_mut(4) {
            let n2: f64 = q.iter().map(|x| x * x).sum();
            let inv = 1.0 / (n2 + 1e-12).sqrt();
            for x in q {
                *x *= inv;
            }
        }
    }
    out
}

fn pair_report<M: TransferModel, R: Rng>(
    pair: &TrainPair,
    weights: &LossWeights,
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossReport> {
    let content = pair.content_repr()?;
    let style = pair.style_repr()?;
    let skel = &pair.content.skeleton;
    let t = rng.random_range(1..=schedule.steps());

    let condition = model.condition(&content.tokens_with_root(), &style.positions)?;
    let (dcc, pred_c) = consistency_term(
        &content.quats,
        t,
        &condition,
        StreamKind::Content,
        schedule,
        model,
        rng,
    )?;
    let (dsc, _) = consistency_term(
        &style.positions,
        t,
        &condition,
        StreamKind::Style,
        schedule,
        model,
        rng,
    )?;

    let pred = ContentRepr::new(normalize_quat_mat(&pred_c), content.root.clone())?;
    let pos = loss_pos(&pred, content, skel)?;
    let vel = loss_vel(&pred, content, skel)?;
    let target_positions = forward_kinematics(content, skel)?;
    let mask = contact_mask(&target_positions, skel.foot_joints());
    let foot = loss_foot(&pred, skel, &mask)?;

    let total = weights.dcc * dcc
        + weights.dsc * dsc
        + weights.pos * pos
        + weights.vel * vel
        + weights.foot * foot;
    Ok(LossReport {
        dcc,
        dsc,
        pos,
        vel,
        foot,
        total,
    })
}

/// Batch objective: per item, draws a uniform timestep, evaluates both
/// consistency terms and the geometric terms on the content prediction, and
/// averages the reports over the batch.
pub fn total_loss<M: TransferModel, R: Rng>(
    batch: &[TrainPair],
    weights: &LossWeights,
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossReport> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut sum = LossReport::default();
    for pair in batch {
        sum.accumulate(&pair_report(pair, weights, model, schedule, rng)?);
    }
    Ok(sum.scaled(1.0 / batch.len() as f64))
}

// sum over all entries of (a - b)^2 where b is a plain matrix.
fn sq_diff_sum(tape: &mut Tape, a: Var, b: &Mat) -> Var {
    let bc = tape.constant(b.clone());
    let d = tape.sub(a, bc);
    let sq = tape.mul_elem(d, d);
    tape.sum_all(sq)
}

fn frame_delta(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).rows();
    let tail = tape.slice_rows(x, 1, n - 1);
    let head = tape.slice_rows(x, 0, n - 1);
    tape.sub(tail, head)
}

/// Differentiable single-pair objective on `tape`.
///
/// Draws the timestep and both noise samples from `rng` in the same order as
/// [`total_loss`], so a cloned generator reproduces the plain report. The
/// returned variable is the weighted total; the report carries the raw term
/// values read back off the tape.
pub fn item_loss_graph<R: Rng>(
    tape: &mut Tape,
    params: &ModelParams,
    pair: &TrainPair,
    weights: &LossWeights,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let content = pair.content_repr()?;
    let style = pair.style_repr()?;
    let skel = &pair.content.skeleton;
    let (n, j) = (content.frames(), skel.joint_count());
    if n < 2 {
        return Err(Error::Dimension(
            "training clips need at least 2 frames".into(),
        ));
    }
    let t = rng.random_range(1..=schedule.steps());

    // Condition from the clean pair; gradients flow into the attention block.
    let c_in = tape.constant(content.tokens_with_root());
    let s_in = tape.constant(style.positions.clone());
    let condition = umsd_condition_graph(tape, params, c_in, s_in)?;

    // Content consistency.
    let (x_t_c, _) = noise_to(&content.quats, t, schedule, rng)?;
    let x_c = tape.constant(x_t_c);
    let pred_c = msm_graph(tape, params, x_c, t, condition.tokens, StreamKind::Content)?;
    let clean_c = tape.constant(content.quats.clone());
    let diff_c = tape.sub(pred_c, clean_c);
    let abs_c = tape.abs(diff_c);
    let dcc = tape.mean_all(abs_c);

    // Style consistency.
    let (x_t_s, _) = noise_to(&style.positions, t, schedule, rng)?;
    let x_s = tape.constant(x_t_s);
    let pred_s = msm_graph(tape, params, x_s, t, condition.tokens, StreamKind::Style)?;
    let clean_s = tape.constant(style.positions.clone());
    let diff_s = tape.sub(pred_s, clean_s);
    let abs_s = tape.abs(diff_s);
    let dsc = tape.mean_all(abs_s);

    // Geometry of the content prediction, against target forward kinematics.
    let nq = tape.normalize_quat_rows(pred_c);
    let root = tape.constant(content.root.clone());
    let pred_pos = fk_graph(tape, nq, root, skel);
    let target_positions = forward_kinematics(content, skel)?;

    let mut pos_acc: Option<Var> = None;
    let mut vel_acc: Option<Var> = None;
    for (jj, &pv) in pred_pos.iter().enumerate() {
        let tgt = Mat::from_fn(n, 3, |r, c| target_positions.at(r, jj * 3 + c));
        let s = sq_diff_sum(tape, pv, &tgt);
        pos_acc = Some(match pos_acc {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
        let pd = frame_delta(tape, pv);
        let td = Mat::from_fn(n - 1, 3, |r, c| tgt.at(r + 1, c) - tgt.at(r, c));
        let sv = sq_diff_sum(tape, pd, &td);
        vel_acc = Some(match vel_acc {
            Some(acc) => tape.add(acc, sv),
            None => sv,
        });
    }
    let pos = tape.scale(pos_acc.expect("at least one joint"), 1.0 / (n * j) as f64);
    let vel = tape.scale(
        vel_acc.expect("at least one joint"),
        1.0 / ((n - 1) * j) as f64,
    );

    let mask = contact_mask(&target_positions, skel.foot_joints());
    let masked = mask.data().iter().filter(|&&v| v != 0.0).count();
    let foot = if masked == 0 {
        tape.constant(Mat::scalar(0.0))
    } else {
        let mut acc: Option<Var> = None;
        for (fi, &joint) in skel.foot_joints().iter().enumerate() {
            let pd = frame_delta(tape, pred_pos[joint]);
            let sq = tape.mul_elem(pd, pd);
            let m3 = tape.constant(Mat::from_fn(n - 1, 3, |r, _| mask.at(r, fi)));
            let msq = tape.mul_elem(sq, m3);
            let s = tape.sum_all(msq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
        tape.scale(acc.expect("checked foot joints"), 1.0 / masked as f64)
    };

    let mut total = tape.scale(dcc, weights.dcc);
    for (term, w) in [
        (dsc, weights.dsc),
        (pos, weights.pos),
        (vel, weights.vel),
        (foot, weights.foot),
    ] {
        let scaled = tape.scale(term, w);
        total = tape.add(total, scaled);
    }

    let report = LossReport {
        dcc: tape.value(dcc).at(0, 0),
        dsc: tape.value(dsc).at(0, 0),
        pos: tape.value(pos).at(0, 0),
        vel: tape.value(vel).at(0, 0),
        foot: tape.value(foot).at(0, 0),
        total: tape.value(total).at(0, 0),
    };
    Ok((total, report))
}
