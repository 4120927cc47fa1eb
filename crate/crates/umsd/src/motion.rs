//! Motion representations and forward kinematics.
//!
//! A motion is either a content representation (per-frame joint rotations as
//! unit quaternions plus a root translation) or a style representation
//! (per-frame joint positions). Clips can carry both payloads: the synthetic
//! dataset stores each motion's rotations together with its stylised
//! positions so one file serves both input streams.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::quat::Quat;
use crate::skeleton::Skeleton;
use crate::tape::{Tape, Var};

/// A foot joint is in contact when its height is below this many metres...
pub const CONTACT_HEIGHT: f64 = 0.05;
/// ...and it moved less than this many metres since the previous frame.
pub const CONTACT_SPEED: f64 = 0.02;

/// Per-frame joint rotations (N x 4J, quaternions in w,x,y,z order) plus the
/// root translation (N x 3).
#[derive(Clone, Debug, PartialEq)]
pub struct ContentRepr {
    pub quats: Mat,
    pub root: Mat,
}

/// Per-frame global joint positions (N x 3J).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleRepr {
    pub positions: Mat,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ReprKind {
    Content,
    Style,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub skeleton: Skeleton,
    pub fps: f64,
    pub content_label: String,
    pub style_label: String,
    pub content: Option<ContentRepr>,
    pub style: Option<StyleRepr>,
}

/// Flattened token view of a clip; carries everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub kind: ReprKind,
    /// N x 4J for content, N x 3J for style.
    pub tokens: Mat,
    /// Root translation rows for content sequences; `None` for style.
    pub root: Option<Mat>,
    pub skeleton: Skeleton,
    pub fps: f64,
    pub content_label: String,
    pub style_label: String,
}

impl ContentRepr {
    pub fn new(quats: Mat, root: Mat) -> Result<Self> {
        if quats.cols() % 4 != 0 {
            return Err(Error::Dimension(
                "quat width must be a multiple of 4".into(),
            ));
        }
        if root.shape() != (quats.rows(), 3) {
            return Err(Error::Dimension(format!(
                "root translation {}x{} does not match {} frames",
                root.rows(),
                root.cols(),
                quats.rows()
            )));
        }
        Ok(ContentRepr { quats, root })
    }

    pub fn frames(&self) -> usize {
        self.quats.rows()
    }

    pub fn joints(&self) -> usize {
        self.quats.cols() / 4
    }

    pub fn quat(&self, frame: usize, joint: usize) -> Quat {
        let r = self.quats.row(frame);
        Quat::from_array([
            r[joint * 4],
            r[joint * 4 + 1],
            r[joint * 4 + 2],
            r[joint * 4 + 3],
        ])
    }

    pub fn set_quat(&mut self, frame: usize, joint: usize, q: Quat) {
        let r = self.quats.row_mut(frame);
        r[joint * 4..joint * 4 + 4].copy_from_slice(&q.to_array());
    }

    pub fn root_at(&self, frame: usize) -> [f64; 3] {
        let r = self.root.row(frame);
        [r[0], r[1], r[2]]
    }

    /// Content tokens with the root translation appended per frame:
    /// N x (4J + 3). This is the conditioning-stream layout.
    pub fn tokens_with_root(&self) -> Mat {
        let mut out = Mat::zeros(self.frames(), self.quats.cols() + 3);
        for f in 0..self.frames() {
            let row = out.row_mut(f);
            row[..self.quats.cols()].copy_from_slice(self.quats.row(f));
            row[self.quats.cols()..].copy_from_slice(self.root.row(f));
        }
        out
    }
}

impl StyleRepr {
    pub fn new(positions: Mat) -> Result<Self> {
        if positions.cols() % 3 != 0 {
            return Err(Error::Dimension(
                "position width must be a multiple of 3".into(),
            ));
        }
        Ok(StyleRepr { positions })
    }

    pub fn frames(&self) -> usize {
        self.positions.rows()
    }

    pub fn joints(&self) -> usize {
        self.positions.cols() / 3
    }

    pub fn position(&self, frame: usize, joint: usize) -> [f64; 3] {
        let r = self.positions.row(frame);
        [r[joint * 3], r[joint * 3 + 1], r[joint * 3 + 2]]
    }
}

impl MotionClip {
    pub fn frame_count(&self) -> usize {
        self.content
            .as_ref()
            .map(|c| c.frames())
            .or_else(|| self.style.as_ref().map(|s| s.frames()))
            .unwrap_or(0)
    }

    /// Global joint positions: the style payload when present, otherwise
    /// forward kinematics of the content payload.
    pub fn positions(&self) -> Result<Mat> {
        if let Some(s) = &self.style {
            return Ok(s.positions.clone());
        }
        let content = self
            .content
            .as_ref()
            .ok_or_else(|| Error::Dimension("clip carries no payload".into()))?;
        forward_kinematics(content, &self.skeleton)
    }

    /// Checks payload shapes against the skeleton, finiteness, unit quaternion
    /// norms (within 1e-6), and that dual payloads agree on the frame count.
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        let j = self.skeleton.joint_count();
        if self.content.is_none() && self.style.is_none() {
            return Err(Error::Dimension("clip has no payload".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps {} must be positive", self.fps)));
        }
        if let Some(c) = &self.content {
            if c.joints() != j {
                return Err(Error::Dimension(format!(
                    "content has {} joints, skeleton has {j}",
                    c.joints()
                )));
            }
            if c.frames() == 0 {
                return Err(Error::Dimension("content payload has no frames".into()));
            }
            if !c.quats.all_finite() || !c.root.all_finite() {
                return Err(Error::NonFinite("content payload".into()));
            }
            for f in 0..c.frames() {
                for jj in 0..j {
                    let n = c.quat(f, jj).norm();
                    if (n - 1.0).abs() > 1e-6 {
                        return Err(Error::DegeneratePose(format!(
                            "quaternion at frame {f} joint {jj} has norm {n}"
                        )));
                    }
                }
            }
        }
        if let Some(s) = &self.style {
            if s.joints() != j {
                return Err(Error::Dimension(format!(
                    "style has {} joints, skeleton has {j}",
                    s.joints()
                )));
            }
            if s.frames() == 0 {
                return Err(Error::Dimension("style payload has no frames".into()));
            }
            if !s.positions.all_finite() {
                return Err(Error::NonFinite("style payload".into()));
            }
        }
        if let (Some(c), Some(s)) = (&self.content, &self.style) {
            if c.frames() != s.frames() {
                return Err(Error::Dimension(format!(
                    "content has {} frames, style has {}",
                    c.frames(),
                    s.frames()
                )));
            }
        }
        Ok(())
    }
}

/// Normalises every quaternion to unit length with canonical sign (w >= 0).
/// Idempotent; errors on near-zero quaternions.
pub fn normalize_quaternions(content: &mut ContentRepr) -> Result<()> {
    for f in 0..content.frames() {
        for j in 0..content.joints() {
            let q = content.quat(f, j).normalized()?;
            content.set_quat(f, j, q);
        }
    }
    Ok(())
}

/// Global joint positions (N x 3J) from local rotations.
///
/// The root sits at the root translation; every other joint is placed at
/// `parent_position + parent_global_rotation * rest_offset`, with global
/// rotations accumulated down the hierarchy. Rest offsets are rigid, so
/// parent-child distances always equal the offset length.
pub fn forward_kinematics(content: &ContentRepr, skel: &Skeleton) -> Result<Mat> {
    let j = skel.joint_count();
    if content.joints() != j {
        return Err(Error::Dimension(format!(
            "content has {} joints, skeleton has {j}",
            content.joints()
        )));
    }
    let n = content.frames();
    let mut out = Mat::zeros(n, 3 * j);
    let mut global_rot = vec![Quat::IDENTITY; j];
    let mut global_pos = vec![[0.0; 3]; j];
    for f in 0..n {
        for jj in 0..j {
            let local = content.quat(f, jj);
            match skel.parent(jj) {
                None => {
                    global_rot[jj] = local;
                    global_pos[jj] = content.root_at(f);
                }
                Some(p) => {
                    let off = skel.rest_offset(jj);
                    let rotated = global_rot[p].rotate(off);
                    global_pos[jj] = [
                        global_pos[p][0] + rotated[0],
                        global_pos[p][1] + rotated[1],
                        global_pos[p][2] + rotated[2],
                    ];
                    global_rot[jj] = global_rot[p].mul(local);
                }
            }
            out.row_mut(f)[jj * 3..jj * 3 + 3].copy_from_slice(&global_pos[jj]);
        }
    }
    Ok(out)
}

/// Tape version of [`forward_kinematics`]: takes an N x 4J quaternion Var
/// (normalise it first with [`Tape::normalize_quat_rows`]) and an N x 3 root
/// Var, and returns one N x 3 position Var per joint.
pub fn fk_graph(tape: &mut Tape, quats: Var, root: Var, skel: &Skeleton) -> Vec<Var> {
    let j = skel.joint_count();
    let n = tape.value(quats).rows();
    let conj_mask = vec![1.0, -1.0, -1.0, -1.0];
    let mut global_rot: Vec<Var> = Vec::with_capacity(j);
    let mut global_pos: Vec<Var> = Vec::with_capacity(j);
    for jj in 0..j {
        let local = tape.slice_cols(quats, jj * 4, 4);
        match skel.parent(jj) {
            None => {
                global_rot.push(local);
                global_pos.push(root);
            }
            Some(p) => {
                let off = skel.rest_offset(jj);
                let off_rows = Mat::from_fn(n, 4, |_, c| if c == 0 { 0.0 } else { off[c - 1] });
                let off_var = tape.constant(off_rows);
                let parent_rot = global_rot[p];
                let conj = tape.mul_row_const(parent_rot, conj_mask.clone());
                let tmp = tape.quat_mul_rows(parent_rot, off_var);
                let rotated = tape.quat_mul_rows(tmp, conj);
                let rotated_v = tape.slice_cols(rotated, 1, 3);
                let pos = tape.add(global_pos[p], rotated_v);
                global_pos.push(pos);
                let rot = tape.quat_mul_rows(parent_rot, local);
                global_rot.push(rot);
            }
        }
    }
    global_pos
}

/// Contact mask over foot joints: N x n_feet, 1.0 where the foot is both low
/// (height below [`CONTACT_HEIGHT`]) and slow (per-frame displacement below
/// [`CONTACT_SPEED`]). Frame 0 uses the forward difference.
pub fn foot_contact_mask(positions: &Mat, foot_joints: &[usize]) -> Mat {
    let n = positions.rows();
    let mut mask = Mat::zeros(n, foot_joints.len());
    for (fi, &joint) in foot_joints.iter().enumerate() {
        for f in 0..n {
            let p = &positions.row(f)[joint * 3..joint * 3 + 3];
            let other = if f == 0 { 1.min(n - 1) } else { f - 1 };
            let q = &positions.row(other)[joint * 3..joint * 3 + 3];
            let speed =
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            if p[1] < CONTACT_HEIGHT && speed < CONTACT_SPEED {
                *mask.at_mut(f, fi) = 1.0;
            }
        }
    }
    mask
}

/// Flattens a clip into its token matrix. Clips holding both payloads
/// flatten as content; single-payload clips round-trip bit-exactly through
/// [`unflatten`].
pub fn flatten(clip: &MotionClip) -> Result<TokenSeq> {
    let (kind, tokens, root) = match (&clip.content, &clip.style) {
        (Some(c), _) => (ReprKind::Content, c.quats.clone(), Some(c.root.clone())),
        (None, Some(s)) => (ReprKind::Style, s.positions.clone(), None),
        (None, None) => return Err(Error::Dimension("clip has no payload".into())),
    };
    Ok(TokenSeq {
        kind,
        tokens,
        root,
        skeleton: clip.skeleton.clone(),
        fps: clip.fps,
        content_label: clip.content_label.clone(),
        style_label: clip.style_label.clone(),
    })
}

pub fn unflatten(seq: &TokenSeq) -> Result<MotionClip> {
    let (content, style) = match seq.kind {
        ReprKind::Content => {
            let root = seq
                .root
                .clone()
                .ok_or_else(|| Error::Dimension("content tokens need a root".into()))?;
            (Some(ContentRepr::new(seq.tokens.clone(), root)?), None)
        }
        ReprKind::Style => (None, Some(StyleRepr::new(seq.tokens.clone())?)),
    };
    Ok(MotionClip {
        skeleton: seq.skeleton.clone(),
        fps: seq.fps,
        content_label: seq.content_label.clone(),
        style_label: seq.style_label.clone(),
        content,
        style,
    })
}
