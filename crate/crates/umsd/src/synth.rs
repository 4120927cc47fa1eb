//! Procedural generator of labelled (content, style) motion clips.
//!
//! Content classes are periodic gaits driven by per-joint sinusoid banks;
//! styles are parametric deformations of the FK joint positions (tempo warp,
//! excursion scaling, arm swing scaling, torso lean, bounce gain). Every
//! style stage is skipped exactly at its neutral parameter value, so the
//! neutral style reproduces plain forward kinematics bit for bit. Style
//! parameter tables live in [`SynthConfig`], not in the deformation code.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, DatasetManifest, ManifestEntry, SCHEMA_VERSION};
use crate::mat::Mat;
use crate::motion::{forward_kinematics, ContentRepr, MotionClip, StyleRepr};
use crate::par;
use crate::quat::{Axis, Quat};
use crate::skeleton::Skeleton;

pub const MIN_FRAMES: usize = 16;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentClass {
    Walk,
    Run,
    Kick,
    Jump,
}

impl ContentClass {
    pub fn all() -> [ContentClass; 4] {
        [
            ContentClass::Walk,
            ContentClass::Run,
            ContentClass::Kick,
            ContentClass::Jump,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ContentClass::Walk => "walk",
            ContentClass::Run => "run",
            ContentClass::Kick => "kick",
            ContentClass::Jump => "jump",
        }
    }
}

impl fmt::Display for ContentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContentClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<ContentClass> {
        ContentClass::all()
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownId(format!("content class '{s}'")))
    }
}

/// Parameters of one style deformation. All fields at their neutral values
/// (scales 1, lean 0, bounce 0) leave the motion untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub name: String,
    pub amplitude_scale: f64,
    pub lean_angle: f64,
    pub bounce_gain: f64,
    pub tempo_scale: f64,
    pub arm_swing_scale: f64,
}

impl StyleParams {
    pub fn neutral(name: &str) -> StyleParams {
        StyleParams {
            name: name.to_string(),
            amplitude_scale: 1.0,
            lean_angle: 0.0,
            bounce_gain: 0.0,
            tempo_scale: 1.0,
            arm_swing_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("style name must not be empty".into()));
        }
        let finite = self.amplitude_scale.is_finite()
            && self.lean_angle.is_finite()
            && self.bounce_gain.is_finite()
            && self.tempo_scale.is_finite()
            && self.arm_swing_scale.is_finite();
        if !finite {
            return Err(Error::Config(format!(
                "style '{}' has non-finite parameters",
                self.name
            )));
        }
        if !(self.amplitude_scale > 0.0) {
            return Err(Error::Config(format!(
                "style '{}': amplitude_scale must be positive",
                self.name
            )));
        }
        if !(0.5..=2.0).contains(&self.tempo_scale) {
            return Err(Error::Config(format!(
                "style '{}': tempo_scale must lie in [0.5, 2.0]",
                self.name
            )));
        }
        Ok(())
    }
}

/// Dataset generation settings, including the style parameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub contents: Vec<ContentClass>,
    pub styles: Vec<StyleParams>,
    pub clips_per_pair: usize,
    /// Inclusive clip-length range in frames.
    pub frame_range: (usize, usize),
    pub fps: f64,
    /// Standard deviation of optional per-coordinate position jitter.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            seed: 0,
            contents: ContentClass::all().to_vec(),
            styles: default_styles(),
            clips_per_pair: 2,
            frame_range: (32, 64),
            fps: 30.0,
            jitter: 0.0,
        }
    }
}

/// The six default styles. Values are deformation parameters, picked so the
/// styles stay well separated in simple position statistics.
pub fn default_styles() -> Vec<StyleParams> {
    let mk = |name: &str, amp: f64, lean: f64, bounce: f64, tempo: f64, arm: f64| StyleParams {
        name: name.to_string(),
        amplitude_scale: amp,
        lean_angle: lean,
        bounce_gain: bounce,
        tempo_scale: tempo,
        arm_swing_scale: arm,
    };
    vec![
        mk("neutral", 1.0, 0.0, 0.0, 1.0, 1.0),
        mk("proud", 1.15, -0.12, 0.25, 0.95, 1.35),
        mk("old", 0.70, 0.22, -0.50, 0.70, 0.55),
        mk("angry", 1.30, 0.10, 0.45, 1.25, 1.50),
        mk("sexy", 1.10, -0.05, 0.60, 0.85, 0.90),
        mk("sneaky", 0.80, 0.30, -0.35, 0.80, 0.70),
    ]
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contents.is_empty() {
            return Err(Error::Config("no content classes listed".into()));
        }
        if self.styles.is_empty() {
            return Err(Error::Config("no styles listed".into()));
        }
        for s in &self.styles {
            s.validate()?;
        }
        for (i, s) in self.styles.iter().enumerate() {
            if self.styles[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate style name '{}'", s.name)));
            }
        }
        for (i, c) in self.contents.iter().enumerate() {
            if self.contents[..i].contains(c) {
                return Err(Error::Config(format!("duplicate content class '{c}'")));
            }
        }
        if self.clips_per_pair == 0 {
            return Err(Error::Config("clips_per_pair must be at least 1".into()));
        }
        let (lo, hi) = self.frame_range;
        if lo < MIN_FRAMES || hi < lo {
            return Err(Error::Config(format!(
                "frame range [{lo}, {hi}] must satisfy {MIN_FRAMES} <= lo <= hi"
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps {} must be positive", self.fps)));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config(format!(
                "jitter {} must be non-negative",
                self.jitter
            )));
        }
        Ok(())
    }

    pub fn style(&self, name: &str) -> Result<&StyleParams> {
        self.styles
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownId(format!("style '{name}'")))
    }
}

// One sinusoid in a content bank: the joint's local rotation contribution is
// axis-angle(axis, dc + amp * sin(freq_mul * phase + phase_off)). Multiple
// entries for one joint compose left to right, outermost first.
struct JointWave {
    joint: &'static str,
    axis: Axis,
    dc: f64,
    amp: f64,
    freq_mul: f64,
    phase_off: f64,
}

struct ContentTable {
    freq_hz: f64,
    speed: f64,
    base_height: f64,
    root_dc: f64,
    bounce_amp: f64,
    bounce_freq_mul: f64,
    waves: &'static [JointWave],
}

const PI: f64 = std::f64::consts::PI;
const HALF_PI: f64 = std::f64::consts::FRAC_PI_2;

const fn wave(
    joint: &'static str,
    axis: Axis,
    dc: f64,
    amp: f64,
    freq_mul: f64,
    phase_off: f64,
) -> JointWave {
    JointWave {
        joint,
        axis,
        dc,
        amp,
        freq_mul,
        phase_off,
    }
}

static WALK_WAVES: &[JointWave] = &[
    wave("l_hip", Axis::X, 0.0, -0.45, 1.0, 0.0),
    wave("r_hip", Axis::X, 0.0, -0.45, 1.0, PI),
    wave("l_knee", Axis::X, 0.25, 0.25, 1.0, -HALF_PI),
    wave("r_knee", Axis::X, 0.25, 0.25, 1.0, HALF_PI),
    wave("l_ankle", Axis::X, -0.08, 0.12, 1.0, 0.0),
    wave("r_ankle", Axis::X, -0.08, 0.12, 1.0, PI),
    wave("l_shoulder", Axis::X, 0.0, -0.30, 1.0, PI),
    wave("l_shoulder", Axis::Z, -1.35, 0.0, 1.0, 0.0),
    wave("r_shoulder", Axis::X, 0.0, -0.30, 1.0, 0.0),
    wave("r_shoulder", Axis::Z, 1.35, 0.0, 1.0, 0.0),
    wave("l_elbow", Axis::Y, -0.40, -0.10, 1.0, PI),
    wave("r_elbow", Axis::Y, 0.40, 0.10, 1.0, 0.0),
    wave("spine2", Axis::Y, 0.0, 0.06, 1.0, 0.0),
    wave("chest", Axis::Y, 0.0, 0.05, 1.0, PI),
];

static RUN_WAVES: &[JointWave] = &[
    wave("l_hip", Axis::X, 0.0, -0.65, 1.0, 0.0),
    wave("r_hip", Axis::X, 0.0, -0.65, 1.0, PI),
    wave("l_knee", Axis::X, 0.50, 0.45, 1.0, -HALF_PI),
    wave("r_knee", Axis::X, 0.50, 0.45, 1.0, HALF_PI),
    wave("l_ankle", Axis::X, -0.10, 0.18, 1.0, 0.0),
    wave("r_ankle", Axis::X, -0.10, 0.18, 1.0, PI),
    wave("l_shoulder", Axis::X, 0.0, -0.45, 1.0, PI),
    wave("l_shoulder", Axis::Z, -1.30, 0.0, 1.0, 0.0),
    wave("r_shoulder", Axis::X, 0.0, -0.45, 1.0, 0.0),
    wave("r_shoulder", Axis::Z, 1.30, 0.0, 1.0, 0.0),
    wave("l_elbow", Axis::Y, -0.90, -0.15, 1.0, PI),
    wave("r_elbow", Axis::Y, 0.90, 0.15, 1.0, 0.0),
    wave("spine2", Axis::Y, 0.0, 0.08, 1.0, 0.0),
    wave("chest", Axis::Y, 0.0, 0.07, 1.0, PI),
];

static KICK_WAVES: &[JointWave] = &[
    wave("r_hip", Axis::X, -0.25, -0.85, 1.0, 0.0),
    wave("r_knee", Axis::X, 0.45, -0.40, 1.0, 0.0),
    wave("r_ankle", Axis::X, -0.05, 0.10, 1.0, 0.0),
    wave("l_hip", Axis::X, 0.03, 0.05, 1.0, 0.0),
    wave("l_knee", Axis::X, 0.12, 0.06, 1.0, 0.0),
    wave("l_shoulder", Axis::X, 0.0, -0.25, 1.0, 0.0),
    wave("l_shoulder", Axis::Z, -1.35, 0.0, 1.0, 0.0),
    wave("r_shoulder", Axis::X, 0.0, -0.25, 1.0, PI),
    wave("r_shoulder", Axis::Z, 1.35, 0.0, 1.0, 0.0),
    wave("l_elbow", Axis::Y, -0.45, -0.08, 1.0, 0.0),
    wave("r_elbow", Axis::Y, 0.45, 0.08, 1.0, PI),
    wave("spine2", Axis::Y, 0.0, 0.15, 1.0, 0.0),
    wave("chest", Axis::Y, 0.0, 0.10, 1.0, PI),
];

static JUMP_WAVES: &[JointWave] = &[
    wave("l_hip", Axis::X, -0.25, 0.25, 1.0, 0.0),
    wave("r_hip", Axis::X, -0.25, 0.25, 1.0, 0.0),
    wave("l_knee", Axis::X, 0.45, -0.45, 1.0, 0.0),
    wave("r_knee", Axis::X, 0.45, -0.45, 1.0, 0.0),
    wave("l_ankle", Axis::X, 0.10, -0.10, 1.0, 0.0),
    wave("r_ankle", Axis::X, 0.10, -0.10, 1.0, 0.0),
    wave("l_shoulder", Axis::X, 0.0, -0.45, 1.0, 0.0),
    wave("l_shoulder", Axis::Z, -1.35, 0.0, 1.0, 0.0),
    wave("r_shoulder", Axis::X, 0.0, -0.45, 1.0, 0.0),
    wave("r_shoulder", Axis::Z, 1.35, 0.0, 1.0, 0.0),
    wave("l_elbow", Axis::Y, -0.40, 0.0, 1.0, 0.0),
    wave("r_elbow", Axis::Y, 0.40, 0.0, 1.0, 0.0),
    wave("spine1", Axis::X, 0.10, -0.10, 1.0, 0.0),
];

fn content_table(class: ContentClass) -> ContentTable {
    match class {
        ContentClass::Walk => ContentTable {
            freq_hz: 1.0,
            speed: 1.2,
            base_height: 0.93,
            root_dc: 0.0,
            bounce_amp: 0.025,
            bounce_freq_mul: 2.0,
            waves: WALK_WAVES,
        },
        ContentClass::Run => ContentTable {
            freq_hz: 2.0,
            speed: 2.8,
            base_height: 0.90,
            root_dc: 0.0,
            bounce_amp: 0.05,
            bounce_freq_mul: 2.0,
            waves: RUN_WAVES,
        },
        ContentClass::Kick => ContentTable {
            freq_hz: 0.8,
            speed: 0.05,
            base_height: 0.90,
            root_dc: 0.0,
            bounce_amp: 0.015,
            bounce_freq_mul: 2.0,
            waves: KICK_WAVES,
        },
        ContentClass::Jump => ContentTable {
            freq_hz: 0.9,
            speed: 0.35,
            base_height: 0.93,
            root_dc: -0.10,
            bounce_amp: 0.22,
            bounce_freq_mul: 1.0,
            waves: JUMP_WAVES,
        },
    }
}

/// Synthesizes a periodic gait of class `class`. The seed drives a random
/// global phase and small frequency/amplitude jitter so clips of one class
/// differ; the same seed reproduces the clip exactly.
pub fn generate_content(
    skel: &Skeleton,
    class: ContentClass,
    n_frames: usize,
    fps: f64,
    seed: u64,
) -> Result<ContentRepr> {
    if n_frames < MIN_FRAMES {
        return Err(Error::Config(format!(
            "content clips need at least {MIN_FRAMES} frames, got {n_frames}"
        )));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Config(format!("fps {fps} must be positive")));
    }
    let table = content_table(class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0: f64 = rng.random_range(0.0..(2.0 * PI));
    let freq_jit: f64 = rng.random_range(0.9..1.1);
    let amp_jit: f64 = rng.random_range(0.9..1.1);

    let j = skel.joint_count();
    let mut quats = Mat::zeros(n_frames, 4 * j);
    let mut root = Mat::zeros(n_frames, 3);
    for f in 0..n_frames {
        let t = f as f64 / fps;
        let phase = 2.0 * PI * table.freq_hz * freq_jit * t + phase0;
        for jj in 0..j {
            quats.row_mut(f)[jj * 4] = 1.0;
        }
        for w in table.waves {
            let Some(jj) = skel.index_of(w.joint) else {
                continue;
            };
            let angle = w.dc + amp_jit * w.amp * (w.freq_mul * phase + w.phase_off).sin();
            let q = Quat::from_axis_angle(w.axis, angle);
            let row = quats.row_mut(f);
            let cur = Quat {
                w: row[jj * 4],
                x: row[jj * 4 + 1],
                y: row[jj * 4 + 2],
                z: row[jj * 4 + 3],
            };
            let next = cur.mul(q);
            row[jj * 4..jj * 4 + 4].copy_from_slice(&next.to_array());
        }
        let bounce = amp_jit * table.bounce_amp * (table.bounce_freq_mul * phase).sin();
        let r = root.row_mut(f);
        r[0] = 0.0;
        r[1] = table.base_height + table.root_dc + bounce;
        r[2] = table.speed * t;
    }
    ContentRepr::new(quats, root)
}

// Joints on a root-to-foot chain (legs). Everything else except the root is
// treated as upper body by the lean stage.
fn lower_body_mask(skel: &Skeleton) -> Vec<bool> {
    let mut lower = vec![false; skel.joint_count()];
    for &f in skel.foot_joints() {
        let mut j = Some(f);
        while let Some(jj) = j {
            lower[jj] = true;
            j = skel.parent(jj);
        }
    }
    lower[0] = true;
    lower
}

fn arm_mask(skel: &Skeleton) -> Vec<bool> {
    (0..skel.joint_count())
        .map(|j| {
            let n = skel.name(j).to_ascii_lowercase();
            ["shoulder", "elbow", "wrist", "hand", "arm"]
                .iter()
                .any(|k| n.contains(k))
        })
        .collect()
}

// Scales per-joint deviation from the temporal mean (relative to the hips)
// by `scale`, for the joints selected by `mask`.
fn scale_deviation(pos: &mut Mat, mask: &[bool], scale: f64) {
    let n = pos.rows();
    let j = mask.len();
    let mut mean = vec![0.0; 3 * j];
    for f in 0..n {
        let row = pos.row(f);
        let hips = [row[0], row[1], row[2]];
        for (jj, m) in mask.iter().enumerate() {
            if *m {
                for k in 0..3 {
                    mean[jj * 3 + k] += row[jj * 3 + k] - hips[k];
                }
            }
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    for f in 0..n {
        let row = pos.row_mut(f);
        let hips = [row[0], row[1], row[2]];
        for (jj, m) in mask.iter().enumerate() {
            if *m && jj != 0 {
                for k in 0..3 {
                    let rel = row[jj * 3 + k] - hips[k];
                    let centred = rel - mean[jj * 3 + k];
                    row[jj * 3 + k] = hips[k] + mean[jj * 3 + k] + scale * centred;
                }
            }
        }
    }
}

/// Deforms FK joint positions according to a style. Stages run in the order
/// tempo, amplitude, arm swing, lean, bounce; each is skipped outright at
/// its neutral parameter, so the neutral style is the exact identity. The
/// seed matters only when `jitter > 0`.
pub fn apply_style(
    skel: &Skeleton,
    content: &ContentRepr,
    params: &StyleParams,
    jitter: f64,
    seed: u64,
) -> Result<StyleRepr> {
    params.validate()?;
    let mut pos = forward_kinematics(content, skel)?;
    let n = pos.rows();
    let j = skel.joint_count();

    if params.tempo_scale != 1.0 {
        // Resample in time at the scaled rate, keeping the frame count. Reads
        // past the end reflect back into the clip (ping-pong) so a sped-up
        // motion never freezes on its last frame.
        let src = pos.clone();
        let last = (n - 1) as f64;
        for f in 0..n {
            let mut t = f as f64 * params.tempo_scale;
            let span = 2.0 * last;
            if span > 0.0 {
                t = t.rem_euclid(span);
                if t > last {
                    t = span - t;
                }
            } else {
                t = 0.0;
            }
            let f0 = (t.floor() as usize).min(n - 1);
            let f1 = (f0 + 1).min(n - 1);
            let frac = t - f0 as f64;
            let out = pos.row_mut(f);
            let (a, b) = (src.row(f0), src.row(f1));
            for k in 0..out.len() {
                out[k] = a[k] + frac * (b[k] - a[k]);
            }
        }
    }

    if params.amplitude_scale != 1.0 {
        let mask = vec![true; j];
        scale_deviation(&mut pos, &mask, params.amplitude_scale);
    }

    if params.arm_swing_scale != 1.0 {
        let mask = arm_mask(skel);
        scale_deviation(&mut pos, &mask, params.arm_swing_scale);
    }

    if params.lean_angle != 0.0 {
        // Rotate the upper body about the hips pivot, around the X axis:
        // positive angles tip the torso forward (+Z).
        let lower = lower_body_mask(skel);
        let (s, c) = params.lean_angle.sin_cos();
        for f in 0..n {
            let row = pos.row_mut(f);
            let hips = [row[0], row[1], row[2]];
            for jj in 1..j {
                if lower[jj] {
                    continue;
                }
                let y = row[jj * 3 + 1] - hips[1];
                let z = row[jj * 3 + 2] - hips[2];
                row[jj * 3 + 1] = hips[1] + c * y - s * z;
                row[jj * 3 + 2] = hips[2] + s * y + c * z;
            }
        }
    }

    if params.bounce_gain != 0.0 {
        // Amplify (or damp) the hips' own vertical oscillation, applied to
        // every joint so the body rides the bounce rigidly.
        let mut mean_y = 0.0;
        for f in 0..n {
            mean_y += pos.at(f, 1);
        }
        mean_y /= n as f64;
        for f in 0..n {
            let dev = pos.at(f, 1) - mean_y;
            let row = pos.row_mut(f);
            for jj in 0..j {
                row[jj * 3 + 1] += params.bounce_gain * dev;
            }
        }
    }

    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in pos.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += jitter * z;
        }
    }

    StyleRepr::new(pos)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-clip seed from the dataset seed and the clip's (content, style, index)
/// triple. Hashing names keeps seeds stable under table reordering.
pub fn clip_seed(seed: u64, content: ContentClass, style: &str, index: usize) -> u64 {
    let a = mix64(seed ^ fnv1a(content.name().as_bytes()));
    let b = mix64(a ^ fnv1a(style.as_bytes()));
    mix64(b ^ index as u64)
}

/// Stable hash of the full config, recorded in the manifest so downstream
/// artifacts can verify which settings produced a dataset.
pub fn config_hash(config: &SynthConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a(text.as_bytes()))
}

/// Generates the stratified dataset: `clips_per_pair` clips for every
/// (content, style) pair, each stored with both its content payload (neutral
/// rotations) and style payload (deformed positions). Returns the manifest,
/// which is also written to `out_dir/manifest.json`.
pub fn build_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let skel = Skeleton::default_humanoid();
    let mut triples = Vec::new();
    for &content in &config.contents {
        for style in &config.styles {
            for k in 0..config.clips_per_pair {
                triples.push((content, style.clone(), k));
            }
        }
    }
    let clips = par::try_run_indexed(triples.len(), |i| -> Result<MotionClip> {
        let (content_class, style, k) = &triples[i];
        let seed = clip_seed(config.seed, *content_class, &style.name, *k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = config.frame_range;
        let frames = rng.random_range(lo..=hi);
        let content = generate_content(&skel, *content_class, frames, config.fps, seed)?;
        let style_repr = apply_style(
            &skel,
            &content,
            style,
            config.jitter,
            mix64(seed ^ 0x5354594C),
        )?;
        Ok(MotionClip {
            skeleton: skel.clone(),
            fps: config.fps,
            content_label: content_class.name().to_string(),
            style_label: style.name.clone(),
            content: Some(content),
            style: Some(style_repr),
        })
    })?;

    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let rel = format!("clips/clip_{i:04}.json");
        io::save_clip(&out_dir.join(&rel), clip)?;
        entries.push(ManifestEntry {
            path: rel,
            content_label: clip.content_label.clone(),
            style_label: clip.style_label.clone(),
            frames: clip.frame_count(),
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        config_hash: config_hash(config),
        content_labels: config
            .contents
            .iter()
            .map(|c| c.name().to_string())
            .collect(),
        style_labels: config.styles.iter().map(|s| s.name.clone()).collect(),
        entries,
    };
    io::save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads every clip a manifest lists, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<MotionClip>> {
    let manifest = io::load_manifest(manifest_path)?;
    let mut clips = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        clips.push(io::load_clip(&io::entry_path(manifest_path, entry))?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skel() -> Skeleton {
        Skeleton::default_humanoid()
    }

    #[test]
    fn content_class_parses_and_prints() {
        for c in ContentClass::all() {
            assert_eq!(c.name().parse::<ContentClass>().unwrap(), c);
        }
        assert!("moonwalk".parse::<ContentClass>().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = skel();
        let a = generate_content(&s, ContentClass::Walk, 64, 30.0, 7).unwrap();
        let b = generate_content(&s, ContentClass::Walk, 64, 30.0, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_content(&s, ContentClass::Walk, 64, 30.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn short_clips_are_rejected() {
        let err = generate_content(&skel(), ContentClass::Walk, 8, 30.0, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn walk_advances_monotonically_forward() {
        let s = skel();
        for seed in 0..5 {
            let c = generate_content(&s, ContentClass::Walk, 64, 30.0, seed).unwrap();
            for f in 1..64 {
                assert!(
                    c.root_at(f)[2] > c.root_at(f - 1)[2],
                    "seed {seed} frame {f}"
                );
            }
        }
    }

    #[test]
    fn jump_lifts_both_feet_above_rest_height() {
        let s = skel();
        // Rest heights of the foot joints in the standing pose (root at the
        // jump generator's base height).
        let rest = ContentRepr::new(
            Mat::from_fn(
                1,
                4 * s.joint_count(),
                |_, c| if c % 4 == 0 { 1.0 } else { 0.0 },
            ),
            Mat::from_fn(1, 3, |_, c| if c == 1 { 0.93 } else { 0.0 }),
        )
        .unwrap();
        let rest_pos = forward_kinematics(&rest, &s).unwrap();

        for seed in 0..5 {
            let c = generate_content(&s, ContentClass::Jump, 64, 30.0, seed).unwrap();
            let pos = forward_kinematics(&c, &s).unwrap();
            let lifted = (0..64).any(|f| {
                s.foot_joints()
                    .iter()
                    .all(|&jf| pos.at(f, jf * 3 + 1) > rest_pos.at(0, jf * 3 + 1) + 0.05)
            });
            assert!(lifted, "seed {seed}: no airborne frame");
        }
    }

    #[test]
    fn neutral_style_is_exact_identity() {
        let s = skel();
        let content = generate_content(&s, ContentClass::Run, 48, 30.0, 3).unwrap();
        let styled = apply_style(&s, &content, &StyleParams::neutral("neutral"), 0.0, 123).unwrap();
        let plain = forward_kinematics(&content, &s).unwrap();
        assert_eq!(styled.positions, plain);
    }

    #[test]
    fn style_output_ignores_seed_without_jitter() {
        let s = skel();
        let content = generate_content(&s, ContentClass::Walk, 48, 30.0, 3).unwrap();
        let params = default_styles()
            .into_iter()
            .find(|p| p.name == "angry")
            .unwrap();
        let a = apply_style(&s, &content, &params, 0.0, 1).unwrap();
        let b = apply_style(&s, &content, &params, 0.0, 999).unwrap();
        assert_eq!(a, b);
        let j = apply_style(&s, &content, &params, 0.01, 1).unwrap();
        assert_ne!(a, j);
        let j2 = apply_style(&s, &content, &params, 0.01, 1).unwrap();
        assert_eq!(j, j2);
    }

    #[test]
    fn positive_lean_pushes_spine_forward() {
        let s = skel();
        let content = generate_content(&s, ContentClass::Walk, 48, 30.0, 5).unwrap();
        let mut leaning = StyleParams::neutral("leaning");
        leaning.lean_angle = 0.3;
        let styled = apply_style(&s, &content, &leaning, 0.0, 0).unwrap();
        let plain = forward_kinematics(&content, &s).unwrap();
        let spine: Vec<usize> = ["spine1", "spine2", "spine3", "chest", "neck", "head"]
            .iter()
            .map(|n| s.index_of(n).unwrap())
            .collect();
        let mean_z = |pos: &Mat| {
            let mut sum = 0.0;
            for f in 0..pos.rows() {
                for &jj in &spine {
                    sum += pos.at(f, jj * 3 + 2) - pos.at(f, 2);
                }
            }
            sum / (pos.rows() * spine.len()) as f64
        };
        assert!(mean_z(&styled.positions) > mean_z(&plain) + 1e-3);
    }

    #[test]
    fn bounce_gain_scales_hip_height_variance() {
        let s = skel();
        let content = generate_content(&s, ContentClass::Walk, 64, 30.0, 2).unwrap();
        let mut bouncy = StyleParams::neutral("bouncy");
        bouncy.bounce_gain = 1.0;
        let styled = apply_style(&s, &content, &bouncy, 0.0, 0).unwrap();
        let plain = forward_kinematics(&content, &s).unwrap();
        let var_y = |pos: &Mat| {
            let n = pos.rows();
            let mean: f64 = (0..n).map(|f| pos.at(f, 1)).sum::<f64>() / n as f64;
            (0..n).map(|f| (pos.at(f, 1) - mean).powi(2)).sum::<f64>() / n as f64
        };
        // Gain g multiplies the deviation by (1 + g), the variance by (1+g)^2.
        let ratio = var_y(&styled.positions) / var_y(&plain);
        assert!((ratio - 4.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn style_params_validation_catches_bad_values() {
        let mut p = StyleParams::neutral("x");
        p.tempo_scale = 2.5;
        assert!(p.validate().is_err());
        p.tempo_scale = 1.0;
        p.amplitude_scale = 0.0;
        assert!(p.validate().is_err());
        p.amplitude_scale = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn default_dataset_counts_and_frame_range() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig::default();
        let manifest = build_dataset(&config, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 48);
        for e in &manifest.entries {
            assert!((32..=64).contains(&e.frames), "frames {}", e.frames);
            assert!(dir.path().join(&e.path).is_file());
        }
        // Stratified: every (content, style) pair appears clips_per_pair times.
        for c in &manifest.content_labels {
            for st in &manifest.style_labels {
                let n = manifest
                    .entries
                    .iter()
                    .filter(|e| &e.content_label == c && &e.style_label == st)
                    .count();
                assert_eq!(n, 2, "{c}/{st}");
            }
        }
        let loaded = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.len(), 48);
        assert!(loaded
            .iter()
            .all(|c| c.content.is_some() && c.style.is_some()));
    }

    #[test]
    fn rebuilding_with_same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config = SynthConfig::default();
        config.clips_per_pair = 1;
        config.seed = 42;
        let ma = build_dataset(&config, dir_a.path()).unwrap();
        let mb = build_dataset(&config, dir_b.path()).unwrap();
        assert_eq!(ma, mb);
        for e in &ma.entries {
            let a = std::fs::read(dir_a.path().join(&e.path)).unwrap();
            let b = std::fs::read(dir_b.path().join(&e.path)).unwrap();
            assert_eq!(a, b, "{}", e.path);
        }
        let a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);

        config.seed = 43;
        let dir_c = tempfile::tempdir().unwrap();
        let mc = build_dataset(&config, dir_c.path()).unwrap();
        assert_ne!(ma.config_hash, mc.config_hash);
        assert_ne!(
            std::fs::read(dir_a.path().join(&ma.entries[0].path)).unwrap(),
            std::fs::read(dir_c.path().join(&mc.entries[0].path)).unwrap()
        );
    }

    #[test]
    fn config_validation_rejects_duplicates_and_bad_ranges() {
        let mut c = SynthConfig::default();
        c.styles.push(StyleParams::neutral("neutral"));
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.frame_range = (8, 64);
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.frame_range = (64, 32);
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.clips_per_pair = 0;
        assert!(c.validate().is_err());
    }
}
