//! Clip and manifest persistence plus format conversions.
//!
//! Clips are stored as version-tagged JSON: structured text that diffs well
//! and round-trips every 64-bit float bit-exactly (values are printed with
//! shortest-round-trip formatting). The schema structs below are decoupled
//! from the in-memory types so the file layout can evolve behind
//! `SCHEMA_VERSION`.

pub mod bvh;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::motion::{ContentRepr, MotionClip, StyleRepr};
use crate::quat::Quat;
use crate::skeleton::Skeleton;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SkeletonSchema {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<[f64; 3]>,
    foot_joints: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ContentSchema {
    quats: Vec<Vec<f64>>,
    root: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StyleSchema {
    positions: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ClipSchema {
    schema_version: u32,
    fps: f64,
    content_label: String,
    style_label: String,
    skeleton: SkeletonSchema,
    content: Option<ContentSchema>,
    style: Option<StyleSchema>,
}

/// One clip file in a dataset, with the labels duplicated so tooling can
/// filter without opening the clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub content_label: String,
    pub style_label: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub content_labels: Vec<String>,
    pub style_labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn rows_to_mat(rows: &[Vec<f64>], path: &Path, what: &str) -> Result<Mat> {
    Mat::from_rows(rows)
        .map_err(|_| Error::malformed(path.display().to_string(), format!("ragged {what} rows")))
}

fn skeleton_to_schema(s: &Skeleton) -> SkeletonSchema {
    SkeletonSchema {
        names: s.names().to_vec(),
        parents: s.parents().to_vec(),
        rest_offsets: s.rest_offsets().to_vec(),
        foot_joints: s.foot_joints().to_vec(),
    }
}

/// Validates and writes a clip. The clip must pass [`MotionClip::validate`];
/// in particular all values must be finite (JSON has no NaN encoding).
pub fn save_clip(path: &Path, clip: &MotionClip) -> Result<()> {
    clip.validate()?;
    let schema = ClipSchema {
        schema_version: SCHEMA_VERSION,
        fps: clip.fps,
        content_label: clip.content_label.clone(),
        style_label: clip.style_label.clone(),
        skeleton: skeleton_to_schema(&clip.skeleton),
        content: clip.content.as_ref().map(|c| ContentSchema {
            quats: mat_to_rows(&c.quats),
            root: mat_to_rows(&c.root),
        }),
        style: clip.style.as_ref().map(|s| StyleSchema {
            positions: mat_to_rows(&s.positions),
        }),
    };
    let text = serde_json::to_string_pretty(&schema)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<MotionClip> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    let schema: ClipSchema = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    if schema.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: schema.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let skeleton = Skeleton::new(
        schema.skeleton.names,
        schema.skeleton.parents,
        schema.skeleton.rest_offsets,
        schema.skeleton.foot_joints,
    )?;
    let content = match &schema.content {
        Some(c) => Some(ContentRepr::new(
            rows_to_mat(&c.quats, path, "quaternion")?,
            rows_to_mat(&c.root, path, "root")?,
        )?),
        None => None,
    };
    let style = match &schema.style {
        Some(s) => Some(StyleRepr::new(rows_to_mat(
            &s.positions,
            path,
            "position",
        )?)?),
        None => None,
    };
    let clip = MotionClip {
        skeleton,
        fps: schema.fps,
        content_label: schema.content_label,
        style_label: schema.style_label,
        content,
        style,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(manifest)
}

/// Resolves a manifest entry path relative to the manifest's directory.
pub fn entry_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&entry.path)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RetimeMode {
    /// Keep every k-th frame; requires the fps ratio to be an integer.
    Decimate,
    /// Resample with quaternion slerp / position lerp at the new frame grid.
    Interpolate,
}

/// Changes a clip's frame rate. Decimation with ratio 1 is the identity.
pub fn retime(clip: &MotionClip, target_fps: f64, mode: RetimeMode) -> Result<MotionClip> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(Error::Config(format!(
            "target fps {target_fps} must be positive"
        )));
    }
    let n = clip.frame_count();
    if n == 0 {
        return Err(Error::Dimension("cannot retime an empty clip".into()));
    }
    let ratio = clip.fps / target_fps;
    let mut out = clip.clone();
    out.fps = target_fps;
    match mode {
        RetimeMode::Decimate => {
            let k = ratio.round();
            if (ratio - k).abs() > 1e-9 || k < 1.0 {
                return Err(Error::Config(format!(
                    "decimation needs an integer fps ratio, got {} / {}",
                    clip.fps, target_fps
                )));
            }
            let k = k as usize;
            let frames: Vec<usize> = (0..n).step_by(k).collect();
            if let Some(c) = &clip.content {
                out.content = Some(ContentRepr::new(
                    take_rows(&c.quats, &frames),
                    take_rows(&c.root, &frames),
                )?);
            }
            if let Some(s) = &clip.style {
                out.style = Some(StyleRepr::new(take_rows(&s.positions, &frames))?);
            }
        }
        RetimeMode::Interpolate => {
            let count = ((n - 1) as f64 / ratio).floor() as usize + 1;
            let sample_times: Vec<f64> = (0..count).map(|i| i as f64 * ratio).collect();
            if let Some(c) = &clip.content {
                let j = c.joints();
                let mut quats = Mat::zeros(count, 4 * j);
                let mut root = Mat::zeros(count, 3);
                for (i, &t) in sample_times.iter().enumerate() {
                    let (f0, frac) = split_time(t, n);
                    let f1 = (f0 + 1).min(n - 1);
                    for jj in 0..j {
                        let q = if frac == 0.0 {
                            c.quat(f0, jj)
                        } else {
                            c.quat(f0, jj).slerp(c.quat(f1, jj), frac)?
                        };
                        quats.row_mut(i)[jj * 4..jj * 4 + 4].copy_from_slice(&q.to_array());
                    }
                    lerp_row(c.root.row(f0), c.root.row(f1), frac, root.row_mut(i));
                }
                out.content = Some(ContentRepr::new(quats, root)?);
            }
            if let Some(s) = &clip.style {
                let mut positions = Mat::zeros(count, s.positions.cols());
                for (i, &t) in sample_times.iter().enumerate() {
                    let (f0, frac) = split_time(t, n);
                    let f1 = (f0 + 1).min(n - 1);
                    lerp_row(
                        s.positions.row(f0),
                        s.positions.row(f1),
                        frac,
                        positions.row_mut(i),
                    );
                }
                out.style = Some(StyleRepr::new(positions)?);
            }
        }
    }
    Ok(out)
}

fn take_rows(m: &Mat, frames: &[usize]) -> Mat {
    let mut out = Mat::zeros(frames.len(), m.cols());
    for (i, &f) in frames.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(f));
    }
    out
}

fn split_time(t: f64, n: usize) -> (usize, f64) {
    let f0 = (t.floor() as usize).min(n - 1);
    (f0, t - f0 as f64)
}

fn lerp_row(a: &[f64], b: &[f64], frac: f64, out: &mut [f64]) {
    if frac == 0.0 {
        out.copy_from_slice(a);
    } else {
        for i in 0..a.len() {
            out[i] = a[i] + frac * (b[i] - a[i]);
        }
    }
}

/// Writes per-frame joint positions as CSV (`frame,joint,name,x,y,z`);
/// the companion output format next to transferred clips.
pub fn write_positions_csv(path: &Path, positions: &Mat, skel: &Skeleton) -> Result<()> {
    let mut text = String::from("frame,joint,name,x,y,z\n");
    for f in 0..positions.rows() {
        for j in 0..skel.joint_count() {
            let row = positions.row(f);
            text.push_str(&format!(
                "{f},{j},{},{},{},{}\n",
                skel.name(j),
                row[j * 3],
                row[j * 3 + 1],
                row[j * 3 + 2]
            ));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Remaps a parsed skeleton and motion onto a kept subset of joints.
///
/// `keep` lists (source joint name, new joint name) pairs; the subset must
/// contain the root. Each kept joint's parent becomes its nearest kept
/// ancestor, rest offsets accumulate through dropped intermediates, and the
/// dropped intermediates' local rotations fold into the kept child. Folding
/// keeps orientations exact; positions are exact whenever dropped joints
/// hold identity rotation (the intended use: static rig filler joints).
pub fn apply_joint_map(
    skel: &Skeleton,
    content: &ContentRepr,
    keep: &[(String, String)],
) -> Result<(Skeleton, ContentRepr)> {
    let mut source_index = Vec::with_capacity(keep.len());
    for (src, _) in keep {
        let idx = skel
            .index_of(src)
            .ok_or_else(|| Error::UnknownId(format!("joint map source '{src}'")))?;
        source_index.push(idx);
    }
    let mut kept_sorted: Vec<usize> = source_index.clone();
    kept_sorted.sort_unstable();
    kept_sorted.dedup();
    if kept_sorted.len() != keep.len() {
        return Err(Error::Config("joint map lists a source joint twice".into()));
    }
    if kept_sorted[0] != 0 {
        return Err(Error::Config("joint map must keep the root joint".into()));
    }

    // New joints in source topological order so parents stay before children.
    let order: Vec<usize> = kept_sorted;
    let new_index_of = |src: usize| order.iter().position(|&s| s == src);
    let mut names = Vec::with_capacity(order.len());
    let mut parents = Vec::with_capacity(order.len());
    let mut offsets = Vec::with_capacity(order.len());
    let mut dropped_chain: Vec<Vec<usize>> = Vec::with_capacity(order.len());
    for &src in &order {
        let pos = source_index.iter().position(|&s| s == src).unwrap();
        names.push(keep[pos].1.clone());
        let mut chain = Vec::new();
        let mut p = skel.parent(src);
        while let Some(pj) = p {
            if let Some(np) = new_index_of(pj) {
                parents.push(Some(np));
                break;
            }
            chain.push(pj);
            p = skel.parent(pj);
        }
        if p.is_none() {
            parents.push(None);
        }
        chain.reverse();
        let mut off = skel.rest_offset(src);
        for &d in &chain {
            let o = skel.rest_offset(d);
            off = [off[0] + o[0], off[1] + o[1], off[2] + o[2]];
        }
        offsets.push(off);
        dropped_chain.push(chain);
    }
    let foot = skel
        .foot_joints()
        .iter()
        .filter_map(|&f| new_index_of(f))
        .collect();
    let new_skel = Skeleton::new(names, parents, offsets, foot)?;

    let n = content.frames();
    let mut quats = Mat::zeros(n, 4 * order.len());
    for f in 0..n {
        for (nj, &src) in order.iter().enumerate() {
            let mut q = Quat::IDENTITY;
            for &d in &dropped_chain[nj] {
                q = q.mul(content.quat(f, d));
            }
            q = q.mul(content.quat(f, src));
            quats.row_mut(f)[nj * 4..nj * 4 + 4].copy_from_slice(&q.to_array());
        }
    }
    let new_content = ContentRepr::new(quats, content.root.clone())?;
    Ok((new_skel, new_content))
}
