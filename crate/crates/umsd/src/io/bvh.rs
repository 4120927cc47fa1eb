//! Minimal BVH reader: HIERARCHY with nested JOINT blocks, End Sites, and a
//! MOTION section. Rotations are converted from degrees in channel order;
//! supported rotation orders are ZYX, ZXY and XYZ. End Sites are not joints
//! and are skipped. Foot joints are detected from joint names.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::motion::ContentRepr;
use crate::quat::{EulerOrder, Quat};
use crate::skeleton::Skeleton;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Channel {
    Xpos,
    Ypos,
    Zpos,
    Xrot,
    Yrot,
    Zrot,
}

struct JointInfo {
    name: String,
    parent: Option<usize>,
    offset: [f64; 3],
    channels: Vec<Channel>,
}

struct Tokens<'a> {
    items: Vec<&'a str>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Tokens {
            items: text.split_whitespace().collect(),
            pos: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.items.get(self.pos).copied();
        self.pos += 1;
        t.ok_or_else(|| malformed("unexpected end of file"))
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).copied()
    }

    fn expect(&mut self, token: &str) -> Result<()> {
        let t = self.next()?;
        if t.eq_ignore_ascii_case(token) {
            Ok(())
        } else {
            Err(malformed(format!("expected '{token}', found '{t}'")))
        }
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| malformed(format!("expected a number, found '{t}'")))
    }

    fn integer(&mut self) -> Result<usize> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| malformed(format!("expected an integer, found '{t}'")))
    }
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::malformed("<bvh>", reason)
}

/// Parses BVH text into a skeleton and per-frame content representation.
/// The declared frame count must match the motion rows present.
pub fn parse_bvh(text: &str) -> Result<(Skeleton, ContentRepr, f64)> {
    let mut tk = Tokens::new(text);
    tk.expect("HIERARCHY")?;
    tk.expect("ROOT")?;
    let mut joints: Vec<JointInfo> = Vec::new();
    parse_joint(&mut tk, None, &mut joints)?;

    tk.expect("MOTION")?;
    tk.expect("Frames:")?;
    let frames = tk.integer()?;
    let ft = tk.next()?;
    if !ft.eq_ignore_ascii_case("Frame") {
        return Err(malformed(format!("expected 'Frame Time:', found '{ft}'")));
    }
    tk.expect("Time:")?;
    let frame_time = tk.number()?;
    if !(frame_time.is_finite() && frame_time > 0.0) {
        return Err(malformed(format!("bad frame time {frame_time}")));
    }
    let fps = 1.0 / frame_time;
    if frames == 0 {
        return Err(malformed("zero frames"));
    }

    let per_frame: usize = joints.iter().map(|j| j.channels.len()).sum();
    let mut values = Vec::with_capacity(frames * per_frame);
    for _ in 0..frames * per_frame {
        match tk.peek() {
            Some(_) => values.push(tk.number()?),
            None => {
                return Err(malformed(format!(
                    "motion section ended early: expected {} values, found {}",
                    frames * per_frame,
                    values.len()
                )))
            }
        }
    }
    if tk.peek().is_some() {
        return Err(malformed(format!(
            "trailing motion data: expected exactly {} values",
            frames * per_frame
        )));
    }

    let names: Vec<String> = joints.iter().map(|j| j.name.clone()).collect();
    let parents: Vec<Option<usize>> = joints.iter().map(|j| j.parent).collect();
    let offsets: Vec<[f64; 3]> = joints.iter().map(|j| j.offset).collect();
    let feet = names
        .iter()
        .enumerate()
        .filter(|(_, n)| {
            let l = n.to_ascii_lowercase();
            l.contains("toe") || l.contains("ankle") || l.contains("foot")
        })
        .map(|(i, _)| i)
        .collect();
    let skel = Skeleton::new(names, parents, offsets, feet)?;

    let j = joints.len();
    let mut quats = Mat::zeros(frames, 4 * j);
    let mut root = Mat::zeros(frames, 3);
    for f in 0..frames {
        let mut at = f * per_frame;
        for (jj, joint) in joints.iter().enumerate() {
            let vals = &values[at..at + joint.channels.len()];
            at += joint.channels.len();
            let mut pos = [0.0; 3];
            let mut rot_axes = Vec::with_capacity(3);
            let mut rot_vals = Vec::with_capacity(3);
            for (ch, &v) in joint.channels.iter().zip(vals) {
                match ch {
                    Channel::Xpos => pos[0] = v,
                    Channel::Ypos => pos[1] = v,
                    Channel::Zpos => pos[2] = v,
                    Channel::Xrot | Channel::Yrot | Channel::Zrot => {
                        rot_axes.push(*ch);
                        rot_vals.push(v.to_radians());
                    }
                }
            }
            let q = match rot_axes.len() {
                0 => Quat::IDENTITY,
                3 => {
                    let order = rotation_order(&rot_axes)?;
                    Quat::from_euler(order, [rot_vals[0], rot_vals[1], rot_vals[2]])
                }
                n => {
                    return Err(malformed(format!(
                        "joint {} has {n} rotation channels",
                        joint.name
                    )))
                }
            };
            quats.row_mut(f)[jj * 4..jj * 4 + 4].copy_from_slice(&q.to_array());
            if jj == 0 {
                root.row_mut(f).copy_from_slice(&pos);
            }
        }
    }
    let content = ContentRepr::new(quats, root)?;
    Ok((skel, content, fps))
}

fn rotation_order(axes: &[Channel]) -> Result<EulerOrder> {
    match axes {
        [Channel::Zrot, Channel::Yrot, Channel::Xrot] => Ok(EulerOrder::Zyx),
        [Channel::Zrot, Channel::Xrot, Channel::Yrot] => Ok(EulerOrder::Zxy),
        [Channel::Xrot, Channel::Yrot, Channel::Zrot] => Ok(EulerOrder::Xyz),
        other => Err(malformed(format!("unsupported rotation order {other:?}"))),
    }
}

fn parse_joint(tk: &mut Tokens, parent: Option<usize>, joints: &mut Vec<JointInfo>) -> Result<()> {
    let name = tk.next()?.to_string();
    tk.expect("{")?;
    tk.expect("OFFSET")?;
    let offset = [tk.number()?, tk.number()?, tk.number()?];
    tk.expect("CHANNELS")?;
    let n = tk.integer()?;
    let mut channels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = tk.next()?;
        channels.push(match c.to_ascii_lowercase().as_str() {
            "xposition" => Channel::Xpos,
            "yposition" => Channel::Ypos,
            "zposition" => Channel::Zpos,
            "xrotation" => Channel::Xrot,
            "yrotation" => Channel::Yrot,
            "zrotation" => Channel::Zrot,
            other => return Err(malformed(format!("unknown channel '{other}'"))),
        });
    }
    let index = joints.len();
    joints.push(JointInfo {
        name,
        parent,
        offset,
        channels,
    });

    loop {
        let t = tk.next()?;
        if t == "}" {
            return Ok(());
        } else if t.eq_ignore_ascii_case("JOINT") {
            parse_joint(tk, Some(index), joints)?;
        } else if t.eq_ignore_ascii_case("End") {
            tk.expect("Site")?;
            tk.expect("{")?;
            tk.expect("OFFSET")?;
            let _ = [tk.number()?, tk.number()?, tk.number()?];
            tk.expect("}")?;
        } else {
            return Err(malformed(format!("unexpected token '{t}' in joint block")));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::forward_kinematics;

    const TWO_JOINT: &str = "\
HIERARCHY
ROOT hips
{
    OFFSET 0.0 0.0 0.0
    CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
    JOINT knee
    {
        OFFSET 0.0 -1.0 0.0
        CHANNELS 3 Zrotation Xrotation Yrotation
        End Site
        {
            OFFSET 0.0 -1.0 0.0
        }
    }
}
MOTION
Frames: 2
Frame Time: 0.0333333
0.0 1.0 0.0 0.0 0.0 0.0 0.0 0.0 0.0
0.5 1.0 0.0 0.0 0.0 0.0 90.0 0.0 0.0
";

    #[test]
    fn parses_hierarchy_and_identity_rotations() {
        let (skel, content, fps) = parse_bvh(TWO_JOINT).unwrap();
        assert_eq!(skel.joint_count(), 2);
        assert_eq!(skel.name(0), "hips");
        assert_eq!(skel.parent(1), Some(0));
        assert_eq!(skel.rest_offset(1), [0.0, -1.0, 0.0]);
        assert!((fps - 30.0).abs() < 1e-3);
        // Frame 0: zero rotations give identity quaternions.
        assert_eq!(content.quat(0, 0), Quat::IDENTITY);
        assert_eq!(content.quat(0, 1), Quat::IDENTITY);
        assert_eq!(content.root_at(0), [0.0, 1.0, 0.0]);
        assert_eq!(content.root_at(1), [0.5, 1.0, 0.0]);
    }

    #[test]
    fn ninety_degree_z_becomes_expected_quaternion() {
        let (_, content, _) = parse_bvh(TWO_JOINT).unwrap();
        let q = content.quat(1, 1);
        let half = std::f64::consts::FRAC_PI_4;
        assert!((q.w - half.cos()).abs() < 1e-12);
        assert!((q.z - half.sin()).abs() < 1e-12);
        assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12);
    }

    const THREE_JOINT: &str = "\
HIERARCHY
ROOT hips
{
    OFFSET 0.0 0.0 0.0
    CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
    JOINT knee
    {
        OFFSET 0.0 -0.4 0.0
        CHANNELS 3 Zrotation Xrotation Yrotation
        JOINT ankle
        {
            OFFSET 0.0 -0.5 0.0
            CHANNELS 3 Zrotation Xrotation Yrotation
            End Site
            {
                OFFSET 0.0 -0.1 0.1
            }
        }
    }
}
MOTION
Frames: 1
Frame Time: 0.01
0.2 0.9 -0.1 30.0 -20.0 45.0 10.0 70.0 -5.0 -40.0 15.0 25.0
";

    fn rot_z(a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    fn rot_x(a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }

    fn rot_y(a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    }

    fn mat_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn mat_apply(m: [[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            for k in 0..3 {
                out[i] += m[i][k] * v[k];
            }
        }
        out
    }

    #[test]
    fn fk_of_parsed_motion_matches_euler_matrix_oracle() {
        // Oracle: build rotation matrices straight from the Euler angles in
        // the file (ZXY channel order = Rz * Rx * Ry) and compose transforms
        // down the chain without touching any quaternion code.
        let (skel, content, _) = parse_bvh(THREE_JOINT).unwrap();
        let pos = forward_kinematics(&content, &skel).unwrap();

        let d = |x: f64| x.to_radians();
        let locals = [
            mat_mul(mat_mul(rot_z(d(30.0)), rot_x(d(-20.0))), rot_y(d(45.0))),
            mat_mul(mat_mul(rot_z(d(10.0)), rot_x(d(70.0))), rot_y(d(-5.0))),
            mat_mul(mat_mul(rot_z(d(-40.0)), rot_x(d(15.0))), rot_y(d(25.0))),
        ];
        let offsets = [[0.0, 0.0, 0.0], [0.0, -0.4, 0.0], [0.0, -0.5, 0.0]];
        let mut global = locals[0];
        let mut p = [0.2, 0.9, -0.1];
        let mut expected = vec![p];
        for j in 1..3 {
            let step = mat_apply(global, offsets[j]);
            p = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            expected.push(p);
            global = mat_mul(global, locals[j]);
        }
        for j in 0..3 {
            for k in 0..3 {
                assert!(
                    (pos.at(0, j * 3 + k) - expected[j][k]).abs() < 1e-12,
                    "joint {j} axis {k}: {} vs {}",
                    pos.at(0, j * 3 + k),
                    expected[j][k]
                );
            }
        }
    }

    #[test]
    fn frame_count_mismatch_is_rejected() {
        let truncated = TWO_JOINT
            .rsplit_once('\n')
            .unwrap()
            .0
            .rsplit_once('\n')
            .unwrap()
            .0;
        let err = parse_bvh(truncated).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
        let extra = format!("{TWO_JOINT}0.0\n");
        let err = parse_bvh(&extra).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
    }

    #[test]
    fn unsupported_rotation_order_is_rejected() {
        let text = TWO_JOINT.replace(
            "CHANNELS 3 Zrotation Xrotation Yrotation",
            "CHANNELS 3 Yrotation Xrotation Zrotation",
        );
        let err = parse_bvh(&text).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
    }
}
