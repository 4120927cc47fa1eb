//! Skeletal hierarchy: joint names, parents in topological order, rest
//! offsets (bone vectors in the parent frame), and which joints count as
//! feet for contact detection.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<[f64; 3]>,
    foot_joints: Vec<usize>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<[f64; 3]>,
        foot_joints: Vec<usize>,
    ) -> Result<Self> {
        let skel = Skeleton {
            names,
            parents,
            rest_offsets,
            foot_joints,
        };
        skel.validate()?;
        Ok(skel)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if self.parents.len() != n || self.rest_offsets.len() != n {
            return Err(Error::Dimension("skeleton field lengths disagree".into()));
        }
        if n == 0 {
            return Err(Error::Dimension("empty skeleton".into()));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || self.parents[0].is_some() {
            return Err(Error::Dimension(format!(
                "expected exactly one root at index 0, found {roots} root(s)"
            )));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::Dimension(format!(
                        "joint {j} must have a parent with a smaller index"
                    )))
                }
            }
            let off = self.rest_offsets[j];
            let len2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
            if len2 <= 0.0 {
                return Err(Error::DegeneratePose(format!(
                    "joint {j} ({}) has a zero-length rest offset",
                    self.names[j]
                )));
            }
        }
        for &f in &self.foot_joints {
            if f >= n {
                return Err(Error::Dimension(format!(
                    "foot joint index {f} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offset(&self, j: usize) -> [f64; 3] {
        self.rest_offsets[j]
    }

    pub fn rest_offsets(&self) -> &[[f64; 3]] {
        &self.rest_offsets
    }

    pub fn foot_joints(&self) -> &[usize] {
        &self.foot_joints
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The 21-joint humanoid used by the synthetic dataset. Axes: Y up,
    /// Z forward, X to the character's left. Offsets are metres.
    pub fn default_humanoid() -> Skeleton {
        let spec: &[(&str, Option<usize>, [f64; 3])] = &[
            ("hips", None, [0.0, 0.0, 0.0]),
            ("spine1", Some(0), [0.0, 0.12, 0.0]),
            ("spine2", Some(1), [0.0, 0.12, 0.0]),
            ("spine3", Some(2), [0.0, 0.12, 0.0]),
            ("chest", Some(3), [0.0, 0.10, 0.0]),
            ("neck", Some(4), [0.0, 0.08, 0.0]),
            ("head", Some(5), [0.0, 0.10, 0.0]),
            ("l_shoulder", Some(4), [0.18, 0.02, 0.0]),
            ("l_elbow", Some(7), [0.28, 0.0, 0.0]),
            ("l_wrist", Some(8), [0.26, 0.0, 0.0]),
            ("r_shoulder", Some(4), [-0.18, 0.02, 0.0]),
            ("r_elbow", Some(10), [-0.28, 0.0, 0.0]),
            ("r_wrist", Some(11), [-0.26, 0.0, 0.0]),
            ("l_hip", Some(0), [0.10, -0.05, 0.0]),
            ("l_knee", Some(13), [0.0, -0.42, 0.0]),
            ("l_ankle", Some(14), [0.0, -0.40, 0.0]),
            ("l_toe", Some(15), [0.0, -0.06, 0.14]),
            ("r_hip", Some(0), [-0.10, -0.05, 0.0]),
            ("r_knee", Some(17), [0.0, -0.42, 0.0]),
            ("r_ankle", Some(18), [0.0, -0.40, 0.0]),
            ("r_toe", Some(19), [0.0, -0.06, 0.14]),
        ];
        let names = spec.iter().map(|(n, _, _)| n.to_string()).collect();
        let parents = spec.iter().map(|(_, p, _)| *p).collect();
        let offsets = spec.iter().map(|(_, _, o)| *o).collect();
        let ankles_and_toes = vec![15, 16, 19, 20];
        Skeleton::new(names, parents, offsets, ankles_and_toes).expect("builtin skeleton")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_humanoid_is_valid_with_21_joints() {
        let s = Skeleton::default_humanoid();
        assert_eq!(s.joint_count(), 21);
        assert_eq!(s.foot_joints(), &[15, 16, 19, 20]);
        for &f in s.foot_joints() {
            assert!(s.name(f).contains("ankle") || s.name(f).contains("toe"));
        }
    }

    #[test]
    fn rejects_forward_parent_reference() {
        let err = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![None, Some(5)],
            vec![[0.0; 3], [0.0, 1.0, 0.0]],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn rejects_zero_length_bone() {
        let err = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![None, Some(0)],
            vec![[0.0; 3], [0.0; 3]],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegeneratePose(_)));
    }

    #[test]
    fn rejects_two_roots() {
        let err = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![None, None],
            vec![[0.0; 3], [0.0, 1.0, 0.0]],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
