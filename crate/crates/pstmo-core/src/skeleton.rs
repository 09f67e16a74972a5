//! Skeleton topology: joint tree, left/right pairing, root joint.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Joint topology of a skeleton.
///
/// `parent[root_index] == root_index`; every other joint points at its
/// parent and the parent graph is a tree. `lr_pairs` lists mirrored
/// (left, right) joints and drives horizontal flipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parent: Vec<usize>,
    pub root_index: usize,
    pub lr_pairs: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// The 17-joint layout used throughout: pelvis root, leg/arm chains and
    /// a spine-thorax-neck-head column.
    pub fn h36m_17() -> Skeleton {
        let names = [
            "hip",
            "r_hip",
            "r_knee",
            "r_ankle",
            "l_hip",
            "l_knee",
            "l_ankle",
            "spine",
            "thorax",
            "neck",
            "head",
            "l_shoulder",
            "l_elbow",
            "l_wrist",
            "r_shoulder",
            "r_elbow",
            "r_wrist",
        ];
        Skeleton {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            parent: vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15],
            root_index: 0,
            lr_pairs: vec![(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)],
        }
    }

    /// Tiny asymmetric skeleton for unit tests: root, one left arm, one
    /// right arm, head, plus a dangling joint off the left arm.
    pub fn toy(num_joints: usize) -> Skeleton {
        assert!(
            (2..=5).contains(&num_joints),
            "toy skeleton supports 2..=5 joints"
        );
        let names = ["root", "l_arm", "r_arm", "head", "l_hand"];
        let parent = [0usize, 0, 0, 0, 1];
        let lr_pairs = if num_joints >= 3 {
            vec![(1, 2)]
        } else {
            vec![]
        };
        Skeleton {
            joint_names: names[..num_joints].iter().map(|s| s.to_string()).collect(),
            parent: parent[..num_joints].to_vec(),
            root_index: 0,
            lr_pairs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.num_joints();
        ensure!(
            j >= 2,
            Validation,
            "skeleton needs at least 2 joints, got {j}"
        );
        ensure!(
            self.parent.len() == j,
            Validation,
            "parent list length {} != {j}",
            self.parent.len()
        );
        ensure!(
            self.root_index < j,
            Validation,
            "root index {} out of range",
            self.root_index
        );
        ensure!(
            self.parent[self.root_index] == self.root_index,
            Validation,
            "root joint must be its own parent"
        );
        for (i, &p) in self.parent.iter().enumerate() {
            ensure!(p < j, Validation, "joint {i} has parent {p} out of range");
        }
        // Tree check: every joint must reach the root without cycles.
        for start in 0..j {
            let mut cur = start;
            for _ in 0..=j {
                if cur == self.root_index {
                    break;
                }
                cur = self.parent[cur];
            }
            ensure!(
                cur == self.root_index,
                Validation,
                "joint {start} does not reach the root"
            );
        }
        let mut seen = vec![false; j];
        for &(l, r) in &self.lr_pairs {
            ensure!(l < j && r < j, Validation, "lr pair ({l},{r}) out of range");
            ensure!(
                l != r,
                Validation,
                "lr pair ({l},{r}) pairs a joint with itself"
            );
            ensure!(
                l != self.root_index && r != self.root_index,
                Validation,
                "lr pair ({l},{r}) contains the root"
            );
            ensure!(
                !seen[l] && !seen[r],
                Validation,
                "joint appears in two lr pairs"
            );
            seen[l] = true;
            seen[r] = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h36m_validates() {
        Skeleton::h36m_17().validate().unwrap();
        assert_eq!(Skeleton::h36m_17().num_joints(), 17);
    }

    #[test]
    fn bad_parent_rejected() {
        let mut s = Skeleton::toy(3);
        s.parent[1] = 7;
        assert!(s.validate().is_err());
    }

    #[test]
    fn cycle_rejected() {
        let mut s = Skeleton::toy(4);
        s.parent[1] = 3;
        s.parent[3] = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn lr_pair_with_root_rejected() {
        let mut s = Skeleton::toy(3);
        s.lr_pairs = vec![(0, 1)];
        assert!(s.validate().is_err());
    }
}
