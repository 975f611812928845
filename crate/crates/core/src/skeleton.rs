//! Joint vocabulary, kinematic topology, pose containers, and the
//! pose-structure loss terms (limb cosine similarity and limb length).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 16 tracked joints. This enumeration order is the canonical index map
/// for every serialized artifact (checkpoints, dataset records, reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointId {
    Neck,
    Head,
    LeftArm,
    RightArm,
    LeftElbow,
    RightElbow,
    LeftHand,
    RightHand,
    LeftLeg,
    RightLeg,
    LeftKnee,
    RightKnee,
    LeftFoot,
    RightFoot,
    LeftToe,
    RightToe,
}

pub const NUM_JOINTS: usize = 16;
/// The 2D joint set excludes the head (it sits behind the camera).
pub const NUM_JOINTS_2D: usize = 15;

impl JointId {
    pub const ALL: [JointId; NUM_JOINTS] = [
        JointId::Neck,
        JointId::Head,
        JointId::LeftArm,
        JointId::RightArm,
        JointId::LeftElbow,
        JointId::RightElbow,
        JointId::LeftHand,
        JointId::RightHand,
        JointId::LeftLeg,
        JointId::RightLeg,
        JointId::LeftKnee,
        JointId::RightKnee,
        JointId::LeftFoot,
        JointId::RightFoot,
        JointId::LeftToe,
        JointId::RightToe,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&j| j == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::Neck => "Neck",
            JointId::Head => "Head",
            JointId::LeftArm => "LeftArm",
            JointId::RightArm => "RightArm",
            JointId::LeftElbow => "LeftElbow",
            JointId::RightElbow => "RightElbow",
            JointId::LeftHand => "LeftHand",
            JointId::RightHand => "RightHand",
            JointId::LeftLeg => "LeftLeg",
            JointId::RightLeg => "RightLeg",
            JointId::LeftKnee => "LeftKnee",
            JointId::RightKnee => "RightKnee",
            JointId::LeftFoot => "LeftFoot",
            JointId::RightFoot => "RightFoot",
            JointId::LeftToe => "LeftToe",
            JointId::RightToe => "RightToe",
        }
    }

    /// 2D joints in canonical order: the 3D order with Head removed.
    pub fn planar() -> impl Iterator<Item = JointId> {
        Self::ALL.iter().copied().filter(|&j| j != JointId::Head)
    }
}

/// 16 joints x (x, y, z) in millimeters, egocentric camera frame with the
/// origin at the camera optical center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub positions: [[f64; 3]; NUM_JOINTS],
}

impl Pose3D {
    pub fn new(positions: [[f64; 3]; NUM_JOINTS]) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("pose contains non-finite coordinates".into()));
        }
        Ok(Pose3D { positions })
    }

    pub fn zeros() -> Self {
        Pose3D {
            positions: [[0.0; 3]; NUM_JOINTS],
        }
    }

    pub fn joint(&self, j: JointId) -> [f64; 3] {
        self.positions[j.index()]
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        let mut p = *self;
        for pos in &mut p.positions {
            pos[0] += d[0];
            pos[1] += d[1];
            pos[2] += d[2];
        }
        p
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut p = *self;
        for pos in &mut p.positions {
            pos[0] *= s;
            pos[1] *= s;
            pos[2] *= s;
        }
        p
    }

    /// Coordinates relative to the neck joint (root-relative toggle).
    pub fn root_relative(&self) -> Self {
        let root = self.positions[JointId::Neck.index()];
        self.translated([-root[0], -root[1], -root[2]])
    }

    /// Flatten to 48 values in canonical joint order.
    pub fn flat(&self) -> [f64; NUM_JOINTS * 3] {
        let mut out = [0.0; NUM_JOINTS * 3];
        for (j, pos) in self.positions.iter().enumerate() {
            out[j * 3..j * 3 + 3].copy_from_slice(pos);
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != NUM_JOINTS * 3 {
            return Err(Error::ShapeMismatch(format!(
                "pose wants {} values, got {}",
                NUM_JOINTS * 3,
                values.len()
            )));
        }
        let mut positions = [[0.0; 3]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            positions[j].copy_from_slice(&values[j * 3..j * 3 + 3]);
        }
        Pose3D::new(positions)
    }
}

/// 15 joints x (u, v) pixels in the 368x368 image plane, with per-joint
/// visibility. Invisible joints may carry out-of-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub positions: [[f64; 2]; NUM_JOINTS_2D],
    pub visible: [bool; NUM_JOINTS_2D],
}

impl Pose2D {
    pub fn new(positions: [[f64; 2]; NUM_JOINTS_2D], visible: [bool; NUM_JOINTS_2D]) -> Self {
        Pose2D { positions, visible }
    }

    pub fn zeros() -> Self {
        Pose2D {
            positions: [[0.0; 2]; NUM_JOINTS_2D],
            visible: [false; NUM_JOINTS_2D],
        }
    }
}

/// Directed (parent, child) joint pairs forming a spanning tree over all 16
/// joints, rooted at the neck. Edge order is canonical for limb-indexed data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LimbTopology {
    pub edges: Vec<(JointId, JointId)>,
}

pub const NUM_LIMBS: usize = 15;

impl Default for LimbTopology {
    fn default() -> Self {
        use JointId::*;
        LimbTopology {
            edges: vec![
                (Neck, Head),
                (Neck, LeftArm),
                (LeftArm, LeftElbow),
                (LeftElbow, LeftHand),
                (Neck, RightArm),
                (RightArm, RightElbow),
                (RightElbow, RightHand),
                (Neck, LeftLeg),
                (LeftLeg, LeftKnee),
                (LeftKnee, LeftFoot),
                (LeftFoot, LeftToe),
                (Neck, RightLeg),
                (RightLeg, RightKnee),
                (RightKnee, RightFoot),
                (RightFoot, RightToe),
            ],
        }
    }
}

impl LimbTopology {
    /// Edges as canonical joint indices.
    pub fn index_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .map(|&(p, c)| (p.index(), c.index()))
            .collect()
    }

    /// Structural check: 15 edges spanning 16 joints with no cycles,
    /// reachable from the neck.
    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != NUM_LIMBS {
            return Err(Error::Data(format!(
                "topology has {} edges, want {NUM_LIMBS}",
                self.edges.len()
            )));
        }
        let mut seen_child = [false; NUM_JOINTS];
        for &(p, c) in &self.edges {
            if p == c {
                return Err(Error::Data("self-loop in topology".into()));
            }
            if seen_child[c.index()] {
                return Err(Error::Data(format!("joint {} has two parents", c.name())));
            }
            seen_child[c.index()] = true;
        }
        if seen_child[JointId::Neck.index()] {
            return Err(Error::Data("root joint has a parent".into()));
        }
        // Walk from the root; a spanning tree reaches everything.
        let mut reach = [false; NUM_JOINTS];
        reach[JointId::Neck.index()] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for &(p, c) in &self.edges {
                if reach[p.index()] && !reach[c.index()] {
                    reach[c.index()] = true;
                    changed = true;
                }
            }
        }
        if reach.iter().any(|&r| !r) {
            return Err(Error::Data("topology does not span all joints".into()));
        }
        Ok(())
    }
}

/// Limb vectors: child position minus parent position, in edge order.
pub fn limb_vectors(pose: &Pose3D, topo: &LimbTopology) -> Vec<[f64; 3]> {
    topo.edges
        .iter()
        .map(|&(p, c)| {
            let pp = pose.joint(p);
            let cp = pose.joint(c);
            [cp[0] - pp[0], cp[1] - pp[1], cp[2] - pp[2]]
        })
        .collect()
}

/// Reading of the cosine-term denominator. The per-limb form is the default;
/// the whole-pose form follows the equation as literally printed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CosineDenominator {
    #[default]
    PerLimb,
    WholePose,
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

const DEGENERATE_LIMB: f64 = 1e-9;

/// Sum over limbs of the cosine similarity between the two poses' limb
/// vectors. Degenerate (zero-length) limbs contribute zero; the count of
/// such limbs is returned alongside the value.
pub fn cosine_term_with(
    pose: &Pose3D,
    other: &Pose3D,
    topo: &LimbTopology,
    denominator: CosineDenominator,
) -> (f64, usize) {
    let va = limb_vectors(pose, topo);
    let vb = limb_vectors(other, topo);
    let pose_norm = match denominator {
        CosineDenominator::PerLimb => 0.0,
        CosineDenominator::WholePose => {
            let mut acc = 0.0;
            for p in &pose.positions {
                acc += p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            }
            acc.sqrt()
        }
    };
    let mut total = 0.0;
    let mut degenerate = 0;
    for (a, b) in va.iter().zip(&vb) {
        let na = match denominator {
            CosineDenominator::PerLimb => norm(a),
            CosineDenominator::WholePose => pose_norm,
        };
        let nb = norm(b);
        if na < DEGENERATE_LIMB || nb < DEGENERATE_LIMB {
            degenerate += 1;
            continue;
        }
        total += dot(a, b) / (na * nb);
    }
    (total, degenerate)
}

/// Default per-limb cosine term; logs a warning when degenerate limbs occur.
pub fn cosine_term(pose: &Pose3D, other: &Pose3D, topo: &LimbTopology) -> f64 {
    let (value, degenerate) = cosine_term_with(pose, other, topo, CosineDenominator::PerLimb);
    if degenerate > 0 {
        log::warn!("cosine term: {degenerate} degenerate limb(s) contributed zero");
    }
    value
}

/// Sum over limbs of the Euclidean distance between the two poses' limb
/// vectors, in millimeters.
pub fn limb_length_term(pose: &Pose3D, other: &Pose3D, topo: &LimbTopology) -> f64 {
    let va = limb_vectors(pose, topo);
    let vb = limb_vectors(other, topo);
    va.iter()
        .zip(&vb)
        .map(|(a, b)| norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]))
        .sum()
}

/// Pose-structure loss: R = lambda_theta * cosine_term + lambda_l * limb_length_term.
pub fn structure_loss(
    pose: &Pose3D,
    other: &Pose3D,
    topo: &LimbTopology,
    lambda_theta: f64,
    lambda_l: f64,
) -> Result<f64> {
    if !lambda_theta.is_finite() || !lambda_l.is_finite() {
        return Err(Error::InvalidSpec("structure loss weights must be finite".into()));
    }
    Ok(lambda_theta * cosine_term(pose, other, topo)
        + lambda_l * limb_length_term(pose, other, topo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_pose(seed: f64) -> Pose3D {
        // Deterministic, non-degenerate pose spread around the camera frame.
        let mut positions = [[0.0; 3]; NUM_JOINTS];
        for (j, p) in positions.iter_mut().enumerate() {
            let t = seed + j as f64;
            p[0] = 100.0 * (t * 1.3).sin() + 10.0 * t;
            p[1] = 80.0 * (t * 0.7).cos() - 5.0 * t;
            p[2] = 400.0 + 60.0 * (t * 2.1).sin();
        }
        Pose3D::new(positions).unwrap()
    }

    #[test]
    fn topology_is_a_spanning_tree() {
        let topo = LimbTopology::default();
        topo.validate().unwrap();
        assert_eq!(topo.edges.len(), NUM_LIMBS);
    }

    #[test]
    fn limb_vectors_of_degenerate_pose_are_zero() {
        let topo = LimbTopology::default();
        let pose = Pose3D::zeros();
        let v = limb_vectors(&pose, &topo);
        assert!(v.iter().all(|l| l == &[0.0, 0.0, 0.0]));
    }

    #[test]
    fn limb_vectors_are_translation_invariant() {
        let topo = LimbTopology::default();
        let pose = sample_pose(0.4);
        let moved = pose.translated([10.0, 0.0, 0.0]);
        let a = limb_vectors(&pose, &topo);
        let b = limb_vectors(&moved, &topo);
        for (x, y) in a.iter().zip(&b) {
            for ax in 0..3 {
                assert!((x[ax] - y[ax]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn limb_vectors_match_pairwise_subtraction() {
        let topo = LimbTopology::default();
        let pose = sample_pose(1.7);
        let vecs = limb_vectors(&pose, &topo);
        for (l, &(p, c)) in topo.edges.iter().enumerate() {
            let pp = pose.joint(p);
            let cp = pose.joint(c);
            for ax in 0..3 {
                assert_eq!(vecs[l][ax], cp[ax] - pp[ax]);
            }
        }
    }

    #[test]
    fn cosine_of_pose_with_itself_is_limb_count() {
        let topo = LimbTopology::default();
        let pose = sample_pose(2.3);
        let (v, degenerate) = cosine_term_with(&pose, &pose, &topo, CosineDenominator::PerLimb);
        assert_eq!(degenerate, 0);
        assert!((v - 15.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_point_reflection_is_negative_limb_count() {
        let topo = LimbTopology::default();
        let pose = sample_pose(0.9);
        let reflected = pose.scaled(-1.0);
        let v = cosine_term(&pose, &reflected, &topo);
        assert!((v + 15.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_matches_per_limb_oracle() {
        let topo = LimbTopology::default();
        let a = sample_pose(3.1);
        let b = sample_pose(5.6);
        let va = limb_vectors(&a, &topo);
        let vb = limb_vectors(&b, &topo);
        let mut want = 0.0;
        for (x, y) in va.iter().zip(&vb) {
            let nx = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let ny = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
            want += (x[0] * y[0] + x[1] * y[1] + x[2] * y[2]) / (nx * ny);
        }
        let got = cosine_term(&a, &b, &topo);
        assert!((got - want).abs() < 1e-12);
        assert!(got.abs() <= 15.0 + 1e-12);
    }

    #[test]
    fn degenerate_limb_contributes_zero() {
        let topo = LimbTopology::default();
        let a = sample_pose(0.2);
        let mut b = a;
        // Collapse the head onto the neck: one degenerate limb in b.
        b.positions[JointId::Head.index()] = b.positions[JointId::Neck.index()];
        let (v, degenerate) = cosine_term_with(&a, &b, &topo, CosineDenominator::PerLimb);
        assert_eq!(degenerate, 1);
        assert!(v.abs() <= 14.0 + 1e-12);
    }

    #[test]
    fn limb_length_term_of_equal_poses_is_zero() {
        let topo = LimbTopology::default();
        let pose = sample_pose(4.2);
        assert_eq!(limb_length_term(&pose, &pose, &topo), 0.0);
    }

    #[test]
    fn limb_length_single_offset_limb() {
        let topo = LimbTopology::default();
        let a = sample_pose(1.1);
        let mut b = a;
        // Move only the head: exactly one limb (neck->head) differs, and the
        // head is a leaf so no other limb is touched. Offset length 7.
        let h = JointId::Head.index();
        b.positions[h][0] += 7.0 * 0.6;
        b.positions[h][1] += 7.0 * 0.8;
        let v = limb_length_term(&a, &b, &topo);
        assert!((v - 7.0).abs() < 1e-9);
    }

    #[test]
    fn structure_loss_matches_paper_weights_on_identity() {
        // lambda_theta = -1e-2, lambda_l = 0.5; identical poses give
        // -0.01 * 15 + 0.5 * 0 = -0.15.
        let topo = LimbTopology::default();
        let pose = sample_pose(2.9);
        let r = structure_loss(&pose, &pose, &topo, -1e-2, 0.5).unwrap();
        assert!((r + 0.15).abs() < 1e-12);
    }

    #[test]
    fn structure_loss_gates_to_limb_term() {
        let topo = LimbTopology::default();
        let a = sample_pose(0.5);
        let b = sample_pose(6.0);
        let r = structure_loss(&a, &b, &topo, 0.0, 1.0).unwrap();
        assert!((r - limb_length_term(&a, &b, &topo)).abs() < 1e-12);
    }

    #[test]
    fn whole_pose_denominator_differs_from_per_limb() {
        let topo = LimbTopology::default();
        let a = sample_pose(0.8);
        let b = sample_pose(3.3);
        let (per_limb, _) = cosine_term_with(&a, &b, &topo, CosineDenominator::PerLimb);
        let (whole, _) = cosine_term_with(&a, &b, &topo, CosineDenominator::WholePose);
        assert!((per_limb - whole).abs() > 1e-6);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(seed in 0.0f64..10.0, scale in 0.1f64..8.0) {
            let topo = LimbTopology::default();
            let a = sample_pose(seed);
            let b = sample_pose(seed + 2.5);
            let base = cosine_term(&a, &b, &topo);
            let scaled = cosine_term(&a.scaled(scale), &b, &topo);
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn limb_length_is_translation_invariant(seed in 0.0f64..10.0, dx in -500.0f64..500.0) {
            let topo = LimbTopology::default();
            let a = sample_pose(seed);
            let b = sample_pose(seed + 1.0);
            let base = limb_length_term(&a, &b, &topo);
            let moved = limb_length_term(&a.translated([dx, -dx, 2.0 * dx]), &b, &topo);
            prop_assert!((base - moved).abs() < 1e-7);
        }

        #[test]
        fn structure_loss_on_identity_is_lambda_theta_times_limbs(seed in 0.0f64..10.0) {
            let topo = LimbTopology::default();
            let pose = sample_pose(seed);
            let r = structure_loss(&pose, &pose, &topo, -0.01, 0.5).unwrap();
            prop_assert!((r - (-0.01 * 15.0)).abs() < 1e-12);
        }
    }
}
