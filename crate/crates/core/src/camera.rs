//! Equidistant fish-eye camera model and head-mount geometry.
//!
//! Image radius is proportional to the angle from the optical axis
//! (r = focal * theta), which reproduces the characteristic egocentric
//! distortion: body parts near the camera cover many pixels, the distant
//! lower body very few.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Intrinsics of the down-looking fish-eye camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCamera {
    /// Pixels per radian of off-axis angle.
    pub focal: f64,
    /// Principal point (u0, v0) in pixels.
    pub principal_point: [f64; 2],
    /// Square image side in pixels.
    pub image_size: usize,
    /// Field-of-view half angle in radians.
    pub max_theta: f64,
}

pub const IMAGE_SIZE: usize = 368;

impl FisheyeCamera {
    pub fn new(focal: f64, principal_point: [f64; 2], image_size: usize, max_theta: f64) -> Result<Self> {
        if focal <= 0.0 {
            return Err(Error::InvalidSpec(format!("focal {focal} must be positive")));
        }
        if !(max_theta > 0.0 && max_theta <= std::f64::consts::PI) {
            return Err(Error::InvalidSpec(format!(
                "max_theta {max_theta} outside (0, pi]"
            )));
        }
        Ok(FisheyeCamera {
            focal,
            principal_point,
            image_size,
            max_theta,
        })
    }

    /// Default rig: 95 degree half-angle with the fov circle inscribed in the
    /// 368x368 frame.
    pub fn default_hmd() -> Self {
        let max_theta = 95.0f64.to_radians();
        let half = IMAGE_SIZE as f64 / 2.0;
        FisheyeCamera {
            focal: half / max_theta,
            principal_point: [half, half],
            image_size: IMAGE_SIZE,
            max_theta,
        }
    }

    /// Project a camera-frame point (millimeters) to pixels. The flag is true
    /// when the point lies inside the field of view (theta <= max_theta).
    pub fn project(&self, point: [f64; 3]) -> Result<([f64; 2], bool)> {
        let [x, y, z] = point;
        let rho = (x * x + y * y).sqrt();
        if rho == 0.0 && z == 0.0 {
            return Err(Error::Geometry(
                "cannot project the optical center: direction undefined".into(),
            ));
        }
        let theta = rho.atan2(z);
        let r = self.focal * theta;
        let (dx, dy) = if rho > 0.0 { (x / rho, y / rho) } else { (0.0, 0.0) };
        let u = self.principal_point[0] + r * dx;
        let v = self.principal_point[1] + r * dy;
        Ok(([u, v], theta <= self.max_theta))
    }

    /// Inverse of `project` for a given depth (millimeters along the ray).
    /// The in-fov pixel domain is closed: radius == focal * max_theta succeeds.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Result<[f64; 3]> {
        let du = pixel[0] - self.principal_point[0];
        let dv = pixel[1] - self.principal_point[1];
        let r = (du * du + dv * dv).sqrt();
        let max_r = self.focal * self.max_theta;
        if r > max_r * (1.0 + 1e-12) {
            return Err(Error::Geometry(format!(
                "pixel radius {r:.3} beyond field of view ({max_r:.3})"
            )));
        }
        let theta = r / self.focal;
        let (dx, dy) = if r > 0.0 { (du / r, dv / r) } else { (0.0, 0.0) };
        let s = theta.sin();
        Ok([depth * s * dx, depth * s * dy, depth * theta.cos()])
    }

    /// Unit ray direction through a pixel, or None outside the fov.
    pub fn ray_direction(&self, pixel: [f64; 2]) -> Option<[f64; 3]> {
        self.unproject(pixel, 1.0).ok()
    }
}

/// Camera extrinsics relative to the head rig: P_cam = R * (P - t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Row-major 3x3 rotation, orthonormal with determinant +1.
    pub rotation: [[f64; 3]; 3],
    /// Camera position in the source frame, millimeters.
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Compose two poses: apply `self` after `outer` (both source-to-camera).
    pub fn compose(&self, outer: &CameraPose) -> CameraPose {
        // self.transform(outer.transform(p)) = R_s (R_o (p - t_o) - t_s)
        //   = (R_s R_o)(p - (t_o + R_o^T t_s))
        let rs = &self.rotation;
        let ro = &outer.rotation;
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rot[i][j] += rs[i][k] * ro[k][j];
                }
            }
        }
        let ts = &self.translation;
        let mut t_extra = [0.0; 3];
        for i in 0..3 {
            for k in 0..3 {
                t_extra[i] += ro[k][i] * ts[k];
            }
        }
        CameraPose {
            rotation: rot,
            translation: [
                outer.translation[0] + t_extra[0],
                outer.translation[1] + t_extra[1],
                outer.translation[2] + t_extra[2],
            ],
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += r[i][k] * r[j][k];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - want).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
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

/// Headset mounting jitter: per-axis translation uniform in +-magnitude_mm and
/// a small rotation composed as Rx * Ry * Rz with per-axis angles uniform in
/// +-magnitude_deg. Deterministic per seed.
pub fn sample_mount_jitter(seed: u64, magnitude_mm: f64, magnitude_deg: f64) -> Result<CameraPose> {
    if magnitude_mm < 0.0 || magnitude_deg < 0.0 {
        return Err(Error::InvalidSpec("jitter magnitudes must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |m: f64| m * (2.0 * rng.random::<f64>() - 1.0);
    let translation = [
        uniform(magnitude_mm),
        uniform(magnitude_mm),
        uniform(magnitude_mm),
    ];
    let ax = uniform(magnitude_deg).to_radians();
    let ay = uniform(magnitude_deg).to_radians();
    let az = uniform(magnitude_deg).to_radians();
    let rotation = mat_mul(&rot_x(ax), &mat_mul(&rot_y(ay), &rot_z(az)));
    Ok(CameraPose {
        rotation,
        translation,
    })
}

/// Default jitter magnitudes: 10 mm translation, 3 degrees rotation.
pub const DEFAULT_JITTER_MM: f64 = 10.0;
pub const DEFAULT_JITTER_DEG: f64 = 3.0;

/// Base head-mount pose in the character frame (+Y up, +Z facing): the camera
/// sits `forward_mm` in front of and `below_mm` under the given eye midpoint,
/// pitched straight down at the body. Camera axes in character coordinates:
/// x_cam = +X, y_cam = +Z, z_cam = -Y (optical axis points down).
pub fn head_mount_pose(eye_midpoint: [f64; 3], below_mm: f64, forward_mm: f64) -> CameraPose {
    CameraPose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]],
        translation: [
            eye_midpoint[0],
            eye_midpoint[1] - below_mm,
            eye_midpoint[2] + forward_mm,
        ],
    }
}

pub const DEFAULT_CAMERA_BELOW_MM: f64 = 20.0;
pub const DEFAULT_CAMERA_FORWARD_MM: f64 = 100.0;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = FisheyeCamera::default_hmd();
        let ([u, v], in_fov) = cam.project([0.0, 0.0, 500.0]).unwrap();
        assert!((u - 184.0).abs() < 1e-12);
        assert!((v - 184.0).abs() < 1e-12);
        assert!(in_fov);
    }

    #[test]
    fn beyond_fov_is_flagged() {
        let cam = FisheyeCamera::default_hmd();
        let theta = cam.max_theta + 0.1;
        let p = [theta.sin() * 100.0, 0.0, theta.cos() * 100.0];
        let (_, in_fov) = cam.project(p).unwrap();
        assert!(!in_fov);
    }

    #[test]
    fn hand_evaluated_projection() {
        // (100, 0, 100) mm at focal 117.1, principal point (184, 184):
        // theta = pi/4, u = 184 + 117.1 * pi/4, v = 184.
        let cam = FisheyeCamera::new(117.1, [184.0, 184.0], 368, 95f64.to_radians()).unwrap();
        let ([u, v], in_fov) = cam.project([100.0, 0.0, 100.0]).unwrap();
        assert!((u - (184.0 + 117.1 * std::f64::consts::FRAC_PI_4)).abs() < 1e-9);
        assert!((v - 184.0).abs() < 1e-9);
        assert!(in_fov);
    }

    #[test]
    fn optical_center_is_rejected() {
        let cam = FisheyeCamera::default_hmd();
        assert!(matches!(
            cam.project([0.0, 0.0, 0.0]),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn unproject_axis_ray() {
        let cam = FisheyeCamera::default_hmd();
        let p = cam.unproject([184.0, 184.0], 500.0).unwrap();
        assert!((p[0]).abs() < 1e-12);
        assert!((p[1]).abs() < 1e-12);
        assert!((p[2] - 500.0).abs() < 1e-12);
    }

    #[test]
    fn unproject_succeeds_on_closed_fov_boundary() {
        let cam = FisheyeCamera::default_hmd();
        let r = cam.focal * cam.max_theta;
        let p = cam.unproject([184.0 + r, 184.0], 300.0).unwrap();
        let ([u, v], _) = cam.project(p).unwrap();
        assert!((u - (184.0 + r)).abs() < 1e-9);
        assert!((v - 184.0).abs() < 1e-9);
    }

    #[test]
    fn unproject_rejects_outside_fov() {
        let cam = FisheyeCamera::default_hmd();
        let r = cam.focal * cam.max_theta + 0.5;
        assert!(matches!(
            cam.unproject([184.0 + r, 184.0], 300.0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn mount_jitter_zero_is_identity() {
        let pose = sample_mount_jitter(9, 0.0, 0.0).unwrap();
        assert_eq!(pose, CameraPose::identity());
    }

    #[test]
    fn mount_jitter_is_deterministic() {
        let a = sample_mount_jitter(77, 10.0, 3.0).unwrap();
        let b = sample_mount_jitter(77, 10.0, 3.0).unwrap();
        assert_eq!(a, b);
        let c = sample_mount_jitter(78, 10.0, 3.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mount_jitter_translations_respect_bounds() {
        // Sampling bound oracle over many draws.
        for seed in 0..10_000u64 {
            let pose = sample_mount_jitter(seed, 5.0, 2.0).unwrap();
            for t in pose.translation {
                assert!(t.abs() <= 5.0, "seed {seed}: {t}");
            }
            assert!(pose.orthonormality_error() < 1e-9);
            assert!((pose.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn head_mount_looks_down() {
        let pose = head_mount_pose([0.0, 1600.0, 0.0], 20.0, 100.0);
        // A point far below the head lands near the optical axis.
        let below = pose.transform([0.0, 100.0, 100.0]);
        assert!(below[2] > 0.0, "below the camera means positive depth");
        assert!(pose.orthonormality_error() < 1e-12);
        assert!((pose.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn azimuth_is_preserved() {
        // Points of equal azimuth project onto a ray through the principal point.
        let cam = FisheyeCamera::default_hmd();
        let azimuth = 0.83f64;
        let (ca, sa) = (azimuth.cos(), azimuth.sin());
        let mut last_dir: Option<[f64; 2]> = None;
        for theta in [0.2f64, 0.5, 0.9, 1.3] {
            let p = [
                theta.sin() * ca * 400.0,
                theta.sin() * sa * 400.0,
                theta.cos() * 400.0,
            ];
            let ([u, v], _) = cam.project(p).unwrap();
            let du = u - cam.principal_point[0];
            let dv = v - cam.principal_point[1];
            let n = (du * du + dv * dv).sqrt();
            let dir = [du / n, dv / n];
            if let Some(prev) = last_dir {
                assert!((dir[0] - prev[0]).abs() < 1e-9);
                assert!((dir[1] - prev[1]).abs() < 1e-9);
            }
            last_dir = Some(dir);
        }
    }

    #[test]
    fn image_radius_grows_monotonically_with_theta() {
        let cam = FisheyeCamera::default_hmd();
        let mut prev = -1.0;
        for i in 0..200 {
            let theta = (i as f64 + 0.5) / 200.0 * cam.max_theta;
            let p = [theta.sin() * 500.0, 0.0, theta.cos() * 500.0];
            let ([u, _], _) = cam.project(p).unwrap();
            let r = u - cam.principal_point[0];
            assert!(r > prev, "radius not increasing at theta {theta}");
            prev = r;
        }
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(theta_frac in 0.001f64..0.999, azimuth in 0.0f64..6.28, depth in 50.0f64..3000.0) {
            let cam = FisheyeCamera::default_hmd();
            let theta = theta_frac * cam.max_theta;
            let p = [
                theta.sin() * azimuth.cos() * depth,
                theta.sin() * azimuth.sin() * depth,
                theta.cos() * depth,
            ];
            let ([u, v], in_fov) = cam.project(p).unwrap();
            prop_assert!(in_fov);
            let q = cam.unproject([u, v], depth).unwrap();
            for ax in 0..3 {
                prop_assert!((p[ax] - q[ax]).abs() < 1e-6);
            }
        }
    }
}
