//! Gaussian joint heatmaps: rendering, soft-argmax decoding, the 2D training
//! loss, and the degradation augmentation that simulates detector uncertainty.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, NUM_JOINTS_2D};

/// Heatmap grid side; image coordinates scale by GRID/IMAGE uniformly, with
/// cell centers at integer coordinates.
pub const GRID: usize = 47;
pub const CHANNELS: usize = NUM_JOINTS_2D;
const CELLS: usize = GRID * GRID;

/// Default ground-truth spread in grid pixels.
pub const DEFAULT_SIGMA: f64 = 1.75;

/// Per-joint 47x47 confidence grids in [0, 1], channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    grid: Vec<f64>,
    pub sigma: f64,
}

impl HeatmapStack {
    pub fn new(grid: Vec<f64>, sigma: f64) -> Result<Self> {
        if grid.len() != CHANNELS * CELLS {
            return Err(Error::ShapeMismatch(format!(
                "heatmap stack wants {} cells, got {}",
                CHANNELS * CELLS,
                grid.len()
            )));
        }
        Ok(HeatmapStack { grid, sigma })
    }

    pub fn zeros() -> Self {
        HeatmapStack {
            grid: vec![0.0; CHANNELS * CELLS],
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.grid
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.grid
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        &self.grid[j * CELLS..(j + 1) * CELLS]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.grid[j * CELLS..(j + 1) * CELLS]
    }

    pub fn channel_max(&self, j: usize) -> f64 {
        self.channel(j).iter().cloned().fold(0.0, f64::max)
    }
}

/// Image pixel -> heatmap grid coordinate scale.
pub fn image_to_grid() -> f64 {
    GRID as f64 / IMAGE_SIZE as f64
}

/// Render ground-truth heatmaps: channel j holds an unnormalized Gaussian of
/// spread `sigma` (grid pixels) centered on the joint, peak value 1. Invisible
/// or out-of-image joints render all-zero channels.
pub fn render(pose: &Pose2D, sigma: f64) -> Result<HeatmapStack> {
    if sigma <= 0.0 {
        return Err(Error::InvalidSpec(format!("sigma {sigma} must be positive")));
    }
    let scale = image_to_grid();
    let mut grid = vec![0.0; CHANNELS * CELLS];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for j in 0..CHANNELS {
        let [u, v] = pose.positions[j];
        if !pose.visible[j] || u < 0.0 || v < 0.0 || u >= IMAGE_SIZE as f64 || v >= IMAGE_SIZE as f64
        {
            continue;
        }
        let gx = u * scale;
        let gy = v * scale;
        let chan = &mut grid[j * CELLS..(j + 1) * CELLS];
        for iy in 0..GRID {
            let dy = iy as f64 - gy;
            let row = &mut chan[iy * GRID..(iy + 1) * GRID];
            for (ix, cell) in row.iter_mut().enumerate() {
                let dx = ix as f64 - gx;
                *cell = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    HeatmapStack::new(grid, sigma)
}

/// Decoded 2D joints plus per-joint confidence (pre-normalization channel max).
#[derive(Debug, Clone)]
pub struct DecodedPose {
    pub pose: Pose2D,
    pub confidence: [f64; CHANNELS],
}

/// Probability-weighted centroid per channel, positions mapped back to image
/// pixels. All-zero channels decode as invisible with confidence 0.
pub fn soft_argmax(stack: &HeatmapStack) -> DecodedPose {
    let scale = image_to_grid();
    let mut pose = Pose2D::zeros();
    let mut confidence = [0.0; CHANNELS];
    for j in 0..CHANNELS {
        let chan = stack.channel(j);
        let total: f64 = chan.iter().sum();
        let maxv = stack.channel_max(j);
        if total <= 0.0 || maxv <= 0.0 {
            continue;
        }
        let mut cx = 0.0;
        let mut cy = 0.0;
        for iy in 0..GRID {
            for ix in 0..GRID {
                let w = chan[iy * GRID + ix];
                cx += w * ix as f64;
                cy += w * iy as f64;
            }
        }
        pose.positions[j] = [cx / total / scale, cy / total / scale];
        pose.visible[j] = true;
        confidence[j] = maxv;
    }
    DecodedPose { pose, confidence }
}

/// Mean over all cells of the squared difference. The differentiable variant
/// used in training lives on the autodiff graph; this is the plain value.
pub fn loss_2d(a: &HeatmapStack, b: &HeatmapStack) -> f64 {
    let n = (CHANNELS * CELLS) as f64;
    a.raw()
        .iter()
        .zip(b.raw())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Degradation profile applied per joint: with probability `occlusion_prob`
/// the channel is attenuated toward zero; otherwise it is Gaussian-blurred by
/// `blur_sigma` grid pixels and perturbed by uniform noise of amplitude
/// `noise_amp`, then clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeProfile {
    pub occlusion_prob: f64,
    pub blur_sigma: f64,
    pub noise_amp: f64,
}

impl DegradeProfile {
    pub fn none() -> Self {
        DegradeProfile {
            occlusion_prob: 0.0,
            blur_sigma: 0.0,
            noise_amp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::InvalidSpec(format!(
                "occlusion_prob {} outside [0,1]",
                self.occlusion_prob
            )));
        }
        if self.blur_sigma < 0.0 || self.noise_amp < 0.0 {
            return Err(Error::InvalidSpec(
                "blur_sigma and noise_amp must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Occlusion attenuation keeps the channel max strictly below this bound.
const OCCLUSION_CEILING: f64 = 0.045;

/// Degradation result with the per-joint occlusion mask (needed by the latent
/// uncertainty probe).
#[derive(Debug, Clone)]
pub struct Degraded {
    pub stack: HeatmapStack,
    pub occluded: [bool; CHANNELS],
}

/// Apply the degradation profile; deterministic per seed.
pub fn degrade_with_mask(
    stack: &HeatmapStack,
    seed: u64,
    profile: &DegradeProfile,
) -> Result<Degraded> {
    profile.validate()?;
    let mut out = stack.clone();
    let mut occluded = [false; CHANNELS];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in 0..CHANNELS {
        let roll: f64 = rng.random();
        if roll < profile.occlusion_prob {
            let factor = OCCLUSION_CEILING * rng.random::<f64>();
            for cell in out.channel_mut(j) {
                *cell *= factor;
            }
            occluded[j] = true;
            continue;
        }
        if profile.blur_sigma > 0.0 {
            blur_channel(out.channel_mut(j), profile.blur_sigma);
        }
        if profile.noise_amp > 0.0 {
            for cell in out.channel_mut(j) {
                *cell += profile.noise_amp * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        for cell in out.channel_mut(j) {
            *cell = cell.clamp(0.0, 1.0);
        }
    }
    Ok(Degraded {
        stack: out,
        occluded,
    })
}

/// Profile-only entry point when the occlusion mask is not needed.
pub fn degrade(stack: &HeatmapStack, seed: u64, profile: &DegradeProfile) -> Result<HeatmapStack> {
    Ok(degrade_with_mask(stack, seed, profile)?.stack)
}

/// Separable Gaussian blur with a normalized kernel; borders are zero-padded.
fn blur_channel(chan: &mut [f64], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 * inv).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let mut tmp = vec![0.0; CELLS];
    for y in 0..GRID as isize {
        for x in 0..GRID as isize {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = x + ki as isize - radius;
                if sx >= 0 && sx < GRID as isize {
                    acc += k * chan[(y * GRID as isize + sx) as usize];
                }
            }
            tmp[(y * GRID as isize + x) as usize] = acc;
        }
    }
    for y in 0..GRID as isize {
        for x in 0..GRID as isize {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = y + ki as isize - radius;
                if sy >= 0 && sy < GRID as isize {
                    acc += k * tmp[(sy * GRID as isize + x) as usize];
                }
            }
            chan[(y * GRID as isize + x) as usize] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn visible_pose(coords: &[(usize, f64, f64)]) -> Pose2D {
        let mut pose = Pose2D::zeros();
        for &(j, u, v) in coords {
            pose.positions[j] = [u, v];
            pose.visible[j] = true;
        }
        pose
    }

    #[test]
    fn centered_joint_peaks_at_one() {
        // Grid center cell 23 maps back to image coordinate 23/scale.
        let scale = image_to_grid();
        let pose = visible_pose(&[(0, 23.0 / scale, 23.0 / scale)]);
        for sigma in [1.0, 1.75, 3.0] {
            let hm = render(&pose, sigma).unwrap();
            let c = hm.channel(0);
            assert!((c[23 * GRID + 23] - 1.0).abs() < 1e-12);
            assert!(hm.channel_max(0) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn invisible_joint_renders_zero_channel() {
        let mut pose = visible_pose(&[(3, 100.0, 100.0)]);
        pose.visible[3] = false;
        let hm = render(&pose, 1.75).unwrap();
        assert_eq!(hm.channel(3).iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn out_of_image_joint_renders_zero_channel() {
        let pose = visible_pose(&[(2, -5.0, 100.0)]);
        let hm = render(&pose, 1.75).unwrap();
        assert_eq!(hm.channel(2).iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn render_matches_pointwise_formula() {
        // Joint at grid coords (10.5, 20.25), sigma 1.75.
        let scale = image_to_grid();
        let (gx, gy) = (10.5, 20.25);
        let sigma = 1.75;
        let pose = visible_pose(&[(7, gx / scale, gy / scale)]);
        let hm = render(&pose, sigma).unwrap();
        let chan = hm.channel(7);
        for iy in 0..GRID {
            for ix in 0..GRID {
                let dx = ix as f64 - gx;
                let dy = iy as f64 - gy;
                let want = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                assert!((chan[iy * GRID + ix] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_rejects_bad_sigma() {
        let pose = Pose2D::zeros();
        assert!(render(&pose, 0.0).is_err());
    }

    #[test]
    fn soft_argmax_recovers_centered_joint() {
        let scale = image_to_grid();
        let pose = visible_pose(&[(0, 23.0 / scale, 23.0 / scale)]);
        let hm = render(&pose, 1.75).unwrap();
        let decoded = soft_argmax(&hm);
        let [u, v] = decoded.pose.positions[0];
        assert!((u * scale - 23.0).abs() < 1e-6);
        assert!((v * scale - 23.0).abs() < 1e-6);
        assert!((decoded.confidence[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_marks_zero_channels_invisible() {
        let decoded = soft_argmax(&HeatmapStack::zeros());
        assert!(decoded.pose.visible.iter().all(|&v| !v));
        assert!(decoded.confidence.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn translation_equivariance_of_argmax_cell() {
        let scale = image_to_grid();
        let base = (12.0, 17.0);
        let shift = (9.0, 5.0);
        let p1 = visible_pose(&[(4, base.0 / scale, base.1 / scale)]);
        let p2 = visible_pose(&[(4, (base.0 + shift.0) / scale, (base.1 + shift.1) / scale)]);
        let h1 = render(&p1, 1.5).unwrap();
        let h2 = render(&p2, 1.5).unwrap();
        let argmax = |h: &HeatmapStack| {
            let c = h.channel(4);
            let (mut bi, mut bv) = (0, -1.0);
            for (i, &v) in c.iter().enumerate() {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            ((bi % GRID) as f64, (bi / GRID) as f64)
        };
        let a1 = argmax(&h1);
        let a2 = argmax(&h2);
        assert_eq!(a2.0 - a1.0, shift.0);
        assert_eq!(a2.1 - a1.1, shift.1);
    }

    #[test]
    fn loss_2d_constant_offset() {
        let a = HeatmapStack::zeros();
        let mut b = HeatmapStack::zeros();
        for v in b.raw_mut() {
            *v = 0.1;
        }
        assert!((loss_2d(&a, &b) - 0.01).abs() < 1e-12);
        assert_eq!(loss_2d(&a, &a), 0.0);
        assert_eq!(loss_2d(&a, &b), loss_2d(&b, &a));
    }

    #[test]
    fn degrade_identity_profile() {
        let scale = image_to_grid();
        let pose = visible_pose(&[(1, 10.0 / scale, 30.0 / scale)]);
        let hm = render(&pose, 1.75).unwrap();
        let out = degrade(&hm, 5, &DegradeProfile::none()).unwrap();
        assert_eq!(out, hm);
    }

    #[test]
    fn full_occlusion_attenuates_every_channel() {
        let scale = image_to_grid();
        let coords: Vec<(usize, f64, f64)> = (0..CHANNELS)
            .map(|j| (j, (5.0 + 2.0 * j as f64) / scale, (8.0 + 2.0 * j as f64) / scale))
            .collect();
        let pose = visible_pose(&coords);
        let hm = render(&pose, 1.75).unwrap();
        let d = degrade_with_mask(&hm, 11, &DegradeProfile {
            occlusion_prob: 1.0,
            blur_sigma: 0.0,
            noise_amp: 0.0,
        })
        .unwrap();
        for j in 0..CHANNELS {
            assert!(d.stack.channel_max(j) < 0.05, "channel {j}");
            assert!(d.occluded[j]);
        }
    }

    #[test]
    fn degrade_is_deterministic_per_seed() {
        let scale = image_to_grid();
        let pose = visible_pose(&[(0, 20.0 / scale, 20.0 / scale), (5, 31.0 / scale, 12.0 / scale)]);
        let hm = render(&pose, 1.75).unwrap();
        let profile = DegradeProfile {
            occlusion_prob: 0.4,
            blur_sigma: 1.0,
            noise_amp: 0.05,
        };
        let a = degrade(&hm, 99, &profile).unwrap();
        let b = degrade(&hm, 99, &profile).unwrap();
        assert_eq!(a, b);
        let c = degrade(&hm, 100, &profile).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degraded_values_stay_in_unit_interval() {
        let scale = image_to_grid();
        let pose = visible_pose(&[(0, 23.0 / scale, 23.0 / scale)]);
        let hm = render(&pose, 1.2).unwrap();
        let profile = DegradeProfile {
            occlusion_prob: 0.2,
            blur_sigma: 1.5,
            noise_amp: 0.3,
        };
        for seed in 0..20 {
            let out = degrade(&hm, seed, &profile).unwrap();
            assert!(out.raw().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    proptest! {
        // Round-trip decode accuracy for joints away from the border.
        #[test]
        fn render_decode_within_half_grid_pixel(
            gx in 9.0f64..38.0,
            gy in 9.0f64..38.0,
            sigma in 1.0f64..3.0,
        ) {
            let scale = image_to_grid();
            let pose = visible_pose(&[(6, gx / scale, gy / scale)]);
            let hm = render(&pose, sigma).unwrap();
            let decoded = soft_argmax(&hm);
            let [u, v] = decoded.pose.positions[6];
            prop_assert!((u * scale - gx).abs() < 0.5, "dx = {}", (u * scale - gx).abs());
            prop_assert!((v * scale - gy).abs() < 0.5, "dy = {}", (v * scale - gy).abs());
        }
    }
}
