//! Online augmentation: photometric filtering on the visible channels plus a
//! pure-rotation homography warp with consistent ground-truth updates.
//!
//! Every perturbation magnitude and probability scales with `strength`, so
//! strength 0 reproduces the input bit for bit. The thermal channel is
//! exempt from brightness/contrast/blur; it only receives sensor noise and
//! pixel dropout.

use super::Stage1Sample;
use crate::diffcore::tensor::Tensor;
use crate::diffcore::Rng;
use crate::geometry::{viewsphere_class, CameraIntrinsics, Pose, Rotation, ViewsphereGrid};

#[derive(Clone, Copy, Debug)]
pub struct AugmentParts {
    pub photometric: bool,
    pub geometric: bool,
}

impl Default for AugmentParts {
    fn default() -> Self {
        AugmentParts {
            photometric: true,
            geometric: true,
        }
    }
}

const BRIGHTNESS_RANGE: f64 = 0.2;
const CONTRAST_LO: f64 = 0.8;
const CONTRAST_HI: f64 = 1.2;
const BLUR_PROB: f64 = 0.3;
const NOISE_SIGMA: f64 = 0.02;
const DROPOUT_PROB: f64 = 0.05;
const EULER_RANGE_DEG: f64 = 2.0;

/// Augments one RGBT frame, returning the perturbed image and the pose
/// consistent with the applied camera rotation (R' = R_p·R, t' = R_p·t).
pub fn augment_frame(
    image: &Tensor<f32>,
    pose: &Pose,
    k: &CameraIntrinsics,
    rng: &mut Rng,
    strength: f64,
    parts: AugmentParts,
) -> (Tensor<f32>, Pose) {
    assert!((0.0..=1.0).contains(&strength), "strength in [0,1]");
    let shape = image.shape().to_vec();
    assert_eq!(shape.len(), 3, "image must be [C,H,W]");
    if strength == 0.0 {
        return (image.clone(), *pose);
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = image.clone();
    let mut out_pose = *pose;

    if parts.photometric {
        let plane = h * w;
        let rgb_ch = c.min(3);
        let brightness =
            rng.uniform_in(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE) * strength;
        let contrast = rng.uniform_in(CONTRAST_LO, CONTRAST_HI).powf(strength);
        {
            let d = img.data_mut();
            for ch in 0..rgb_ch {
                for v in &mut d[ch * plane..(ch + 1) * plane] {
                    let x = (*v as f64 + brightness - 0.5) * contrast + 0.5;
                    *v = x as f32;
                }
            }
        }
        if rng.bernoulli(BLUR_PROB * strength) {
            img = blur3x3(&img, rgb_ch);
        }
        let sigma = NOISE_SIGMA * strength;
        {
            let d = img.data_mut();
            for v in d.iter_mut() {
                *v += (rng.normal() * sigma) as f32;
            }
        }
        let p_drop = DROPOUT_PROB * strength;
        {
            let d = img.data_mut();
            for px in 0..plane {
                if rng.bernoulli(p_drop) {
                    for ch in 0..c {
                        d[ch * plane + px] = 0.0;
                    }
                }
            }
        }
        for v in img.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    if parts.geometric {
        let lim = (EULER_RANGE_DEG * strength).to_radians();
        let a = rng.uniform_in(-lim, lim);
        let b = rng.uniform_in(-lim, lim);
        let g = rng.uniform_in(-lim, lim);
        let r_p = Rotation::from_axis_angle(&[0.0, 0.0, 1.0], g)
            .compose(&Rotation::from_axis_angle(&[0.0, 1.0, 0.0], b))
            .compose(&Rotation::from_axis_angle(&[1.0, 0.0, 0.0], a));
        img = warp_pure_rotation(&img, k, &r_p);
        out_pose = Pose::new(
            r_p.compose(&pose.rotation),
            r_p.apply(&pose.position),
        );
    }

    (img, out_pose)
}

/// Augments a Stage-1 sample and recomputes its labels from the perturbed
/// pose.
pub fn augment_stage1_sample(
    sample: &Stage1Sample,
    k: &CameraIntrinsics,
    grid: &ViewsphereGrid,
    rng: &mut Rng,
    strength: f64,
    parts: AugmentParts,
) -> Stage1Sample {
    let (image, pose) = augment_frame(&sample.image, &sample.pose, k, rng, strength, parts);
    let mut onehot = vec![0.0f32; grid.class_count()];
    onehot[viewsphere_class(&pose.rotation, grid)] = 1.0;
    Stage1Sample {
        image,
        onehot,
        position: pose.position,
        pose,
    }
}

/// Separable [1,2,1]/4 blur with border replication, first `channels` planes.
fn blur3x3(image: &Tensor<f32>, channels: usize) -> Tensor<f32> {
    let shape = image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    let plane = h * w;
    let mut tmp = vec![0.0f32; plane];
    for ch in 0..channels.min(c) {
        let sp = &src[ch * plane..(ch + 1) * plane];
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                tmp[y * w + x] =
                    0.25 * (sp[y * w + xm] + 2.0 * sp[y * w + x] + sp[y * w + xp]);
            }
        }
        // vertical pass
        let dp = &mut dst[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                dp[y * w + x] =
                    0.25 * (tmp[ym * w + x] + 2.0 * tmp[y * w + x] + tmp[yp * w + x]);
            }
        }
    }
    out
}

/// Warps all channels by the homography H = K·R_p·K⁻¹ using the exact
/// inverse map K·R_pᵀ·K⁻¹, bilinear sampling, border replication.
fn warp_pure_rotation(image: &Tensor<f32>, k: &CameraIntrinsics, r_p: &Rotation) -> Tensor<f32> {
    let shape = image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let h_inv = homography(k, &r_p.transpose());
    let mut out = Tensor::zeros(&shape);
    let src = image.data();
    let dst = out.data_mut();
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            // output pixel center in projection coordinates
            let u = x as f64 + 0.5;
            let v = y as f64 + 0.5;
            let sz = h_inv[6] * u + h_inv[7] * v + h_inv[8];
            let su = (h_inv[0] * u + h_inv[1] * v + h_inv[2]) / sz;
            let sv = (h_inv[3] * u + h_inv[4] * v + h_inv[5]) / sz;
            // to continuous pixel-index space
            let fx = (su - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (sv - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = (fx - x0 as f64) as f32;
            let ay = (fy - y0 as f64) as f32;
            for ch in 0..c {
                let sp = &src[ch * plane..(ch + 1) * plane];
                let top = sp[y0 * w + x0] * (1.0 - ax) + sp[y0 * w + x1] * ax;
                let bot = sp[y1 * w + x0] * (1.0 - ax) + sp[y1 * w + x1] * ax;
                dst[ch * plane + y * w + x] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    out
}

/// K·R·K⁻¹ as a row-major 3x3.
fn homography(k: &CameraIntrinsics, r: &Rotation) -> [f64; 9] {
    let km = k.matrix();
    let kinv = [
        1.0 / k.fx,
        0.0,
        -k.cx / k.fx,
        0.0,
        1.0 / k.fy,
        -k.cy / k.fy,
        0.0,
        0.0,
        1.0,
    ];
    let rk = mat3_mul(r.matrix(), &kinv);
    mat3_mul(&km, &rk)
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn test_image(h: usize, w: usize) -> Tensor<f32> {
        let mut rng = Rng::seed_from(41);
        Tensor::rand_uniform(&[4, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn strength_zero_is_identity() {
        let img = test_image(8, 8);
        let pose = Pose::new(
            Rotation::from_axis_angle(&[0.0, 1.0, 0.0], 0.7),
            [0.2, -0.1, 12.0],
        );
        let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0);
        let mut rng = Rng::seed_from(42);
        let (out, out_pose) =
            augment_frame(&img, &pose, &k, &mut rng, 0.0, AugmentParts::default());
        assert_eq!(out.data(), img.data());
        assert_eq!(out_pose, pose);
    }

    #[test]
    fn photometric_only_never_moves_pixels_of_flat_regions() {
        // with geometric disabled the pose is untouched
        let img = test_image(8, 8);
        let pose = Pose::new(Rotation::identity(), [0.0, 0.0, 10.0]);
        let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0);
        let mut rng = Rng::seed_from(43);
        let (_, out_pose) = augment_frame(
            &img,
            &pose,
            &k,
            &mut rng,
            1.0,
            AugmentParts {
                photometric: true,
                geometric: false,
            },
        );
        assert_eq!(out_pose, pose);
    }

    #[test]
    fn geometric_only_never_changes_values_range_and_keeps_rotation_valid() {
        let img = test_image(8, 8);
        let pose = Pose::new(
            Rotation::from_axis_angle(&[1.0, 0.5, 0.0], 0.3),
            [0.0, 0.0, 15.0],
        );
        let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0);
        let mut rng = Rng::seed_from(44);
        let (out, out_pose) = augment_frame(
            &img,
            &pose,
            &k,
            &mut rng,
            1.0,
            AugmentParts {
                photometric: false,
                geometric: true,
            },
        );
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(
            crate::geometry::Rotation::from_matrix(*out_pose.rotation.matrix()).is_ok(),
            "R_p·R stays in SO(3)"
        );
    }

    #[test]
    fn warp_consistency_project_then_warp() {
        // projected keypoints of the updated pose match the homography
        // applied to projections of the original pose
        let k = CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0);
        let pose = Pose::new(
            Rotation::from_axis_angle(&[0.2, 1.0, -0.4], 0.9),
            [0.5, -0.3, 20.0],
        );
        let r_p = Rotation::from_axis_angle(&[0.1, 0.8, 0.3], 1.5f64.to_radians());
        let pose2 = Pose::new(r_p.compose(&pose.rotation), r_p.apply(&pose.position));
        let hm = homography(&k, &r_p);
        let points = [
            [0.5, 0.5, 0.5],
            [-0.5, 0.2, -0.1],
            [0.0, -0.5, 0.3],
            [1.2, 0.0, 0.0],
        ];
        for p in &points {
            let z1 = project(&k, &pose, p).unwrap();
            let z2 = project(&k, &pose2, p).unwrap();
            let sz = hm[6] * z1[0] + hm[7] * z1[1] + hm[8];
            let wu = (hm[0] * z1[0] + hm[1] * z1[1] + hm[2]) / sz;
            let wv = (hm[3] * z1[0] + hm[4] * z1[1] + hm[5]) / sz;
            assert!(
                (wu - z2[0]).abs() < 0.5 && (wv - z2[1]).abs() < 0.5,
                "warped ({wu},{wv}) vs reprojected {z2:?}"
            );
        }
    }

    #[test]
    fn stage1_sample_labels_follow_pose() {
        let grid = ViewsphereGrid::new(30, 30).unwrap();
        let pose = Pose::new(Rotation::identity(), [0.0, 0.0, 10.0]);
        let mut onehot = vec![0.0; grid.class_count()];
        onehot[viewsphere_class(&pose.rotation, &grid)] = 1.0;
        let sample = Stage1Sample {
            image: test_image(8, 8),
            onehot,
            position: pose.position,
            pose,
        };
        let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0);
        let mut rng = Rng::seed_from(45);
        let out = augment_stage1_sample(&sample, &k, &grid, &mut rng, 1.0, AugmentParts::default());
        assert_eq!(out.onehot.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(
            out.class_index(),
            viewsphere_class(&out.pose.rotation, &grid)
        );
        assert_eq!(out.position, out.pose.position);
    }
}
