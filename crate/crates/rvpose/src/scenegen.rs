//! Procedural rendezvous sequence generator: a stylized bus-plus-solar-array
//! target, guidance and tumbling profiles, and a painter's-algorithm
//! rasterizer producing four-channel RGBT frames with ground-truth poses.
//!
//! The renderer is deliberately simple — flat Lambertian shading, a Phong
//! glare lobe on the panel, uniform Earth disk for R-bar backgrounds — but
//! fully deterministic given a seed, so datasets regenerate bit for bit.

use crate::dataset::{Frame, ProfileMeta, Sequence};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::{derive_seed, Rng};
use crate::geometry::{
    add3, cross3, dot3, norm3, normalize3, scale3, sub3, CameraIntrinsics, Pose, Rotation, Vec3,
    Z_MIN,
};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("time {tau} outside [0, {duration}]")]
    TauOutOfRange { tau: f64, duration: f64 },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

// ---------------------------------------------------------------------
// target model
// ---------------------------------------------------------------------

/// Triangle mesh with per-face material properties and a labeled keypoint
/// set, all in the target body frame (meters).
#[derive(Clone, Debug)]
pub struct TargetModel {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Visible-band albedo per face, in [0, 1].
    pub face_albedo: Vec<f64>,
    /// Specular coefficient per face, in [0, 1]; the glare source.
    pub face_specular: Vec<f64>,
    /// Thermal radiance per face, in [0, 1]; independent of the sun.
    pub face_thermal: Vec<f64>,
    pub keypoints: Vec<Vec3>,
    pub keypoint_labels: Vec<String>,
}

impl TargetModel {
    pub fn bounding_radius(&self) -> f64 {
        self.vertices
            .iter()
            .map(norm3)
            .fold(0.0, f64::max)
    }

    /// Rank of the centered keypoint matrix (3 means non-coplanar spread).
    pub fn keypoint_rank(&self, tol: f64) -> usize {
        let n = self.keypoints.len() as f64;
        let mut mean = [0.0f64; 3];
        for p in &self.keypoints {
            mean = add3(&mean, p);
        }
        mean = scale3(&mean, 1.0 / n);
        // Gram-Schmidt over the centered points
        let mut basis: Vec<Vec3> = Vec::new();
        for p in &self.keypoints {
            let mut v = sub3(p, &mean);
            for b in &basis {
                let d = dot3(&v, b);
                v = sub3(&v, &scale3(b, d));
            }
            if norm3(&v) > tol {
                basis.push(normalize3(&v));
            }
            if basis.len() == 3 {
                break;
            }
        }
        basis.len()
    }
}

/// Stylized target: a 1 m cubic bus with distinct face albedos, a short boom
/// and a 2 m x 1 m solar panel whose cell side is strongly specular. Ten
/// keypoints: the eight bus corners and the two far panel tips.
pub fn make_default_target() -> TargetModel {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut albedo = Vec::new();
    let mut specular = Vec::new();
    let mut thermal = Vec::new();

    // bus cube [-0.5, 0.5]^3
    let h = 0.5;
    let corners: Vec<Vec3> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { -h } else { h },
                if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { -h } else { h },
            ]
        })
        .collect();
    vertices.extend_from_slice(&corners);
    // (vertex indices, albedo, thermal) per cube face, outward wound
    let bus_faces: [([usize; 4], f64, f64); 6] = [
        ([1, 3, 7, 5], 0.85, 0.85), // +x
        ([0, 4, 6, 2], 0.35, 0.75), // -x
        ([2, 6, 7, 3], 0.70, 0.80), // +y
        ([0, 1, 5, 4], 0.45, 0.70), // -y
        ([4, 5, 7, 6], 0.60, 0.78), // +z
        ([0, 2, 3, 1], 0.25, 0.72), // -z
    ];
    for (quad, a, th) in bus_faces {
        for tri in [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]] {
            faces.push(tri);
            albedo.push(a);
            specular.push(0.05);
            thermal.push(th);
        }
    }

    // boom along +x, thin double-sided quad in the z = 0 plane
    let b0 = vertices.len();
    vertices.extend_from_slice(&[
        [0.5, -0.02, 0.0],
        [0.55, -0.02, 0.0],
        [0.55, 0.02, 0.0],
        [0.5, 0.02, 0.0],
    ]);
    for (tri, _up) in [
        ([b0, b0 + 1, b0 + 2], true),
        ([b0, b0 + 2, b0 + 3], true),
        ([b0, b0 + 2, b0 + 1], false),
        ([b0, b0 + 3, b0 + 2], false),
    ] {
        faces.push(tri);
        albedo.push(0.5);
        specular.push(0.1);
        thermal.push(0.4);
    }

    // panel 2 m x 1 m in the z = 0 plane; the +z (cell) side is the glare
    // source, the -z (MLI) side is brighter but diffuse
    let p0 = vertices.len();
    vertices.extend_from_slice(&[
        [0.55, -0.5, 0.0],
        [2.55, -0.5, 0.0],
        [2.55, 0.5, 0.0],
        [0.55, 0.5, 0.0],
    ]);
    for tri in [[p0, p0 + 1, p0 + 2], [p0, p0 + 2, p0 + 3]] {
        faces.push(tri); // +z side
        albedo.push(0.25);
        specular.push(0.9);
        thermal.push(0.15);
    }
    for tri in [[p0, p0 + 2, p0 + 1], [p0, p0 + 3, p0 + 2]] {
        faces.push(tri); // -z side
        albedo.push(0.65);
        specular.push(0.2);
        thermal.push(0.18);
    }

    let mut keypoints: Vec<Vec3> = corners.clone();
    keypoints.push([2.55, -0.5, 0.0]);
    keypoints.push([2.55, 0.5, 0.0]);
    let mut keypoint_labels: Vec<String> = (0..8).map(|i| format!("bus_corner_{i}")).collect();
    keypoint_labels.push("panel_tip_neg_y".into());
    keypoint_labels.push("panel_tip_pos_y".into());

    TargetModel {
        vertices,
        faces,
        face_albedo: albedo,
        face_specular: specular,
        face_thermal: thermal,
        keypoints,
        keypoint_labels,
    }
}

// ---------------------------------------------------------------------
// profiles
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuidanceKind {
    FixedRange { range_m: f64 },
    ForcedTranslation { start_m: f64, end_m: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Approach {
    /// Dark deep-space background.
    VBar,
    /// Bright Earth disk in the field of view.
    RBar,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceProfile {
    pub kind: GuidanceKind,
    pub approach: Approach,
}

impl GuidanceProfile {
    pub fn validate(&self) -> Result<(), SceneError> {
        match self.kind {
            GuidanceKind::FixedRange { range_m } if range_m > 0.0 => Ok(()),
            GuidanceKind::ForcedTranslation { start_m, end_m } if start_m > end_m && end_m > 0.0 => {
                Ok(())
            }
            _ => Err(SceneError::InvalidProfile(format!("{:?}", self.kind))),
        }
    }

    pub fn tag(&self) -> String {
        let kind = match self.kind {
            GuidanceKind::FixedRange { range_m } => format!("fixed:{range_m}"),
            GuidanceKind::ForcedTranslation { start_m, end_m } => {
                format!("trans:{start_m}->{end_m}")
            }
        };
        kind
    }

    pub fn approach_tag(&self) -> &'static str {
        match self.approach {
            Approach::VBar => "vbar",
            Approach::RBar => "rbar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TumblingProfile {
    SingleAxis {
        axis: Vec3,
        rate_deg_s: f64,
    },
    TwoAxis {
        axis1: Vec3,
        rate1_deg_s: f64,
        axis2: Vec3,
        rate2_deg_s: f64,
    },
    /// Spin about a tilted axis whose direction precesses about a
    /// boresight-orthogonal axis.
    Precession {
        tilt_deg: f64,
        spin_rate_deg_s: f64,
        precession_rate_deg_min: f64,
    },
}

impl TumblingProfile {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = match *self {
            TumblingProfile::SingleAxis { rate_deg_s, .. } => rate_deg_s != 0.0,
            TumblingProfile::TwoAxis {
                rate1_deg_s,
                rate2_deg_s,
                ..
            } => rate1_deg_s != 0.0 && rate2_deg_s != 0.0,
            TumblingProfile::Precession {
                tilt_deg,
                spin_rate_deg_s,
                precession_rate_deg_min,
            } => {
                spin_rate_deg_s != 0.0
                    && precession_rate_deg_min != 0.0
                    && tilt_deg > 0.0
                    && tilt_deg < 90.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidProfile(format!("{self:?}")))
        }
    }

    pub fn tag(&self) -> String {
        match *self {
            TumblingProfile::SingleAxis { axis, rate_deg_s } => {
                format!("single:[{},{},{}]:{rate_deg_s}", axis[0], axis[1], axis[2])
            }
            TumblingProfile::TwoAxis {
                axis1,
                rate1_deg_s,
                axis2,
                rate2_deg_s,
            } => format!(
                "two:[{},{},{}]:{rate1_deg_s}+[{},{},{}]:{rate2_deg_s}",
                axis1[0], axis1[1], axis1[2], axis2[0], axis2[1], axis2[2]
            ),
            TumblingProfile::Precession {
                tilt_deg,
                spin_rate_deg_s,
                precession_rate_deg_min,
            } => format!("prec:{tilt_deg}:{spin_rate_deg_s}:{precession_rate_deg_min}"),
        }
    }

    /// Analytic attitude at time tau.
    pub fn rotation_at(&self, tau: f64) -> Rotation {
        match *self {
            TumblingProfile::SingleAxis { axis, rate_deg_s } => {
                Rotation::from_axis_angle(&axis, (rate_deg_s * tau).to_radians())
            }
            TumblingProfile::TwoAxis {
                axis1,
                rate1_deg_s,
                axis2,
                rate2_deg_s,
            } => Rotation::from_axis_angle(&axis1, (rate1_deg_s * tau).to_radians()).compose(
                &Rotation::from_axis_angle(&axis2, (rate2_deg_s * tau).to_radians()),
            ),
            TumblingProfile::Precession {
                tilt_deg,
                spin_rate_deg_s,
                precession_rate_deg_min,
            } => {
                // spin axis starts as z tilted about x, then precesses about
                // the boresight-orthogonal x axis
                let spin0 =
                    Rotation::from_axis_angle(&[1.0, 0.0, 0.0], tilt_deg.to_radians())
                        .apply(&[0.0, 0.0, 1.0]);
                let prec = Rotation::from_axis_angle(
                    &[1.0, 0.0, 0.0],
                    (precession_rate_deg_min / 60.0 * tau).to_radians(),
                );
                let spin = Rotation::from_axis_angle(&spin0, (spin_rate_deg_s * tau).to_radians());
                prec.compose(&spin)
            }
        }
    }
}

// ---------------------------------------------------------------------
// scene configuration
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub fps: f64,
    pub duration_s: f64,
    /// Unit direction from the scene toward the sun, camera frame.
    pub sun_dir: Vec3,
    pub glare_strength: f64,
    pub noise_rgb: f64,
    pub noise_thermal: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// Desk-scale defaults: 64x64 px, f = 64 px, 10 Hz.
    pub fn desk_default(duration_s: f64, seed: u64) -> SceneConfig {
        SceneConfig {
            width: 64,
            height: 64,
            intrinsics: CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0),
            fps: 10.0,
            duration_s,
            sun_dir: normalize3(&[0.4, -0.5, -0.75]),
            glare_strength: 1.0,
            noise_rgb: 0.01,
            noise_thermal: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.fps <= 0.0 {
            return Err(SceneError::InvalidConfig("fps must be positive".into()));
        }
        let n = self.duration_s * self.fps;
        if (n - n.round()).abs() > 1e-9 {
            return Err(SceneError::InvalidConfig(format!(
                "duration*fps = {n} is not integral"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidConfig("empty image".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

// ---------------------------------------------------------------------
// trajectory
// ---------------------------------------------------------------------

const LATERAL_AMPLITUDE_FRAC: f64 = 0.02;
const LATERAL_PERIOD_X_S: f64 = 60.0;
const LATERAL_PERIOD_Y_S: f64 = 97.0;

/// Ground-truth pose at time tau: guidance profile along the boresight with
/// a small sinusoidal lateral offset, tumbling profile integrated
/// analytically.
pub fn pose_at(
    gp: &GuidanceProfile,
    tp: &TumblingProfile,
    duration_s: f64,
    tau: f64,
) -> Result<Pose, SceneError> {
    if !(0.0..=duration_s + 1e-9).contains(&tau) {
        return Err(SceneError::TauOutOfRange {
            tau,
            duration: duration_s,
        });
    }
    let range = match gp.kind {
        GuidanceKind::FixedRange { range_m } => range_m,
        GuidanceKind::ForcedTranslation { start_m, end_m } => {
            start_m + (end_m - start_m) * tau / duration_s
        }
    };
    let amp = LATERAL_AMPLITUDE_FRAC * range;
    let position = [
        amp * (std::f64::consts::TAU * tau / LATERAL_PERIOD_X_S).sin(),
        amp * (std::f64::consts::TAU * tau / LATERAL_PERIOD_Y_S + 1.0).sin(),
        range,
    ];
    Ok(Pose::new(tp.rotation_at(tau), position))
}

// ---------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------

const PHONG_EXPONENT: i32 = 32;
const EARTH_DISK_RGB: f64 = 0.7;
const EARTH_DISK_THERMAL: f64 = 0.35;

/// Renders one RGBT frame [4, H, W] in [0, 1]. Painter's algorithm: visible
/// faces sorted far-to-near, flat diffuse shading plus a per-pixel Phong
/// lobe, channel-independent Gaussian noise, deterministic for a seed.
/// V-bar approaches get a black background, R-bar a bright Earth disk.
pub fn render_frame(
    model: &TargetModel,
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &SceneConfig,
    approach: Approach,
    seed: u64,
) -> Tensor<f32> {
    let (w, h) = (cfg.width, cfg.height);
    let mut channels = vec![0.0f64; 4 * w * h];
    render_into(model, pose, k, cfg, approach, &mut channels);
    finalize(channels, cfg, seed, w, h)
}

fn render_into(
    model: &TargetModel,
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &SceneConfig,
    approach: Approach,
    channels: &mut [f64],
) {
    let (w, h) = (cfg.width, cfg.height);
    let plane = w * h;

    if approach == Approach::RBar {
        // uniform bright Earth disk low in the frame; photometric
        // interference only, no texture
        let cx = w as f64 / 2.0;
        let cy = h as f64 * 1.25;
        let radius = h as f64 * 0.9;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    for c in 0..3 {
                        channels[c * plane + y * w + x] = EARTH_DISK_RGB;
                    }
                    channels[3 * plane + y * w + x] = EARTH_DISK_THERMAL;
                }
            }
        }
    }

    // camera-frame vertices
    let cam_verts: Vec<Vec3> = model.vertices.iter().map(|v| pose.transform(v)).collect();
    let sun = normalize3(&cfg.sun_dir);

    // visible faces, far to near
    struct Drawn {
        face: usize,
        depth: f64,
    }
    let mut drawn: Vec<Drawn> = Vec::new();
    for (fi, tri) in model.faces.iter().enumerate() {
        let (a, b, c) = (cam_verts[tri[0]], cam_verts[tri[1]], cam_verts[tri[2]]);
        let n = cross3(&sub3(&b, &a), &sub3(&c, &a));
        let centroid = scale3(&add3(&add3(&a, &b), &c), 1.0 / 3.0);
        if dot3(&n, &centroid) >= 0.0 {
            continue; // back-facing
        }
        if a[2] <= Z_MIN || b[2] <= Z_MIN || c[2] <= Z_MIN {
            continue;
        }
        drawn.push(Drawn {
            face: fi,
            depth: centroid[2],
        });
    }
    drawn.sort_by(|x, y| y.depth.total_cmp(&x.depth).then(x.face.cmp(&y.face)));

    for d in &drawn {
        let tri = &model.faces[d.face];
        let (a, b, c) = (cam_verts[tri[0]], cam_verts[tri[1]], cam_verts[tri[2]]);
        let pa = [k.fx * a[0] / a[2] + k.cx, k.fy * a[1] / a[2] + k.cy];
        let pb = [k.fx * b[0] / b[2] + k.cx, k.fy * b[1] / b[2] + k.cy];
        let pc = [k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy];

        let n_hat = normalize3(&cross3(&sub3(&b, &a), &sub3(&c, &a)));
        let lambert = dot3(&n_hat, &sun).max(0.0);
        let diffuse = model.face_albedo[d.face] * lambert;
        let thermal = model.face_thermal[d.face];
        let spec_coeff = model.face_specular[d.face] * cfg.glare_strength;
        // reflection of the incident light direction about the normal
        let reflect = sub3(&scale3(&n_hat, 2.0 * dot3(&sun, &n_hat)), &sun);

        let min_x = pa[0].min(pb[0]).min(pc[0]).floor().max(0.0) as usize;
        let max_x = (pa[0].max(pb[0]).max(pc[0]).ceil() as usize).min(w);
        let min_y = pa[1].min(pb[1]).min(pc[1]).floor().max(0.0) as usize;
        let max_y = (pa[1].max(pb[1]).max(pc[1]).ceil() as usize).min(h);
        let area = edge(&pa, &pb, &pc);
        if area.abs() < 1e-12 {
            continue;
        }
        for y in min_y..max_y {
            for x in min_x..max_x {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let w0 = edge(&pb, &pc, &p) / area;
                let w1 = edge(&pc, &pa, &p) / area;
                let w2 = edge(&pa, &pb, &p) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // interpolated surface point for the view-dependent lobe
                let sp = [
                    w0 * a[0] + w1 * b[0] + w2 * c[0],
                    w0 * a[1] + w1 * b[1] + w2 * c[1],
                    w0 * a[2] + w1 * b[2] + w2 * c[2],
                ];
                let view = normalize3(&scale3(&sp, -1.0));
                let spec = if lambert > 0.0 && spec_coeff > 0.0 {
                    spec_coeff * dot3(&reflect, &view).max(0.0).powi(PHONG_EXPONENT)
                } else {
                    0.0
                };
                let rgb = diffuse + spec;
                let idx = y * w + x;
                for ch in 0..3 {
                    channels[ch * plane + idx] = rgb;
                }
                channels[3 * plane + idx] = thermal;
            }
        }
    }
}

/// Signed doubled area of (a, b, p); positive when p is left of a->b.
fn edge(a: &[f64; 2], b: &[f64; 2], p: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn finalize(mut channels: Vec<f64>, cfg: &SceneConfig, seed: u64, w: usize, h: usize) -> Tensor<f32> {
    let plane = w * h;
    let mut rng = Rng::seed_from(seed);
    // fixed draw order: channel-major, one normal per value, so the thermal
    // stream is independent of what the visible channels contain
    for ch in 0..4 {
        let sigma = if ch < 3 { cfg.noise_rgb } else { cfg.noise_thermal };
        for v in &mut channels[ch * plane..(ch + 1) * plane] {
            *v += rng.normal() * sigma;
        }
    }
    let data: Vec<f32> = channels
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(vec![4, h, w], data).unwrap()
}

// ---------------------------------------------------------------------
// sequence generation
// ---------------------------------------------------------------------

/// Renders a full sequence at tau = kappa/fps with per-frame seeds derived
/// from the config seed, so any frame regenerates independently. Frames are
/// rendered in parallel and assembled in order.
pub fn generate_sequence(
    id: &str,
    gp: &GuidanceProfile,
    tp: &TumblingProfile,
    model: &TargetModel,
    cfg: &SceneConfig,
) -> Result<Sequence, SceneError> {
    gp.validate()?;
    tp.validate()?;
    cfg.validate()?;
    let n = cfg.frame_count();
    let frames: Result<Vec<Frame>, SceneError> = (0..n)
        .into_par_iter()
        .map(|kappa| {
            let tau = kappa as f64 / cfg.fps;
            let pose = pose_at(gp, tp, cfg.duration_s, tau)?;
            let image = render_frame(
                model,
                &pose,
                &cfg.intrinsics,
                cfg,
                gp.approach,
                derive_seed(cfg.seed, kappa as u64),
            );
            Ok(Frame {
                index: kappa,
                time_s: tau,
                image,
                pose,
            })
        })
        .collect();
    Ok(Sequence {
        id: id.to_string(),
        intrinsics: cfg.intrinsics,
        fps: cfg.fps,
        frames: frames?,
        keypoints: model.keypoints.clone(),
        meta: ProfileMeta {
            guidance: gp.tag(),
            tumbling: tp.tag(),
            approach: gp.approach_tag().to_string(),
        },
    })
}

/// One entry of the benchmark dataset plan.
#[derive(Clone, Debug)]
pub struct SequencePlan {
    pub id: String,
    pub train: bool,
    pub guidance: GuidanceProfile,
    pub tumbling: TumblingProfile,
    /// Multiplier on the configured glare strength.
    pub glare_factor: f64,
    pub sun_dir: Vec3,
}

/// The fixed benchmark matrix: every guidance and tumbling profile appears
/// in training at least once, the held-out pair covers different
/// combinations, and `test00` is the strong-glare R-bar sequence used by
/// the ablation comparisons.
pub fn benchmark_plan(n_train: usize, n_test: usize) -> Vec<SequencePlan> {
    let fixed = |range_m: f64, approach| GuidanceProfile {
        kind: GuidanceKind::FixedRange { range_m },
        approach,
    };
    let trans = |start_m: f64, end_m: f64, approach| GuidanceProfile {
        kind: GuidanceKind::ForcedTranslation { start_m, end_m },
        approach,
    };
    let single = |axis: Vec3, rate_deg_s: f64| TumblingProfile::SingleAxis { axis, rate_deg_s };
    let two = |a1: Vec3, r1: f64, a2: Vec3, r2: f64| TumblingProfile::TwoAxis {
        axis1: a1,
        rate1_deg_s: r1,
        axis2: a2,
        rate2_deg_s: r2,
    };
    let prec = |tilt: f64, spin: f64, p: f64| TumblingProfile::Precession {
        tilt_deg: tilt,
        spin_rate_deg_s: spin,
        precession_rate_deg_min: p,
    };
    let train_pool = [
        (fixed(6.0, Approach::VBar), single([0.0, 1.0, 0.0], 6.0), 1.0, [0.4, -0.5, -0.75]),
        (fixed(6.5, Approach::RBar), single([1.0, 0.0, 0.4], 5.0), 1.0, [-0.3, -0.6, -0.74]),
        (trans(10.0, 5.0, Approach::VBar), two([0.0, 1.0, 0.0], 5.0, [1.0, 0.0, 0.0], 3.0), 1.0, [0.5, -0.3, -0.81]),
        (trans(9.0, 5.5, Approach::RBar), prec(45.0, 6.0, 30.0), 1.0, [0.2, -0.7, -0.68]),
        (fixed(7.5, Approach::RBar), two([0.3, 1.0, 0.2], 4.0, [0.0, 0.0, 1.0], 6.0), 1.2, [-0.5, -0.4, -0.77]),
        (trans(8.0, 4.5, Approach::VBar), single([0.6, 0.6, 0.5], 7.0), 1.0, [0.3, -0.55, -0.78]),
    ];
    let test_pool = [
        // the glare sequence: R-bar with boosted specular reflections
        (fixed(6.0, Approach::RBar), two([0.0, 1.0, 0.0], 6.0, [1.0, 0.0, 0.2], 4.0), 2.0, [0.45, -0.45, -0.77]),
        (trans(9.5, 5.0, Approach::VBar), prec(40.0, 5.0, 25.0), 1.0, [0.35, -0.5, -0.79]),
    ];
    let mut out = Vec::new();
    for i in 0..n_train {
        let (g, t, gf, sun) = train_pool[i % train_pool.len()].clone();
        out.push(SequencePlan {
            id: format!("train{i:02}"),
            train: true,
            guidance: g,
            tumbling: t,
            glare_factor: gf,
            sun_dir: normalize3(&sun),
        });
    }
    for i in 0..n_test {
        let (g, t, gf, sun) = test_pool[i % test_pool.len()].clone();
        out.push(SequencePlan {
            id: format!("test{i:02}"),
            train: false,
            guidance: g,
            tumbling: t,
            glare_factor: gf,
            sun_dir: normalize3(&sun),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{attitude_error, project, UnitQuaternion};

    #[test]
    fn default_target_keypoints() {
        let m = make_default_target();
        assert_eq!(m.keypoints.len(), 10);
        assert_eq!(m.keypoint_labels.len(), 10);
        assert_eq!(m.keypoint_rank(1e-9), 3, "keypoints must not be coplanar");
        let r = m.bounding_radius();
        assert!((2.4..2.7).contains(&r), "bounding radius {r}");
        assert_eq!(m.faces.len(), m.face_albedo.len());
        assert_eq!(m.faces.len(), m.face_specular.len());
        assert_eq!(m.faces.len(), m.face_thermal.len());
        assert!(m.keypoints.len() >= 6);
    }

    #[test]
    fn fixed_range_position_bound() {
        let gp = GuidanceProfile {
            kind: GuidanceKind::FixedRange { range_m: 50.0 },
            approach: Approach::VBar,
        };
        let tp = TumblingProfile::SingleAxis {
            axis: [0.0, 0.0, 1.0],
            rate_deg_s: 6.0,
        };
        for i in 0..100 {
            let tau = i as f64 * 1.2;
            let pose = pose_at(&gp, &tp, 120.0, tau).unwrap();
            let r = norm3(&pose.position);
            assert!((49.0..=51.0).contains(&r), "range {r} at tau {tau}");
        }
        assert!(pose_at(&gp, &tp, 120.0, 121.0).is_err());
    }

    #[test]
    fn single_axis_full_turn_is_identity() {
        let tp = TumblingProfile::SingleAxis {
            axis: [0.3, -0.7, 0.2],
            rate_deg_s: 6.0,
        };
        let r = tp.rotation_at(60.0); // 360 degrees
        let q = UnitQuaternion::from_rotation(&r);
        assert!(attitude_error(&q, &UnitQuaternion::identity()) < 1e-9);
    }

    #[test]
    fn two_axis_matches_quaternion_composition_oracle() {
        let (a1, r1) = ([1.0, 0.2, 0.0], 4.0f64);
        let (a2, r2) = ([0.0, -0.5, 1.0], 7.0f64);
        let tp = TumblingProfile::TwoAxis {
            axis1: a1,
            rate1_deg_s: r1,
            axis2: a2,
            rate2_deg_s: r2,
        };
        for tau in [0.0, 3.7, 11.0, 58.2] {
            let got = tp.rotation_at(tau);
            // oracle: quaternion axis-angle composition
            let q1 = axis_angle_quat(&a1, (r1 * tau).to_radians());
            let q2 = axis_angle_quat(&a2, (r2 * tau).to_radians());
            let want = q1.mul(&q2).to_rotation();
            for (x, y) in got.matrix().iter().zip(want.matrix()) {
                assert!((x - y).abs() < 1e-9, "tau {tau}");
            }
        }
    }

    fn axis_angle_quat(axis: &Vec3, angle: f64) -> UnitQuaternion {
        let u = normalize3(axis);
        let (s, c) = (angle / 2.0).sin_cos();
        UnitQuaternion::new_normalize([u[0] * s, u[1] * s, u[2] * s, c])
    }

    #[test]
    fn precession_moves_spin_axis() {
        let tp = TumblingProfile::Precession {
            tilt_deg: 45.0,
            spin_rate_deg_s: 6.0,
            precession_rate_deg_min: 3.59,
        };
        assert!(tp.validate().is_ok());
        // attitudes at different times differ
        let q0 = UnitQuaternion::from_rotation(&tp.rotation_at(10.0));
        let q1 = UnitQuaternion::from_rotation(&tp.rotation_at(40.0));
        assert!(attitude_error(&q0, &q1) > 0.1);
    }

    #[test]
    fn profile_validation_rejects_bad_values() {
        assert!(GuidanceProfile {
            kind: GuidanceKind::FixedRange { range_m: -1.0 },
            approach: Approach::VBar
        }
        .validate()
        .is_err());
        assert!(GuidanceProfile {
            kind: GuidanceKind::ForcedTranslation {
                start_m: 10.0,
                end_m: 20.0
            },
            approach: Approach::VBar
        }
        .validate()
        .is_err());
        assert!(TumblingProfile::SingleAxis {
            axis: [1.0, 0.0, 0.0],
            rate_deg_s: 0.0
        }
        .validate()
        .is_err());
        assert!(TumblingProfile::Precession {
            tilt_deg: 95.0,
            spin_rate_deg_s: 6.0,
            precession_rate_deg_min: 3.0
        }
        .validate()
        .is_err());
    }

    fn close_cfg(range: f64) -> (TargetModel, Pose, SceneConfig) {
        let model = make_default_target();
        let mut cfg = SceneConfig::desk_default(1.0, 7);
        cfg.noise_rgb = 0.01;
        cfg.noise_thermal = 0.01;
        let pose = Pose::new(
            Rotation::from_axis_angle(&[0.2, 1.0, 0.3], 0.8),
            [0.0, 0.0, range],
        );
        (model, pose, cfg)
    }

    #[test]
    fn same_seed_renders_identical_frames() {
        let (model, pose, cfg) = close_cfg(8.0);
        let a = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 99);
        let b = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 99);
        assert_eq!(a.data(), b.data());
        let c = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 100);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn sun_behind_target_darkens_rgb_but_not_thermal() {
        let model = make_default_target();
        let mut cfg = SceneConfig::desk_default(1.0, 3);
        cfg.glare_strength = 0.0;
        cfg.noise_rgb = 0.005;
        cfg.noise_thermal = 0.005;
        cfg.sun_dir = [0.0, 0.0, 1.0]; // sun beyond the target, backlighting it
        let pose = Pose::new(
            Rotation::from_axis_angle(&[0.3, 1.0, 0.0], 0.5),
            [0.0, 0.0, 5.0],
        );
        let img = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 11);
        let plane = 64 * 64;
        let rgb_mean: f32 =
            img.data()[..3 * plane].iter().sum::<f32>() / (3 * plane) as f32;
        let t_mean: f32 = img.data()[3 * plane..].iter().sum::<f32>() / plane as f32;
        assert!(rgb_mean < 0.05, "rgb mean {rgb_mean}");
        assert!(t_mean > 0.05, "thermal mean {t_mean}");
    }

    #[test]
    fn silhouette_area_scales_with_inverse_range() {
        let model = make_default_target();
        let mut cfg = SceneConfig::desk_default(1.0, 5);
        cfg.width = 128;
        cfg.height = 128;
        cfg.intrinsics = CameraIntrinsics::new(128.0, 128.0, 64.0, 64.0);
        cfg.noise_rgb = 0.0;
        cfg.noise_thermal = 0.0;
        let rot = Rotation::from_axis_angle(&[0.4, 1.0, 0.2], 0.9);
        let count_at = |range: f64| -> usize {
            let pose = Pose::new(rot, [0.0, 0.0, range]);
            let img = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 1);
            let plane = 128 * 128;
            img.data()[3 * plane..].iter().filter(|&&v| v > 0.1).count()
        };
        let far = count_at(16.0);
        let near = count_at(8.0);
        let ratio = near as f64 / far as f64;
        assert!(
            (3.2..=4.8).contains(&ratio),
            "area ratio {ratio} (near {near}, far {far})"
        );
    }

    #[test]
    fn thermal_invariant_to_sun_and_glare() {
        let (model, pose, mut cfg) = close_cfg(8.0);
        let a = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 42);
        cfg.sun_dir = normalize3(&[-0.8, 0.2, 0.3]);
        cfg.glare_strength = 0.0;
        let b = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, 42);
        let plane = 64 * 64;
        assert_eq!(
            &a.data()[3 * plane..],
            &b.data()[3 * plane..],
            "thermal channel must be pixelwise identical"
        );
        assert_ne!(&a.data()[..plane], &b.data()[..plane]);
    }

    #[test]
    fn rendered_bbox_contains_projected_visible_keypoints() {
        let model = make_default_target();
        let mut cfg = SceneConfig::desk_default(1.0, 9);
        cfg.noise_rgb = 0.0;
        cfg.noise_thermal = 0.0;
        for (i, angle) in [0.0f64, 0.7, 1.9, 2.8, 4.1].iter().enumerate() {
            let pose = Pose::new(
                Rotation::from_axis_angle(&[0.3, 1.0, -0.5], *angle),
                [0.2, -0.1, 7.0],
            );
            let img = render_frame(&model, &pose, &cfg.intrinsics, &cfg, Approach::VBar, i as u64);
            let plane = 64 * 64;
            let mut bbox: Option<(usize, usize, usize, usize)> = None;
            for y in 0..64 {
                for x in 0..64 {
                    let lit = (0..4).any(|c| img.data()[c * plane + y * 64 + x] > 0.02);
                    if lit {
                        bbox = Some(match bbox {
                            None => (x, x, y, y),
                            Some((x0, x1, y0, y1)) => {
                                (x0.min(x), x1.max(x), y0.min(y), y1.max(y))
                            }
                        });
                    }
                }
            }
            let (x0, x1, y0, y1) = bbox.expect("target visible");
            // visible keypoint: some front-facing face contains it AND that
            // face actually covers pixels (grazing slivers rasterize nothing)
            let cam_verts: Vec<Vec3> =
                model.vertices.iter().map(|v| pose.transform(v)).collect();
            for kp in &model.keypoints {
                let visible = model.faces.iter().any(|tri| {
                    let touches = tri
                        .iter()
                        .any(|&vi| norm3(&sub3(&model.vertices[vi], kp)) < 1e-9);
                    if !touches {
                        return false;
                    }
                    let (a, b, c) = (cam_verts[tri[0]], cam_verts[tri[1]], cam_verts[tri[2]]);
                    let n = cross3(&sub3(&b, &a), &sub3(&c, &a));
                    let centroid = scale3(&add3(&add3(&a, &b), &c), 1.0 / 3.0);
                    if dot3(&n, &centroid) >= 0.0 {
                        return false;
                    }
                    let pa = project(&cfg.intrinsics, &pose, &model.vertices[tri[0]]).unwrap();
                    let pb = project(&cfg.intrinsics, &pose, &model.vertices[tri[1]]).unwrap();
                    let pc = project(&cfg.intrinsics, &pose, &model.vertices[tri[2]]).unwrap();
                    edge(&pa, &pb, &pc).abs() / 2.0 >= 1.0
                });
                if !visible {
                    continue;
                }
                let z = project(&cfg.intrinsics, &pose, kp).expect("in front");
                // 2 px slack: pixel-center sampling leaves the tapering tip
                // of a triangle unlit for up to ~2 px around its corner
                assert!(
                    z[0] >= x0 as f64 - 2.0
                        && z[0] <= (x1 + 1) as f64 + 2.0
                        && z[1] >= y0 as f64 - 2.0
                        && z[1] <= (y1 + 1) as f64 + 2.0,
                    "keypoint {z:?} outside bbox ({x0},{y0})-({x1},{y1}) at angle {angle}"
                );
            }
        }
    }

    #[test]
    fn generate_sequence_cadence_and_ground_truth() {
        let model = make_default_target();
        let mut cfg = SceneConfig::desk_default(120.0, 77);
        cfg.width = 8;
        cfg.height = 8;
        cfg.intrinsics = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0);
        let gp = GuidanceProfile {
            kind: GuidanceKind::ForcedTranslation {
                start_m: 50.0,
                end_m: 25.0,
            },
            approach: Approach::RBar,
        };
        let tp = TumblingProfile::SingleAxis {
            axis: [0.0, 1.0, 0.0],
            rate_deg_s: 6.0,
        };
        let seq = generate_sequence("t00", &gp, &tp, &model, &cfg).unwrap();
        assert_eq!(seq.len(), 1200, "120 s at 10 Hz");
        seq.validate().unwrap();
        // ground truth poses satisfy pose_at exactly
        for f in seq.frames.iter().step_by(251) {
            let want = pose_at(&gp, &tp, cfg.duration_s, f.time_s).unwrap();
            assert_eq!(f.pose.position, want.position);
            assert_eq!(f.pose.rotation.matrix(), want.rotation.matrix());
        }
        // regeneration is bitwise identical
        let again = generate_sequence("t00", &gp, &tp, &model, &cfg).unwrap();
        for (a, b) in seq.frames.iter().zip(&again.frames) {
            assert_eq!(a.image.data(), b.image.data());
        }
        // forced translation: range strictly decreases up to the ripple
        let r0 = norm3(&seq.frames[0].pose.position);
        let r_mid = norm3(&seq.frames[600].pose.position);
        let r_end = norm3(&seq.frames[1199].pose.position);
        assert!(r0 > r_mid && r_mid > r_end);
    }
}
