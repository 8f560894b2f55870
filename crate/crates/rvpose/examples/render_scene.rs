//! Renders RGBT frames of the default target and prints them as ASCII,
//! showing the glare lobe on the panel and the sun-independent thermal
//! channel. `cargo run --release --example render_scene`

use rvpose::geometry::{CameraIntrinsics, Pose, Rotation};
use rvpose::scenegen::{make_default_target, render_frame, Approach, SceneConfig};

fn ascii(img: &rvpose::diffcore::Tensor<f32>, channel: usize, w: usize, h: usize) -> String {
    let ramp: &[u8] = b" .:-=+*#%@";
    let plane = w * h;
    let mut out = String::new();
    for y in (0..h).step_by(2) {
        for x in 0..w {
            let v = img.data()[channel * plane + y * w + x].clamp(0.0, 1.0);
            let idx = ((v * (ramp.len() - 1) as f32).round()) as usize;
            out.push(ramp[idx] as char);
        }
        out.push('\n');
    }
    out
}

fn main() {
    let target = make_default_target();
    println!(
        "target: {} vertices, {} faces, {} keypoints, bounding radius {:.2} m",
        target.vertices.len(),
        target.faces.len(),
        target.keypoints.len(),
        target.bounding_radius()
    );

    let (w, h) = (56usize, 40usize);
    let mut cfg = SceneConfig::desk_default(1.0, 11);
    cfg.width = w;
    cfg.height = h;
    cfg.intrinsics = CameraIntrinsics::new(52.0, 52.0, w as f64 / 2.0, h as f64 / 2.0);
    cfg.noise_rgb = 0.0;
    cfg.noise_thermal = 0.0;
    cfg.glare_strength = 1.5;

    let pose = Pose::new(
        Rotation::from_axis_angle(&[0.25, 1.0, 0.1], 0.9),
        [0.0, 0.1, 4.2],
    );
    let img = render_frame(&target, &pose, &cfg.intrinsics, &cfg, Approach::RBar, 3);
    println!("\nvisible channel (R-bar: Earth disk below, glare on the panel):");
    print!("{}", ascii(&img, 0, w, h));
    println!("thermal channel (same pose, sun-independent):");
    print!("{}", ascii(&img, 3, w, h));

    // the thermal channel does not move when the sun does
    let mut cfg2 = cfg;
    cfg2.sun_dir = rvpose::geometry::normalize3(&[-0.7, 0.3, -0.2]);
    let img2 = render_frame(&target, &pose, &cfg2.intrinsics, &cfg2, Approach::RBar, 3);
    let plane = w * h;
    let rgb_delta: f32 = img.data()[..plane]
        .iter()
        .zip(&img2.data()[..plane])
        .map(|(a, b)| (a - b).abs())
        .sum();
    let t_delta: f32 = img.data()[3 * plane..]
        .iter()
        .zip(&img2.data()[3 * plane..])
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("moving the sun: total visible-channel change {rgb_delta:.1}, thermal change {t_delta:.1}");
}
