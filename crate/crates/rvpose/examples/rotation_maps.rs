//! Attitude representations in action: the 6D <-> SO(3) Gram-Schmidt map,
//! quaternion metrics and viewsphere classes.
//! `cargo run --release --example rotation_maps`

use rvpose::diffcore::Rng;
use rvpose::geometry::{
    attitude_error, rotation_to_sixd, sixd_to_rotation, viewsphere_class, Rotation, SixD,
    UnitQuaternion, ViewsphereGrid,
};

fn main() {
    let mut rng = Rng::seed_from(2024);

    // an arbitrary unconstrained 6-vector still lands on SO(3)
    let raw = SixD([0.9, -0.2, 2.0, -1.0, 0.4, 0.3]);
    let rot = sixd_to_rotation(&raw).unwrap();
    println!("raw 6D {:?}", raw.0);
    println!("maps to rotation rows:");
    for r in rot.matrix().chunks(3) {
        println!("  [{:+.4} {:+.4} {:+.4}]", r[0], r[1], r[2]);
    }
    println!("det = {:.9}\n", rot.det());

    // round trip through the representation is exact on orthonormal input
    let back = sixd_to_rotation(&rotation_to_sixd(&rot)).unwrap();
    let drift: f64 = rot
        .matrix()
        .iter()
        .zip(back.matrix())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("round-trip max drift: {drift:.2e}");

    // the attitude metric agrees with the trace formula and ignores the
    // quaternion double cover
    let a = Rotation::random(&mut rng);
    let b = Rotation::random(&mut rng);
    let qa = UnitQuaternion::from_rotation(&a);
    let qb = UnitQuaternion::from_rotation(&b);
    let dq = attitude_error(&qa, &qb);
    let trace = {
        let rel = a.transpose().compose(&b);
        let m = rel.matrix();
        (((m[0] + m[4] + m[8]) - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    };
    println!(
        "attitude error {:.6} deg (trace formula {:.6}, antipodal {:.6})",
        dq.to_degrees(),
        trace.to_degrees(),
        attitude_error(&qa.negated(), &qb).to_degrees()
    );

    // viewsphere classes over a slow tumble
    let grid = ViewsphereGrid::new(30, 30).unwrap();
    println!(
        "\n30x30 viewsphere grid: {} classes; a 6 deg/s y-tumble visits:",
        grid.class_count()
    );
    let mut seen = Vec::new();
    for step in 0..60 {
        let rot = Rotation::from_axis_angle(&[0.0, 1.0, 0.0], (step as f64 * 6.0).to_radians());
        let class = viewsphere_class(&rot, &grid);
        if seen.last() != Some(&class) {
            seen.push(class);
        }
    }
    println!("  {seen:?}");
}
