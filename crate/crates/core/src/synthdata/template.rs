//! The base 83-point face layout.
//!
//! Coordinates are millimetre-like: +x is the face's right, +y up, +z out of
//! the face. The layout is mirror-symmetric about x = 0 and centred on its
//! centroid. Its sign quadrants hold 23 (upper right), 23 (upper left),
//! 17 + 3 midline (lower right) and 17 (lower left) landmarks.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::shape::LandmarkSet;

/// Points for the face's right side (x > 0) of one feature group.
fn right_side(group: &mut Vec<Vector3<f64>>, pts: impl IntoIterator<Item = (f64, f64, f64)>) {
    group.extend(pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)));
}

fn upper_right() -> Vec<Vector3<f64>> {
    let mut v = Vec::new();
    // Eyebrow: an arc of ten points.
    right_side(
        &mut v,
        (0..10).map(|k| {
            let s = k as f64 / 9.0;
            let x = 12.0 + 46.0 * s;
            (x, 38.0 + 7.0 * (PI * s).sin(), 18.0 - 0.004 * x * x)
        }),
    );
    // Eye outline.
    right_side(
        &mut v,
        (0..8).map(|k| {
            let a = PI / 8.0 + k as f64 * PI / 4.0;
            let x = 32.0 + 13.0 * a.cos();
            (x, 22.0 + 5.5 * a.sin(), 8.0 - 0.003 * x * x)
        }),
    );
    // Side of the nose bridge, running down towards the tip.
    right_side(
        &mut v,
        (0..5).map(|k| {
            let j = k as f64;
            (6.0 + 1.5 * j, 30.0 - 6.0 * j, 18.0 + 5.0 * j)
        }),
    );
    v
}

fn lower_right() -> Vec<Vector3<f64>> {
    let mut v = Vec::new();
    // Nostril.
    right_side(&mut v, [(9.0, -6.0, 22.0)]);
    // Outer lip: two upper, the corner, two lower.
    right_side(
        &mut v,
        [30.0f64, 65.0, 0.0, -30.0, -65.0].map(|deg| {
            let a = deg.to_radians();
            let x = 26.0 * a.cos();
            (x, -31.0 + 9.0 * a.sin(), 16.0 - 0.01 * x * x)
        }),
    );
    // Inner lip.
    right_side(
        &mut v,
        [20.0f64, 60.0, -20.0, -60.0].map(|deg| {
            let a = deg.to_radians();
            let x = 16.0 * a.cos();
            (x, -31.0 + 3.5 * a.sin(), 15.0 - 0.01 * x * x)
        }),
    );
    // Jaw contour from near the chin up towards the cheek.
    right_side(
        &mut v,
        (0..7).map(|k| {
            let a = (-90.0 + 11.25 * (k + 1) as f64).to_radians();
            let c = a.cos();
            (68.0 * c, -10.0 + 75.0 * a.sin(), 5.0 - 20.0 * c)
        }),
    );
    v
}

fn mirror(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.y, p.z)
}

/// The template in index order: upper right (0..23), upper left (23..46),
/// lower right (46..63), lower midline (63..66), lower left (66..83).
pub fn template() -> LandmarkSet {
    let ur = upper_right();
    let lr = lower_right();
    let midline = [
        Vector3::new(0.0, -22.0, 18.0),
        Vector3::new(0.0, -40.0, 17.0),
        Vector3::new(0.0, -85.0, 5.0),
    ];
    let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(83);
    pts.extend(ur.iter().copied());
    pts.extend(ur.iter().map(mirror));
    pts.extend(lr.iter().copied());
    pts.extend(midline);
    pts.extend(lr.iter().map(mirror));
    // Centre on the centroid; x is already balanced by symmetry.
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let shift = Vector3::new(0.0, c.y, c.z);
    LandmarkSet::new(pts.into_iter().map(|p| p - shift).collect()).expect("template is valid")
}
