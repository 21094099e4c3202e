//! Synthetic 64x64 image pairs for demos and end-to-end checks.
//!
//! Shapes are drawn from signed distances with a short linear ramp at the
//! edge, so intensities are in `[0, 1]` and every edge has a usable gradient.

use serde::{Deserialize, Serialize};

use crate::grid::{Image, LabelMap, Shape};

pub const SIZE: usize = 64;
const RAMP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoPair {
    /// Moving donut, fixed filled circle.
    DonutCircle,
    /// Moving square, fixed cross.
    SquareCross,
    /// Two separate blobs that move apart and grow.
    TwoBlobs,
    /// Brain-like phantom and a smoothly deformed copy.
    BrainSlice,
}

impl DemoPair {
    pub const ALL: [DemoPair; 4] = [
        DemoPair::DonutCircle,
        DemoPair::SquareCross,
        DemoPair::TwoBlobs,
        DemoPair::BrainSlice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemoPair::DonutCircle => "donut_circle",
            DemoPair::SquareCross => "square_cross",
            DemoPair::TwoBlobs => "two_blobs",
            DemoPair::BrainSlice => "brain_slice",
        }
    }

    /// `(fixed, moving)`.
    pub fn images(self) -> (Image, Image) {
        match self {
            DemoPair::DonutCircle => (render(|y, x| circle(y, x, 32.0, 32.0, 17.0)), render(donut)),
            DemoPair::SquareCross => (render(cross), render(|y, x| rect(y, x, 32.0, 32.0, 12.0, 12.0))),
            DemoPair::TwoBlobs => (
                render(|y, x| circle(y, x, 32.0, 17.0, 9.0).max(circle(y, x, 32.0, 47.0, 9.0))),
                render(|y, x| circle(y, x, 32.0, 22.0, 7.0).max(circle(y, x, 32.0, 42.0, 7.0))),
            ),
            DemoPair::BrainSlice => (brain_image(identity), brain_image(brain_warp)),
        }
    }
}

fn shape() -> Shape {
    Shape::new(&[SIZE, SIZE]).expect("valid fixture shape")
}

fn render(sdf: impl Fn(f64, f64) -> f64) -> Image {
    Image::from_fn(shape(), |p| ramp(sdf(p[0] as f64, p[1] as f64))).expect("finite fixture")
}

fn ramp(d: f64) -> f64 {
    (0.5 + d / RAMP).clamp(0.0, 1.0)
}

/// Positive inside.
fn circle(y: f64, x: f64, cy: f64, cx: f64, r: f64) -> f64 {
    r - ((y - cy).powi(2) + (x - cx).powi(2)).sqrt()
}

fn rect(y: f64, x: f64, cy: f64, cx: f64, hy: f64, hx: f64) -> f64 {
    (hy - (y - cy).abs()).min(hx - (x - cx).abs())
}

fn donut(y: f64, x: f64) -> f64 {
    circle(y, x, 32.0, 32.0, 12.0).min(-circle(y, x, 32.0, 32.0, 4.0))
}

fn cross(y: f64, x: f64) -> f64 {
    rect(y, x, 32.0, 32.0, 20.0, 6.0).max(rect(y, x, 32.0, 32.0, 6.0, 20.0))
}

fn identity(y: f64, x: f64) -> (f64, f64) {
    (y, x)
}

/// Smooth displacement used to derive the moving brain slice.
fn brain_warp(y: f64, x: f64) -> (f64, f64) {
    let (u, v) = ((y - 32.0) / 32.0, (x - 32.0) / 32.0);
    (
        y + 2.5 * (std::f64::consts::PI * v).sin() * (1.0 - u * u),
        x - 2.0 * (std::f64::consts::PI * u).sin() * (1.0 - v * v) + 1.0,
    )
}

/// Brain tissue classes: 0 background, 1 cortex, 2 white matter, 3 ventricles.
fn brain_class(y: f64, x: f64) -> (u16, f64) {
    let (u, v) = ((y - 32.0) / 26.0, (x - 32.0) / 22.0);
    let r = (u * u + v * v).sqrt();
    let theta = u.atan2(v);
    let outer = 1.0 - r;
    let inner = 0.72 + 0.06 * (6.0 * theta).cos() - r;
    let vent = |cx: f64| {
        let (a, b) = ((y - 30.0) / 7.0, (x - cx) / 2.6);
        1.0 - (a * a + b * b).sqrt()
    };
    let ventricle = vent(28.5).max(vent(35.5));
    if ventricle > 0.0 {
        (3, ventricle)
    } else if inner > 0.0 {
        (2, inner)
    } else if outer > 0.0 {
        (1, outer)
    } else {
        (0, outer)
    }
}

fn brain_image(map: fn(f64, f64) -> (f64, f64)) -> Image {
    Image::from_fn(shape(), |p| {
        let (y, x) = map(p[0] as f64, p[1] as f64);
        // average a 4x4 supersample to soften the class edges
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let (sy, sx) = (y + (i as f64 - 1.5) / 4.0, x + (j as f64 - 1.5) / 4.0);
                acc += match brain_class(sy, sx).0 {
                    0 => 0.0,
                    1 => 0.55,
                    2 => 0.9,
                    _ => 0.2,
                };
            }
        }
        acc / 16.0
    })
    .expect("finite fixture")
}

fn brain_labels(map: fn(f64, f64) -> (f64, f64)) -> LabelMap {
    let s = shape();
    let labels = (0..s.len())
        .map(|v| {
            let p = s.unravel(v);
            let (y, x) = map(p[0] as f64, p[1] as f64);
            brain_class(y, x).0
        })
        .collect();
    LabelMap::new(s, labels).expect("fixture labels")
}

/// Tissue label maps `(fixed, moving)` of the brain slice pair.
pub fn brain_slice_labels() -> (LabelMap, LabelMap) {
    (brain_labels(identity), brain_labels(brain_warp))
}
