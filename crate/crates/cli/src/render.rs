//! Raster previews of a deformation: the warped lattice and the Jacobian map.

use flowreg::{Image, JacobianMap, Result, Shape, VoxelCloud};

/// In-plane view of a cloud. 3D clouds are cut through the middle of axis 0.
struct Plane {
    height: usize,
    width: usize,
    ys: Vec<f64>,
    xs: Vec<f64>,
}

impl Plane {
    fn of(cloud: &VoxelCloud) -> Plane {
        let e = cloud.shape().extents();
        let (height, width) = (e[e.len() - 2], e[e.len() - 1]);
        let n = height * width;
        let offset = if e.len() == 3 { (e[0] / 2) * n } else { 0 };
        let d = cloud.ndim();
        Plane {
            height,
            width,
            ys: cloud.component(d - 2)[offset..offset + n].to_vec(),
            xs: cloud.component(d - 1)[offset..offset + n].to_vec(),
        }
    }

    fn point(&self, y: usize, x: usize) -> (f64, f64) {
        let v = y * self.width + x;
        (self.ys[v], self.xs[v])
    }
}

/// Indices `0, k, 2k, ...` plus the last index, so the frame is always drawn.
fn line_indices(extent: usize, spacing: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..extent).step_by(spacing).collect();
    if idx.last() != Some(&(extent - 1)) {
        idx.push(extent - 1);
    }
    idx
}

fn draw_segment(raster: &mut [f64], height: usize, width: usize, a: (f64, f64), b: (f64, f64)) {
    if ![a.0, a.1, b.0, b.1].iter().all(|c| c.is_finite()) {
        return;
    }
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let n = dy.abs().max(dx.abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (y, x) = ((a.0 + t * dy).round(), (a.1 + t * dx).round());
        if y >= 0.0 && x >= 0.0 && (y as usize) < height && (x as usize) < width {
            raster[y as usize * width + x as usize] = 1.0;
        }
    }
}

/// White-on-black raster of every `spacing`-th lattice line mapped through
/// the cloud, one pixel wide.
pub fn grid_image(cloud: &VoxelCloud, spacing: usize) -> Result<Image> {
    if spacing == 0 {
        return Err(flowreg::Error::Parameter("grid spacing must be >= 1".into()));
    }
    let p = Plane::of(cloud);
    let (h, w) = (p.height, p.width);
    let mut raster = vec![0.0; h * w];
    for y in line_indices(h, spacing) {
        for x in 1..w {
            draw_segment(&mut raster, h, w, p.point(y, x - 1), p.point(y, x));
        }
    }
    for x in line_indices(w, spacing) {
        for y in 1..h {
            draw_segment(&mut raster, h, w, p.point(y - 1, x), p.point(y, x));
        }
    }
    Image::new(Shape::new(&[h, w])?, raster)
}

/// Determinants scaled from `[0, 2 * median]` to `[0, 1]`.
pub fn jacobian_image(jac: &JacobianMap) -> Result<Image> {
    let e = jac.shape().extents();
    let (h, w) = (e[e.len() - 2], e[e.len() - 1]);
    let offset = if e.len() == 3 { (e[0] / 2) * h * w } else { 0 };
    let slice = &jac.dets()[offset..offset + h * w];
    let mut sorted = slice.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let top = if median > 0.0 { 2.0 * median } else { 2.0 };
    Image::new(
        Shape::new(&[h, w])?,
        slice.iter().map(|d| (d / top).clamp(0.0, 1.0)).collect(),
    )
}
