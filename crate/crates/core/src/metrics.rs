//! Overlap, folding and topology measures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{jacobian_det_map, Image, LabelMap, Shape, VoxelCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Dice per requested label that occurs in at least one map.
    pub per_label: BTreeMap<u16, f64>,
    /// Unweighted mean over `per_label`; `None` when no requested label occurs.
    pub mean: Option<f64>,
}

/// Dice coefficient `2|A∩B| / (|A|+|B|)` for each label.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u16]) -> Result<DiceReport> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(a.shape(), b.shape()));
    }
    if labels.is_empty() {
        return Err(Error::Parameter("dice needs at least one label".into()));
    }
    let mut per_label = BTreeMap::new();
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.labels().iter().zip(b.labels()) {
            na += usize::from(x == l);
            nb += usize::from(y == l);
            both += usize::from(x == l && y == l);
        }
        if na + nb > 0 {
            per_label.insert(l, 2.0 * both as f64 / (na + nb) as f64);
        }
    }
    let mean = (!per_label.is_empty()).then(|| per_label.values().sum::<f64>() / per_label.len() as f64);
    Ok(DiceReport { per_label, mean })
}

/// Sorted non-zero labels occurring in either map.
pub fn foreground_labels(a: &LabelMap, b: &LabelMap) -> Vec<u16> {
    let mut seen: Vec<u16> = a.labels().iter().chain(b.labels()).copied().filter(|&l| l != 0).collect();
    seen.sort_unstable();
    seen.dedup();
    seen
}

/// Fraction of voxels whose Jacobian determinant is `<= 0`.
pub fn neg_jacobian_ratio(cloud: &VoxelCloud) -> f64 {
    let map = jacobian_det_map(cloud);
    let bad = map.dets().iter().filter(|&&d| d <= 0.0).count();
    bad as f64 / map.dets().len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    /// Foreground components, any shared face, edge or corner connecting.
    pub components: usize,
    /// Background components that do not reach the image border, face-connected.
    pub holes: usize,
}

/// Counts components and enclosed holes of `image > threshold`.
pub fn topology(image: &Image, threshold: f64) -> Topology {
    let shape = image.shape();
    let fg: Vec<bool> = image.values().iter().map(|&x| x > threshold).collect();
    let (components, _) = label_components(shape, &fg, true);
    let bg: Vec<bool> = fg.iter().map(|x| !x).collect();
    let (_, touches) = label_components(shape, &bg, false);
    Topology {
        components,
        holes: touches.iter().filter(|&&t| !t).count(),
    }
}

/// Flood-fills the `true` voxels. Returns the component count and, per
/// component, whether it touches the border.
fn label_components(shape: &Shape, set: &[bool], full: bool) -> (usize, Vec<bool>) {
    let d = shape.ndim();
    let offsets: Vec<Vec<isize>> = (0..3usize.pow(d as u32))
        .map(|mut k| {
            (0..d)
                .map(|_| {
                    let o = (k % 3) as isize - 1;
                    k /= 3;
                    o
                })
                .collect::<Vec<_>>()
        })
        .filter(|o: &Vec<isize>| {
            let nz = o.iter().filter(|&&x| x != 0).count();
            nz > 0 && (full || nz == 1)
        })
        .collect();
    let extents = shape.extents();
    let strides = shape.strides();
    let mut seen = vec![false; set.len()];
    let mut touches = Vec::new();
    let mut stack = Vec::new();
    for start in 0..set.len() {
        if !set[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut border = false;
        while let Some(v) = stack.pop() {
            border |= shape.on_face(v);
            let p = shape.unravel(v);
            'next: for o in &offsets {
                let mut u = 0;
                for a in 0..d {
                    let c = p[a] as isize + o[a];
                    if c < 0 || c >= extents[a] as isize {
                        continue 'next;
                    }
                    u += c as usize * strides[a];
                }
                if set[u] && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        touches.push(border);
    }
    (touches.len(), touches)
}
