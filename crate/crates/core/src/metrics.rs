//! Overlap and surface-distance scores per class.
//!
//! Conventions: two empty sets have DSC 1 and precision 1; an empty
//! prediction against a non-empty ground truth has precision 0. SSD is
//! undefined (an error) when either boundary is empty, and such classes are
//! left out of the SSD mean. Background (class 0) is never averaged.

use crate::error::{Error, Result};
use crate::fusion::SegMask;

fn counts(pred: &SegMask, gt: &SegMask, class_id: u32) -> Result<(usize, usize, usize)> {
    pred.same_extents(gt)?;
    let (mut both, mut in_pred, mut in_gt) = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == class_id, g == class_id);
        both += (p && g) as usize;
        in_pred += p as usize;
        in_gt += g as usize;
    }
    Ok((both, in_pred, in_gt))
}

/// `2 |S ∩ Y| / (|S| + |Y|)`.
pub fn dsc(pred: &SegMask, gt: &SegMask, class_id: u32) -> Result<f64> {
    let (both, s, y) = counts(pred, gt, class_id)?;
    if s + y == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (s + y) as f64)
}

/// `TP / (TP + FP)`.
pub fn precision(pred: &SegMask, gt: &SegMask, class_id: u32) -> Result<f64> {
    let (tp, s, y) = counts(pred, gt, class_id)?;
    if s == 0 {
        return Ok(if y == 0 { 1.0 } else { 0.0 });
    }
    Ok(tp as f64 / s as f64)
}

/// Class pixels with a 4-neighbour outside the class; the image border counts
/// as outside.
pub fn boundary(mask: &SegMask, class_id: u32) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |i: usize, j: usize| mask.get(i, j) == class_id;
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if !inside(i, j) {
                continue;
            }
            out[i * w + j] = i == 0
                || j == 0
                || i + 1 == h
                || j + 1 == w
                || !inside(i - 1, j)
                || !inside(i + 1, j)
                || !inside(i, j - 1)
                || !inside(i, j + 1);
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let intersect = |k: usize| {
            let p = v[k] as f64;
            ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p)
        };
        let mut s = intersect(k);
        // z[0] is -inf, so this stops at k = 0
        while s <= z[k] {
            k -= 1;
            s = intersect(k);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in pixels) from every pixel to the nearest
/// `true` site. Exact for integer grids.
fn squared_distance_map(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut buf_in = vec![0.0; n];
    let mut buf_out = vec![0.0; n];
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    for j in 0..w {
        for i in 0..h {
            buf_in[i] = grid[i * w + j];
        }
        edt_1d(&buf_in[..h], &mut buf_out[..h], &mut v, &mut z);
        for i in 0..h {
            grid[i * w + j] = buf_out[i];
        }
    }
    for i in 0..h {
        buf_in[..w].copy_from_slice(&grid[i * w..(i + 1) * w]);
        edt_1d(&buf_in[..w], &mut buf_out[..w], &mut v, &mut z);
        grid[i * w..(i + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    grid
}

/// Symmetric surface distance between the class boundaries, in units of
/// `spacing` per pixel.
pub fn ssd(pred: &SegMask, gt: &SegMask, class_id: u32, spacing: f64) -> Result<f64> {
    pred.same_extents(gt)?;
    let (h, w) = (pred.height(), pred.width());
    let bs = boundary(pred, class_id);
    let by = boundary(gt, class_id);
    let ns = bs.iter().filter(|&&b| b).count();
    let ny = by.iter().filter(|&&b| b).count();
    if ns == 0 || ny == 0 {
        return Err(Error::EmptyBoundary(format!(
            "class {class_id}: prediction boundary has {ns} pixels, ground truth {ny}"
        )));
    }
    let to_y = squared_distance_map(&by, h, w);
    let to_s = squared_distance_map(&bs, h, w);
    let mut total = 0.0;
    for (px, _) in bs.iter().enumerate().filter(|(_, &b)| b) {
        total += to_y[px].sqrt() * spacing;
    }
    for (px, _) in by.iter().enumerate().filter(|(_, &b)| b) {
        total += to_s[px].sqrt() * spacing;
    }
    Ok(total / (ns + ny) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub dsc: f64,
    pub precision: f64,
    /// `None` when a boundary is empty.
    pub ssd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub a_dsc: f64,
    pub a_preci: f64,
    /// Mean over classes with a defined SSD; `None` if there are none.
    pub a_ssd: Option<f64>,
    pub spacing: f64,
}

/// Per-class scores for classes `1..c` and their arithmetic means.
pub fn evaluate(pred: &SegMask, gt: &SegMask, c: usize, spacing: f64) -> Result<MetricsReport> {
    pred.same_extents(gt)?;
    if c < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {c}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing}")));
    }
    for m in [pred, gt] {
        if let Some(&bad) = m.labels().iter().find(|&&l| l as usize >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
    }
    let mut per_class = Vec::with_capacity(c - 1);
    for class_id in 1..c as u32 {
        let ssd = match ssd(pred, gt, class_id, spacing) {
            Ok(v) => Some(v),
            Err(Error::EmptyBoundary(_)) => None,
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            class_id,
            dsc: dsc(pred, gt, class_id)?,
            precision: precision(pred, gt, class_id)?,
            ssd,
        });
    }
    let n = per_class.len() as f64;
    let a_dsc = per_class.iter().map(|m| m.dsc).sum::<f64>() / n;
    let a_preci = per_class.iter().map(|m| m.precision).sum::<f64>() / n;
    let defined: Vec<f64> = per_class.iter().filter_map(|m| m.ssd).collect();
    let a_ssd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MetricsReport {
        per_class,
        a_dsc,
        a_preci,
        a_ssd,
        spacing,
    })
}
