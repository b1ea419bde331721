//! Turning feature maps into label maps, and mask post-processing.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer label map with `classes` possible labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u32>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Size(format!("mask extents {height}x{width}")));
        }
        if labels.len() != height * width {
            return Err(Error::Size(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, label: u32) -> Result<Self> {
        Self::new(height, width, classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.width + j]
    }

    pub fn count(&self, class_id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    /// Same labels under a larger class count (used when comparing masks
    /// produced with different class budgets).
    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        Self::new(self.height, self.width, classes, self.labels.clone())
    }

    pub(crate) fn same_extents(&self, other: &SegMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(&[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }
}

fn spatial(u: &Tensor) -> Result<(usize, usize, usize)> {
    match u.shape() {
        [h, w] => Ok((1, *h, *w)),
        [d, h, w] => Ok((*d, *h, *w)),
        s => Err(Error::invalid(format!("expected d x H x W features, got {s:?}"))),
    }
}

/// Label = number of thresholds strictly below the pixel value.
pub fn threshold_segment(u: &Tensor, thresholds: &[f64]) -> Result<SegMask> {
    let (d, h, w) = spatial(u)?;
    if d != 1 {
        return Err(Error::invalid(format!("thresholding needs one channel, got {d}")));
    }
    if thresholds.windows(2).any(|p| p[0].partial_cmp(&p[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::invalid("thresholds must be strictly ascending"));
    }
    let labels = u
        .data()
        .iter()
        .map(|&v| thresholds.partition_point(|&t| t < v) as u32)
        .collect();
    SegMask::new(h, w, thresholds.len() + 1, labels)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means over per-pixel `d`-vectors with k-means++ seeding.
///
/// Output labels are renumbered so centroids ascend lexicographically, which
/// makes the result independent of the seeding order.
pub fn kmeans_segment(u: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<SegMask> {
    let (d, h, w) = spatial(u)?;
    if k < 2 {
        return Err(Error::invalid(format!("k must be >= 2, got {k}")));
    }
    let n = h * w;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|px| (0..d).map(|c| u.data()[c * n + px]).collect())
        .collect();

    let mut distinct = points.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} distinct pixel values",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &dd) in nearest.iter().enumerate() {
                if target < dd {
                    pick = i;
                    break;
                }
                target -= dd;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].clone();
        for (nd, p) in nearest.iter_mut().zip(&points) {
            *nd = nd.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&points) {
            let best = (0..k)
                .min_by(|&x, &y| {
                    sq_dist(p, &centroids[x])
                        .partial_cmp(&sq_dist(p, &centroids[y]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(&points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        centroids[a]
            .partial_cmp(&centroids[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rank = vec![0u32; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r as u32;
    }
    SegMask::new(h, w, k, assign.iter().map(|&a| rank[a]).collect())
}

/// 4-connected components of the pixels where `member` holds, in scan order
/// of their first pixel.
fn components(h: usize, w: usize, member: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(px) = queue.pop_front() {
            comp.push(px);
            let (i, j) = (px / w, px % w);
            let mut visit = |q: usize| {
                if !seen[q] && member(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(px - w);
            }
            if i + 1 < h {
                visit(px + w);
            }
            if j > 0 {
                visit(px - 1);
            }
            if j + 1 < w {
                visit(px + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Keeps only the largest 4-connected component of `class_id`, relabelling the
/// rest to background 0. Ties go to the component whose first pixel comes
/// first in scan order.
///
/// The flag is `false` (and the mask is returned unchanged) when the class
/// does not occur.
pub fn largest_component(mask: &SegMask, class_id: u32) -> (SegMask, bool) {
    let (h, w) = (mask.height, mask.width);
    let comps = components(h, w, |px| mask.labels[px] == class_id);
    if comps.is_empty() {
        return (mask.clone(), false);
    }
    let mut best = 0;
    for (i, c) in comps.iter().enumerate() {
        if c.len() > comps[best].len() {
            best = i;
        }
    }
    let mut out = mask.clone();
    for (i, c) in comps.iter().enumerate() {
        if i != best {
            for &px in c {
                out.labels[px] = 0;
            }
        }
    }
    (out, true)
}

/// Relabels background regions that do not 4-connect to the image border.
pub fn fill_holes(mask: &SegMask, class_id: u32) -> SegMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    for comp in components(h, w, |px| mask.labels[px] == 0) {
        let touches_border = comp
            .iter()
            .any(|&px| px / w == 0 || px / w == h - 1 || px % w == 0 || px % w == w - 1);
        if !touches_border {
            for px in comp {
                out.labels[px] = class_id;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOrder {
    /// Largest component first, then hole filling.
    ComponentsThenHoles,
    HolesThenComponents,
}

/// Runs both post-processing passes on one class.
pub fn postprocess(mask: &SegMask, class_id: u32, order: PostOrder) -> (SegMask, bool) {
    match order {
        PostOrder::ComponentsThenHoles => {
            let (m, found) = largest_component(mask, class_id);
            (fill_holes(&m, class_id), found)
        }
        PostOrder::HolesThenComponents => largest_component(&fill_holes(mask, class_id), class_id),
    }
}

/// `c x H x W` indicator tensor.
pub fn one_hot(mask: &SegMask, c: usize) -> Result<Tensor> {
    let n = mask.height * mask.width;
    let mut data = vec![0.0; c * n];
    for (px, &l) in mask.labels.iter().enumerate() {
        if l as usize >= c {
            return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
        }
        data[l as usize * n + px] = 1.0;
    }
    Tensor::from_vec(&[c, mask.height, mask.width], data)
}

/// Per-pixel argmax over the leading channel axis; ties go to the lowest
/// channel.
pub fn argmax_channels(s: &Tensor) -> Result<SegMask> {
    let [c, h, w] = *s.shape() else {
        return Err(Error::invalid(format!("expected c x H x W, got {:?}", s.shape())));
    };
    let n = h * w;
    let labels = (0..n)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if s.data()[k * n + px] > s.data()[best * n + px] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    SegMask::new(h, w, c, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str], classes: usize) -> SegMask {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| (b - b'0') as u32))
            .collect();
        SegMask::new(h, w, classes, labels).unwrap()
    }

    #[test]
    fn thresholds() {
        let u = Tensor::from_vec(&[1, 2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(threshold_segment(&u, &[]).unwrap().labels().iter().all(|&l| l == 0));
        assert_eq!(threshold_segment(&u, &[0.5]).unwrap().labels(), &[0, 1, 0, 1, 1, 0]);
        assert!(threshold_segment(&u, &[0.6, 0.3]).is_err());
        assert!(threshold_segment(&u, &[0.3, 0.3]).is_err());

        let r = Tensor::random_normal(&[1, 9, 9], 3, 0.5).unwrap().map(|v| v + 0.5);
        let m = threshold_segment(&r, &[0.3, 0.6]).unwrap();
        for (px, &v) in r.data().iter().enumerate() {
            let expect = if v > 0.6 { 2 } else if v > 0.3 { 1 } else { 0 };
            assert_eq!(m.labels()[px], expect);
        }
        // a value equal to a threshold is not strictly above it
        let eq = Tensor::from_vec(&[1, 1, 1], vec![0.3]).unwrap();
        assert_eq!(threshold_segment(&eq, &[0.3]).unwrap().labels(), &[0]);
    }

    #[test]
    fn kmeans_separates_constant_regions() {
        let mut data = vec![0.1; 32];
        data.extend(vec![0.9; 32]);
        let u = Tensor::from_vec(&[1, 8, 8], data).unwrap();
        let m = kmeans_segment(&u, 2, 11, 100).unwrap();
        assert!(m.labels()[..32].iter().all(|&l| l == 0));
        assert!(m.labels()[32..].iter().all(|&l| l == 1));
        assert!(kmeans_segment(&u, 3, 11, 100).is_err());
        assert!(kmeans_segment(&u, 1, 11, 100).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let u = Tensor::random_normal(&[2, 8, 8], 5, 1.0).unwrap();
        assert_eq!(
            kmeans_segment(&u, 3, 42, 100).unwrap(),
            kmeans_segment(&u, 3, 42, 100).unwrap()
        );
    }

    #[test]
    fn kmeans_beats_random_assignments() {
        let u = Tensor::random_normal(&[1, 8, 8], 17, 1.0).unwrap();
        let m = kmeans_segment(&u, 3, 1, 100).unwrap();
        let sse = |labels: &[u32]| {
            let mut total = 0.0;
            for c in 0..3u32 {
                let vals: Vec<f64> = labels
                    .iter()
                    .zip(u.data())
                    .filter(|(&l, _)| l == c)
                    .map(|(_, &v)| v)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            total
        };
        let ours = sse(m.labels());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let labels: Vec<u32> = (0..64).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
            assert!(ours <= sse(&labels));
        }
    }

    #[test]
    fn largest_component_cases() {
        let blob = mask_from(&["0000", "0110", "0110", "0000"], 2);
        assert_eq!(largest_component(&blob, 1), (blob.clone(), true));
        let (same, found) = largest_component(&blob, 3);
        assert_eq!(same, blob);
        assert!(!found);

        // 20-pixel blob plus a 3-pixel blob
        let m = mask_from(
            &[
                "11111000", "11111000", "11111000", "11111000", "00000000", "00000111",
            ],
            2,
        );
        let (out, _) = largest_component(&m, 1);
        assert_eq!(out.count(1), 20);
        assert_eq!(out.get(5, 5), 0);

        // equal sizes: first in scan order wins
        let tie = mask_from(&["1100", "0000", "0011"], 2);
        let (out, _) = largest_component(&tie, 1);
        assert_eq!(out.labels(), mask_from(&["1100", "0000", "0000"], 2).labels());
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let m = mask_from(&["110", "001"], 2);
        let (out, _) = largest_component(&m, 1);
        assert_eq!(out.count(1), 2);
    }

    #[test]
    fn fill_holes_cases() {
        let solid = mask_from(&["0000", "0110", "0110", "0000"], 2);
        assert_eq!(fill_holes(&solid, 1), solid);
        let donut = mask_from(&["11111", "10001", "10101", "10001", "11111"], 2);
        assert!(fill_holes(&donut, 1).labels().iter().all(|&l| l == 1));
        let bg = SegMask::filled(4, 4, 2, 0).unwrap();
        assert_eq!(fill_holes(&bg, 1), bg);
        // a background region touching the border stays
        let open = mask_from(&["11011", "10001", "11111"], 2);
        assert_eq!(fill_holes(&open, 1), open);
    }

    #[test]
    fn one_hot_cases() {
        let m = SegMask::new(1, 2, 2, vec![0, 1]).unwrap();
        assert_eq!(one_hot(&m, 2).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        let m = mask_from(&["0120", "2210"], 3);
        let oh = one_hot(&m, 3).unwrap();
        for c in 0..3 {
            assert_eq!(oh.plane(c).iter().sum::<f64>() as usize, m.count(c as u32));
        }
        assert_eq!(argmax_channels(&oh).unwrap(), m);
        assert!(one_hot(&m, 2).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let s = Tensor::full(&[3, 2, 2], 1.0 / 3.0).unwrap();
        assert!(argmax_channels(&s).unwrap().labels().iter().all(|&l| l == 0));
    }

    proptest! {
        #[test]
        fn postprocessing_monotone(labels in proptest::collection::vec(0u32..3, 48)) {
            let m = SegMask::new(6, 8, 3, labels).unwrap();
            for class_id in 1..3u32 {
                let (lc, _) = largest_component(&m, class_id);
                prop_assert!(lc.count(class_id) <= m.count(class_id));
                prop_assert!(fill_holes(&m, class_id).count(class_id) >= m.count(class_id));
            }
        }

        #[test]
        fn one_hot_idempotent(labels in proptest::collection::vec(0u32..4, 30)) {
            let m = SegMask::new(5, 6, 4, labels).unwrap();
            let oh = one_hot(&m, 4).unwrap();
            prop_assert_eq!(one_hot(&argmax_channels(&oh).unwrap(), 4).unwrap(), oh);
        }
    }
}
