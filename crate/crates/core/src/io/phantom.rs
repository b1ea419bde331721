//! Piecewise-constant synthetic images with known labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::SegMask;
use crate::io::config::KeyValues;
use crate::model::{apply_a, BlurSpec, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Pixels with `(i - cy)^2 + (j - cx)^2 <= r^2`.
    Disk { cy: f64, cx: f64, r: f64, phase: u32 },
    /// Rows `top..top + height`, columns `left..left + width`.
    Rect { top: usize, left: usize, height: usize, width: usize, phase: u32 },
}

impl Shape {
    fn phase(&self) -> u32 {
        match *self {
            Shape::Disk { phase, .. } | Shape::Rect { phase, .. } => phase,
        }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        match *self {
            Shape::Disk { cy, cx, r, .. } => (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) <= r * r,
            Shape::Rect { top, left, height, width, .. } => {
                i >= top && i < top + height && j >= left && j < left + width
            }
        }
    }

    /// Row and column extents covered, as closed float intervals.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { cy, cx, r, .. } => (cy - r, cy + r, cx - r, cx + r),
            Shape::Rect { top, left, height, width, .. } => (
                top as f64,
                (top + height) as f64 - 1.0,
                left as f64,
                (left + width) as f64 - 1.0,
            ),
        }
    }

    fn shifted(&self, dy: i64, dx: i64) -> Shape {
        match *self {
            Shape::Disk { cy, cx, r, phase } => Shape::Disk { cy: cy + dy as f64, cx: cx + dx as f64, r, phase },
            Shape::Rect { top, left, height, width, phase } => Shape::Rect {
                top: (top as i64 + dy) as usize,
                left: (left as i64 + dx) as usize,
                height,
                width,
                phase,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Intensity of each phase; phase 0 is the background.
    pub intensities: Vec<f64>,
    /// Painted in order, later shapes on top.
    pub shapes: Vec<Shape>,
    pub noise_std: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn phases(&self) -> usize {
        self.intensities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Size("phantom extents must be positive".into()));
        }
        if !(2..=4).contains(&self.phases()) {
            return Err(Error::Config(format!("phantoms have 2 to 4 phases, got {}", self.phases())));
        }
        if self.intensities.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::Config("phase intensities must be strictly ascending".into()));
        }
        if !(self.noise_std >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::Config("noise and blur must be non-negative".into()));
        }
        for s in &self.shapes {
            if s.phase() as usize >= self.phases() {
                return Err(Error::Config(format!("shape phase {} out of range", s.phase())));
            }
            let (r0, r1, c0, c1) = s.bounds();
            if r0 < 0.0 || c0 < 0.0 || r1 > (self.height - 1) as f64 || c1 > (self.width - 1) as f64 || r1 < r0 || c1 < c0
            {
                return Err(Error::Size(format!("shape {s:?} leaves the {}x{} image", self.height, self.width)));
            }
        }
        Ok(())
    }

    /// Ground-truth labels of the spec.
    pub fn labels(&self) -> Result<SegMask> {
        self.validate()?;
        let mut l = vec![0u32; self.height * self.width];
        for s in &self.shapes {
            for i in 0..self.height {
                for j in 0..self.width {
                    if s.contains(i, j) {
                        l[i * self.width + j] = s.phase();
                    }
                }
            }
        }
        SegMask::new(self.height, self.width, self.phases(), l)
    }

    /// Copy with every shape translated by a seeded offset of at most
    /// `jitter` pixels per axis, restricted so that all shapes stay inside.
    pub fn jittered(&self, jitter: usize, seed: u64) -> Result<PhantomSpec> {
        self.validate()?;
        let j = jitter as i64;
        let (mut ylo, mut yhi, mut xlo, mut xhi) = (-j, j, -j, j);
        for s in &self.shapes {
            let (r0, r1, c0, c1) = s.bounds();
            ylo = ylo.max((-r0).ceil() as i64);
            yhi = yhi.min(((self.height - 1) as f64 - r1).floor() as i64);
            xlo = xlo.max((-c0).ceil() as i64);
            xhi = xhi.min(((self.width - 1) as f64 - c1).floor() as i64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = rng.random_range(ylo..=yhi);
        let dx = rng.random_range(xlo..=xhi);
        Ok(PhantomSpec {
            shapes: self.shapes.iter().map(|s| s.shifted(dy, dx)).collect(),
            seed,
            ..self.clone()
        })
    }

    /// Parses `key=value` text: `height`, `width`, `intensities` (comma list),
    /// `noise`, `blur`, `seed`, repeated `disk=cy,cx,r,phase` and
    /// `rect=top,left,height,width,phase`, plus the batch keys `count` and
    /// `jitter` returned alongside.
    pub fn parse(text: &str) -> Result<(PhantomSpec, usize, usize)> {
        let mut kv = KeyValues::parse(text)?;
        let height = kv.take_parsed("height")?.ok_or_else(|| Error::Config("missing height".into()))?;
        let width = kv.take_parsed("width")?.ok_or_else(|| Error::Config("missing width".into()))?;
        let intensities = kv
            .take_list("intensities")?
            .ok_or_else(|| Error::Config("missing intensities".into()))?;
        let noise_std = kv.take_parsed("noise")?.unwrap_or(0.0);
        let blur_sigma = kv.take_parsed("blur")?.unwrap_or(0.0);
        let seed = kv.take_parsed("seed")?.unwrap_or(0);
        let count = kv.take_parsed("count")?.unwrap_or(1);
        let jitter = kv.take_parsed("jitter")?.unwrap_or(0);
        let mut shapes = Vec::new();
        for (key, value) in kv.take_ordered(&["disk", "rect"]) {
            let nums: Vec<f64> = value
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number in {key}={value}"))))
                .collect::<Result<_>>()?;
            let as_index = |v: f64| -> Result<usize> {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Config(format!("{key}={value} needs non-negative integers")))
                }
            };
            shapes.push(match (key.as_str(), nums.as_slice()) {
                ("disk", &[cy, cx, r, ph]) => Shape::Disk { cy, cx, r, phase: as_index(ph)? as u32 },
                ("rect", &[t, l, h, w, ph]) => Shape::Rect {
                    top: as_index(t)?,
                    left: as_index(l)?,
                    height: as_index(h)?,
                    width: as_index(w)?,
                    phase: as_index(ph)? as u32,
                },
                _ => return Err(Error::Config(format!("wrong number of fields in {key}={value}"))),
            });
        }
        kv.finish()?;
        let spec = PhantomSpec { height, width, intensities, shapes, noise_std, blur_sigma, seed };
        spec.validate()?;
        if count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        Ok((spec, count, jitter))
    }
}

/// Renders the image (`H x W`) and its labels. Noise is added before the blur.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Tensor, SegMask)> {
    let gt = spec.labels()?;
    let mut img = Tensor::from_vec(
        &[spec.height, spec.width],
        gt.labels().iter().map(|&l| spec.intensities[l as usize]).collect(),
    )?;
    if spec.noise_std > 0.0 {
        let noise = Tensor::random_normal(&[spec.height, spec.width], spec.seed, spec.noise_std)?;
        img.axpy(1.0, &noise)?;
    }
    if spec.blur_sigma > 0.0 {
        let radius = (3.0 * spec.blur_sigma).ceil() as usize;
        let p = ModelParams { blur: BlurSpec::gaussian(1, spec.blur_sigma, radius), ..ModelParams::default() };
        img = apply_a(&img, &p)?;
    }
    Ok((img, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec {
        PhantomSpec {
            height: 20,
            width: 30,
            intensities: vec![0.1, 0.5, 0.9],
            shapes: vec![
                Shape::Rect { top: 2, left: 3, height: 5, width: 7, phase: 1 },
                Shape::Rect { top: 10, left: 12, height: 4, width: 9, phase: 2 },
                Shape::Disk { cy: 10.0, cx: 5.0, r: 3.0, phase: 1 },
            ],
            noise_std: 0.0,
            blur_sigma: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn clean_images_take_phase_values() {
        let (img, gt) = make_phantom(&spec()).unwrap();
        for (&v, &l) in img.data().iter().zip(gt.labels()) {
            assert_eq!(v, [0.1, 0.5, 0.9][l as usize]);
        }
    }

    #[test]
    fn rectangle_areas() {
        let s = PhantomSpec { shapes: spec().shapes[..2].to_vec(), ..spec() };
        let gt = s.labels().unwrap();
        assert_eq!(gt.count(1), 35);
        assert_eq!(gt.count(2), 36);
        assert_eq!(gt.count(0), 600 - 71);
        // a radius-3 disk on the lattice covers 29 pixels
        let d = PhantomSpec { shapes: vec![spec().shapes[2]], ..spec() };
        assert_eq!(d.labels().unwrap().count(1), 29);
    }

    #[test]
    fn seeded_noise_and_blur() {
        let s = PhantomSpec { noise_std: 0.1, blur_sigma: 1.0, ..spec() };
        let a = make_phantom(&s).unwrap();
        assert_eq!(a, make_phantom(&s).unwrap());
        assert_ne!(a.0, make_phantom(&PhantomSpec { seed: 2, ..s.clone() }).unwrap().0);
        let clean = make_phantom(&spec()).unwrap().0;
        assert!(a.0.sub(&clean).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn validation() {
        assert!(PhantomSpec { intensities: vec![0.5, 0.2], ..spec() }.validate().is_err());
        assert!(PhantomSpec { intensities: vec![0.5], ..spec() }.validate().is_err());
        let out = Shape::Rect { top: 18, left: 0, height: 3, width: 2, phase: 1 };
        assert!(PhantomSpec { shapes: vec![out], ..spec() }.validate().is_err());
        let disk = Shape::Disk { cy: 1.0, cx: 10.0, r: 2.0, phase: 1 };
        assert!(PhantomSpec { shapes: vec![disk], ..spec() }.validate().is_err());
    }

    #[test]
    fn jitter_stays_inside() {
        for seed in 0..50 {
            let j = spec().jittered(6, seed).unwrap();
            j.validate().unwrap();
            assert_eq!(j.labels().unwrap().count(2), 36);
        }
    }

    #[test]
    fn parse_text() {
        let text = "height=20\nwidth=30\nintensities=0.1, 0.5,0.9\n# shapes\nrect=2,3,5,7,1\nrect=10,12,4,9,2\ndisk=10,5,3,1\nseed=1\ncount=3\n";
        let (s, count, jitter) = PhantomSpec::parse(text).unwrap();
        assert_eq!(s, spec());
        assert_eq!((count, jitter), (3, 0));
        assert!(PhantomSpec::parse("height=2\nwidth=2\nintensities=0,1\nbogus=1").is_err());
        assert!(PhantomSpec::parse("height=20\nwidth=30\nintensities=0,1\ndisk=1,2,3").is_err());
    }
}
