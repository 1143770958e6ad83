use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Aligned source/target images of one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub id: String,
    pub split: Split,
    pub source: Image,
    pub target: Image,
}

/// Intensity map from the source modality to the target modality.
///
/// `difficulty` blends the identity with a monotone cubic that compresses
/// dark tissue and keeps the background at -1, so the map stays invertible
/// for every difficulty in `[0, 1]`.
pub fn modality_map(v: f64, difficulty: f64) -> f64 {
    let u = (v + 1.0) / 2.0;
    let curved = 2.0 * u * u * u - 1.0;
    (1.0 - difficulty) * v + difficulty * curved
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let a = (dx * c + dy * s) / self.rx;
        let b = (-dx * s + dy * c) / self.ry;
        a * a + b * b <= 1.0
    }
}

/// Procedural head-like phantom: a body ellipse on a dark background with a
/// few sharp inner structures and a faint smooth texture. The target shares
/// the geometry and differs only through [`modality_map`].
pub fn generate_phantom_pair(seed: u64, dims: (usize, usize), difficulty: f64) -> Result<PairedSample> {
    let (h, w) = dims;
    if h < 8 || w < 8 {
        return Err(Error::config(format!("phantom needs at least 8x8 pixels, got {h}x{w}")));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::config(format!("difficulty must be in [0, 1], got {difficulty}")));
    }
    let mut r = rng::seeded(seed);
    // All geometry lives in unit coordinates so it scales with the image.
    let body = Ellipse {
        cy: 0.5 + r.random_range(-0.04..0.04),
        cx: 0.5 + r.random_range(-0.04..0.04),
        ry: r.random_range(0.36..0.44),
        rx: r.random_range(0.30..0.40),
        angle: r.random_range(-0.3..0.3),
    };
    let body_level: f64 = r.random_range(-0.2..0.1);
    let n_inner = r.random_range(2..=4);
    let mut inner = Vec::with_capacity(n_inner);
    for _ in 0..n_inner {
        let ry = r.random_range(0.06..0.16);
        let rx = r.random_range(0.06..0.16);
        let e = Ellipse {
            cy: body.cy + r.random_range(-0.18..0.18),
            cx: body.cx + r.random_range(-0.15..0.15),
            ry,
            rx,
            angle: r.random_range(0.0..std::f64::consts::PI),
        };
        // Contrast against the body is kept large enough for sharp edges to
        // survive the modality map.
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let level = (body_level + sign * r.random_range(0.45..0.8)).clamp(-0.8, 0.9);
        inner.push((e, level));
    }
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(1.0..3.0),
                r.random_range(1.0..3.0),
                r.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let source = Image::from_fn(h, w, |y, x| {
        let (uy, ux) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
        if !body.contains(uy, ux) {
            return -1.0;
        }
        let mut v = body_level;
        for (e, level) in &inner {
            if e.contains(uy, ux) {
                v = *level;
            }
        }
        let texture: f64 = waves
            .iter()
            .map(|(fy, fx, ph)| (std::f64::consts::TAU * (fy * uy + fx * ux) + ph).sin())
            .sum::<f64>()
            * 0.015;
        (v + texture).clamp(-1.0, 1.0)
    });
    let target = source.map(|v| modality_map(v, difficulty));
    Ok(PairedSample {
        id: format!("{seed:016x}"),
        split: Split::Train,
        source,
        target,
    })
}

/// Pixels whose central-difference gradient magnitude exceeds `threshold`.
pub fn edge_map(image: &Image, threshold: f64) -> Vec<bool> {
    let (h, w) = image.dims();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        image.get(yy, xx)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            let gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            out.push((gx * gx + gy * gy).sqrt() > threshold);
        }
    }
    out
}

/// Intersection over union of two edge maps; 1 when both are empty.
pub fn edge_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_phantom_pair(3, (64, 64), 0.5).unwrap();
        let b = generate_phantom_pair(3, (64, 64), 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.source, generate_phantom_pair(4, (64, 64), 0.5).unwrap().source);
        for v in a.source.pixels().iter().chain(a.target.pixels()) {
            assert!((-1.0..=1.0).contains(v));
        }
        assert_eq!(a.source.get(0, 0), -1.0);
        assert_eq!(a.target.get(0, 0), -1.0);
    }

    #[test]
    fn zero_difficulty_is_identity() {
        let s = generate_phantom_pair(9, (32, 48), 0.0).unwrap();
        assert_eq!(s.source, s.target);
    }

    #[test]
    fn modality_map_is_monotone() {
        for d in [0.0, 0.3, 1.0] {
            let mut prev = modality_map(-1.0, d);
            assert_eq!(prev, -1.0);
            for i in 1..=200 {
                let v = -1.0 + i as f64 / 100.0;
                let m = modality_map(v, d);
                assert!(m > prev);
                prev = m;
            }
            assert!((modality_map(1.0, d) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_phantom_pair(0, (4, 64), 0.5).is_err());
        assert!(generate_phantom_pair(0, (64, 64), 1.5).is_err());
    }
}
