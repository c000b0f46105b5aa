use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;

use super::noise::perlin_fractal;
use super::split_seed;
use crate::imgcore::filter::gaussian_blur;
use crate::imgcore::Image;
use crate::Rng;

/// Source images for the two mixture pools.
#[derive(Clone, Debug, Default)]
pub struct SourcePool {
    pub rendered: Vec<Image>,
    pub photos: Vec<Image>,
}

impl SourcePool {
    pub fn len(&self) -> usize {
        self.rendered.len() + self.photos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_side(&self) -> usize {
        self.rendered
            .iter()
            .chain(&self.photos)
            .map(|i| i.width().min(i.height()))
            .min()
            .unwrap_or(0)
    }
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Ring { cx: f64, cy: f64, r0: f64, r1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (cos * dx + sin * dy).abs() <= hw && (-sin * dx + cos * dy).abs() <= hh
            }
            Shape::Ring { cx, cy, r0, r1 } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 >= r0 * r0 && d2 <= r1 * r1
            }
        }
    }

    fn extent(&self) -> (f64, f64, f64) {
        match *self {
            Shape::Disk { cx, cy, r } => (cx, cy, r),
            Shape::Rect { cx, cy, hw, hh, .. } => (cx, cy, hw.hypot(hh)),
            Shape::Ring { cx, cy, r1, .. } => (cx, cy, r1),
        }
    }
}

/// Deterministic textured RGB scene of side `size`: smooth colored noise
/// overlaid with opaque and translucent shapes and a fine grain.
pub fn procedural_source(seed: u64, size: usize) -> Image {
    let mut rng = Rng::seed_from_u64(seed);
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let base = rng.random_range(0.25..0.75);
        let low = perlin_fractal(&mut rng, size, size, 3, 0.5);
        planes.push(low.data().iter().map(|v| base + 0.35 * v).collect());
    }

    let n_shapes = rng.random_range(40..90);
    let s = size as f64;
    for _ in 0..n_shapes {
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let scale = s * rng.random_range(0.015..0.12);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disk { cx, cy, r: scale },
            1 => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Rect {
                    cx,
                    cy,
                    hw: scale,
                    hh: scale * rng.random_range(0.2..1.0),
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            }
            _ => Shape::Ring {
                cx,
                cy,
                r0: scale * rng.random_range(0.3..0.8),
                r1: scale,
            },
        };
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let opacity = rng.random_range(0.5..1.0);
        let (ex, ey, er) = shape.extent();
        let x0 = (ex - er).floor().max(0.0) as usize;
        let x1 = ((ex + er).ceil() as usize).min(size - 1);
        let y0 = (ey - er).floor().max(0.0) as usize;
        let y1 = ((ey + er).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if shape.contains(x as f64, y as f64) {
                    for (c, plane) in planes.iter_mut().enumerate() {
                        let v = &mut plane[y * size + x];
                        *v += opacity * (color[c] - *v);
                    }
                }
            }
        }
    }

    let grain = perlin_fractal(&mut rng, size, size, 7, 0.8);
    let amp = rng.random_range(0.03..0.08);
    for plane in &mut planes {
        for (v, g) in plane.iter_mut().zip(grain.data()) {
            *v += amp * g;
        }
    }
    let img = Image::from_planes(size, size, &planes).expect("planes match size");
    gaussian_blur(&img, 0.6).clamp01()
}

/// `count` sources split evenly between the two pools, each from its own
/// derived seed.
pub fn procedural_pool(seed: u64, count: usize, size: usize) -> SourcePool {
    let images: Vec<Image> = (0..count)
        .into_par_iter()
        .map(|i| procedural_source(split_seed(seed, i as u64), size))
        .collect();
    let half = count.div_ceil(2);
    let mut it = images.into_iter();
    let rendered = it.by_ref().take(half).collect();
    let photos = it.collect();
    SourcePool { rendered, photos }
}
