//! Gradient-lattice (Perlin) noise and its fractal sum.

use rand::RngCore;

use super::split_seed;
use crate::imgcore::Image;

/// Upper bound of |perlin| in 2D with unit gradients.
pub const PERLIN_MAX: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Lattice cells across the smaller raster dimension for the coarsest octave.
pub const BASE_CELLS: f64 = 4.0;

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn gradient(seed: u64, ix: i64, iy: i64) -> (f64, f64) {
    let key = (ix as u64).wrapping_mul(0x8DA6_B343) ^ (iy as u64).wrapping_mul(0xD816_3841).rotate_left(32);
    let h = split_seed(seed, key);
    let angle = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * std::f64::consts::TAU;
    (angle.cos(), angle.sin())
}

/// Single Perlin layer at lattice coordinates `(x, y)`. Zero at integer points.
pub fn perlin2(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let dot = |cx: i64, cy: i64, dx: f64, dy: f64| {
        let (gx, gy) = gradient(seed, cx, cy);
        gx * dx + gy * dy
    };
    let n00 = dot(ix, iy, fx, fy);
    let n10 = dot(ix + 1, iy, fx - 1.0, fy);
    let n01 = dot(ix, iy + 1, fx, fy - 1.0);
    let n11 = dot(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
    let (u, v) = (fade(fx), fade(fy));
    let a = n00 + u * (n10 - n00);
    let b = n01 + u * (n11 - n01);
    a + v * (b - a)
}

/// `sum_o persistence^o * perlin(2^o * f0 * p)` for `o` in `0..octaves`, where
/// `f0` puts [`BASE_CELLS`] cells across the smaller dimension. Each octave
/// draws its own lattice seed from `rng`.
pub fn perlin_fractal<R: RngCore + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    octaves: usize,
    persistence: f64,
) -> Image {
    let base = BASE_CELLS / width.min(height).max(1) as f64;
    let seeds: Vec<u64> = (0..octaves).map(|_| rng.next_u64()).collect();
    let mut out = vec![0.0; width * height];
    let mut amp = 1.0;
    for (o, &seed) in seeds.iter().enumerate() {
        let freq = base * (1u64 << o) as f64;
        for y in 0..height {
            for x in 0..width {
                out[y * width + x] += amp * perlin2(seed, x as f64 * freq, y as f64 * freq);
            }
        }
        amp *= persistence;
    }
    Image::from_plane(width, height, out).expect("shape")
}

/// Maximum possible |perlin_fractal| for the given parameters.
pub fn fractal_amplitude_bound(octaves: usize, persistence: f64) -> f64 {
    (0..octaves).map(|o| persistence.powi(o as i32)).sum::<f64>() * PERLIN_MAX
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_on_lattice() {
        for ix in -3..4 {
            for iy in -3..4 {
                assert_eq!(perlin2(9, ix as f64, iy as f64), 0.0);
            }
        }
    }

    #[test]
    fn single_octave_is_plain_layer() {
        let mut a = crate::Rng::seed_from_u64(5);
        let mut b = crate::Rng::seed_from_u64(5);
        let f = perlin_fractal(&mut a, 40, 32, 1, 0.5);
        let seed = b.next_u64();
        let base = BASE_CELLS / 32.0;
        for &(x, y) in &[(0usize, 0usize), (13, 7), (39, 31)] {
            assert_eq!(f.get(x, y, 0), perlin2(seed, x as f64 * base, y as f64 * base));
        }
    }

    #[test]
    fn amplitude_bound_holds_empirically() {
        // 1e6 samples over random positions and lattice seeds.
        let mut rng = crate::Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let seed = rng.next_u64();
            for k in 0..1000 {
                let x = (k as f64) * 0.0173 + (seed % 97) as f64;
                let y = (k as f64 * 0.61).fract() * 4.0 + (seed % 89) as f64;
                worst = worst.max(perlin2(seed, x, y).abs());
            }
        }
        assert!(worst <= PERLIN_MAX, "{worst}");
        let frac = perlin_fractal(&mut rng, 256, 256, 4, 1.0);
        let bound = fractal_amplitude_bound(4, 1.0);
        assert!(frac.data().iter().all(|v| v.abs() <= bound));
    }
}
