//! Separable filters and finite differences on single planes.
//!
//! Borders replicate the edge sample unless stated otherwise.

use rayon::prelude::*;

use super::Image;

/// Normalized Gaussian taps with radius `ceil(3 sigma)`. `sigma <= 0` yields `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Correlates every row, then every column, with a symmetric odd kernel.
pub fn convolve_separable(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return plane.iter().map(|v| v * kernel[0]).collect();
    }
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (width as isize, height as isize);
    let mut tmp = vec![0.0; plane.len()];
    tmp.par_chunks_mut(width.max(1))
        .enumerate()
        .for_each(|(y, row)| {
            let src = &plane[y * width..(y + 1) * width];
            for (x, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let xs = (x as isize + k as isize - r).clamp(0, w - 1) as usize;
                    acc += t * src[xs];
                }
                *out = acc;
            }
        });
    let mut out = vec![0.0; plane.len()];
    out.par_chunks_mut(width.max(1))
        .enumerate()
        .for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let ys = (y as isize + k as isize - r).clamp(0, h - 1) as usize;
                    acc += t * tmp[ys * width + x];
                }
                *o = acc;
            }
        });
    out
}

pub fn gaussian_blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    convolve_separable(plane, width, height, &gaussian_kernel(sigma))
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let planes: Vec<Vec<f64>> = img
        .planes()
        .map(|p| convolve_separable(p, img.width(), img.height(), &kernel))
        .collect();
    Image::from_planes(img.width(), img.height(), &planes).expect("shape preserved")
}

/// Sum over the `(2r+1)^2` window around each pixel; samples outside the
/// raster contribute zero.
pub fn box_sum(plane: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    let mut rows = vec![0.0; plane.len()];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        let dst = &mut rows[y * width..(y + 1) * width];
        let mut acc = 0.0;
        for x in 0..radius.min(width) {
            acc += src[x];
        }
        for x in 0..width {
            if x + radius < width {
                acc += src[x + radius];
            }
            dst[x] = acc;
            if x >= radius {
                acc -= src[x - radius];
            }
        }
    }
    let mut out = vec![0.0; plane.len()];
    for x in 0..width {
        let mut acc = 0.0;
        for y in 0..radius.min(height) {
            acc += rows[y * width + x];
        }
        for y in 0..height {
            if y + radius < height {
                acc += rows[(y + radius) * width + x];
            }
            out[y * width + x] = acc;
            if y >= radius {
                acc -= rows[(y - radius) * width + x];
            }
        }
    }
    out
}

/// Central differences, one-sided at the border.
pub fn central_gradients(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            gx[i] = if width < 2 {
                0.0
            } else if x == 0 {
                plane[i + 1] - plane[i]
            } else if x == width - 1 {
                plane[i] - plane[i - 1]
            } else {
                0.5 * (plane[i + 1] - plane[i - 1])
            };
            gy[i] = if height < 2 {
                0.0
            } else if y == 0 {
                plane[i + width] - plane[i]
            } else if y == height - 1 {
                plane[i] - plane[i - width]
            } else {
                0.5 * (plane[i + width] - plane[i - width])
            };
        }
    }
    (gx, gy)
}

/// Forward differences `u(x+1) - u(x)`; zero in the last column/row.
pub fn forward_gradients(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                gx[i] = plane[i + 1] - plane[i];
            }
            if y + 1 < height {
                gy[i] = plane[i + width] - plane[i];
            }
        }
    }
    (gx, gy)
}
