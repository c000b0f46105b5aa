//! Raster types and their file formats.
//!
//! Images are planar `f64` rasters with 1 or 3 channels and nominal range
//! [0,1]. Values outside the range are allowed inside the pipeline and are
//! clamped only when encoding to PNG.

pub mod filter;
pub mod io;

pub use io::{read_flo, read_image, read_pfm, write_flo, write_image, write_pfm, write_png16};

use crate::error::{Error, Result};

/// Luma weights used by [`to_gray`].
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Planar floating-point raster. Sample `(x, y, c)` lives at
/// `data[c * width * height + y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(
            channels == 1 || channels == 3,
            "images have 1 or 3 channels, got {channels}"
        );
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Unsupported(format!("{channels} channels")));
        }
        let expected = checked_len(width, height, channels)?;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "sample count {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::new(width, height, channels);
        for c in 0..channels {
            let plane = img.plane_mut(c);
            for y in 0..height {
                for x in 0..width {
                    plane[y * width + x] = f(x, y, c);
                }
            }
        }
        img
    }

    /// Single-channel image wrapping one plane.
    pub fn from_plane(width: usize, height: usize, plane: Vec<f64>) -> Result<Self> {
        Image::from_vec(width, height, 1, plane)
    }

    /// Three-channel image from three planes.
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * planes.len());
        for p in planes {
            if p.len() != width * height {
                return Err(Error::InvalidArgument("plane length mismatch".into()));
            }
            data.extend_from_slice(p);
        }
        Image::from_vec(width, height, planes.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.pixel_count().max(1))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// Copy of one channel as a gray image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two images of identical shape.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Replaces every sample by the nearest `f32`. Files store `f32`, so an
    /// image on this lattice survives a PFM round-trip bit for bit.
    pub fn round_to_f32(&self) -> Image {
        self.map(|v| v as f32 as f64)
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        crate::error::ensure_same_dims(self.dims(), other.dims())?;
        if self.channels != other.channels {
            return Err(Error::InvalidArgument(format!(
                "channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

}

fn checked_len(width: usize, height: usize, channels: usize) -> Result<usize> {
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n <= isize::MAX as usize / 8)
        .ok_or(Error::DimensionOverflow {
            width,
            height,
            channels,
        })
}

/// Per-pixel weight in [0,1]. Binary masks hold only 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Mask {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument("mask length mismatch".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0,1]".into()));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn from_bools(width: usize, height: usize, bits: impl IntoIterator<Item = bool>) -> Self {
        let data: Vec<f64> = bits
            .into_iter()
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(data.len(), width * height);
        Mask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel `i` (row-major) counts as set when its weight exceeds one half.
    #[inline]
    pub fn is_set(&self, i: usize) -> bool {
        self.data[i] > 0.5
    }

    pub fn count(&self) -> usize {
        (0..self.data.len()).filter(|&i| self.is_set(i)).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Pointwise product (logical and for binary masks).
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        crate::error::ensure_same_dims(self.dims(), other.dims())?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }

    /// Reads a mask back from a single-channel image, clamping to [0,1].
    pub fn from_image(img: &Image) -> Result<Mask> {
        if img.channels() != 1 {
            return Err(Error::InvalidArgument("mask image must be single-channel".into()));
        }
        Ok(Mask {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }
}

/// Dense displacement field in pixels: pixel `(x, y)` of the first view
/// corresponds to `(x + u, y + v)` in the second.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// FLO convention: components at or above this magnitude mean "unknown".
pub const UNKNOWN_FLOW: f64 = 1e9;

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn from_vecs(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::InvalidArgument("flow length mismatch".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut flow = FlowField::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                flow.u[y * width + x] = u;
                flow.v[y * width + x] = v;
            }
        }
        flow
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn components_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.u, &mut self.v)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn norms(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).collect()
    }

    pub fn mean_norm(&self) -> f64 {
        crate::numeric::mean(&self.norms())
    }

    pub fn scaled(&self, su: f64, sv: f64) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|u| u * su).collect(),
            v: self.v.iter().map(|v| v * sv).collect(),
        }
    }

    pub fn negated(&self) -> FlowField {
        self.scaled(-1.0, -1.0)
    }

    pub fn round_to_f32(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|&u| u as f32 as f64).collect(),
            v: self.v.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Set where the flow is known (FLO files mark unknown pixels with huge values).
    pub fn known_mask(&self) -> Mask {
        Mask::from_bools(
            self.width,
            self.height,
            self.u
                .iter()
                .zip(&self.v)
                .map(|(u, v)| u.is_finite() && v.is_finite() && u.abs() < UNKNOWN_FLOW && v.abs() < UNKNOWN_FLOW),
        )
    }
}

/// Luma conversion. Gray input is returned unchanged.
pub fn to_gray(img: &Image) -> Image {
    match img.channels() {
        1 => img.clone(),
        _ => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let data = (0..img.pixel_count())
                .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
                .collect();
            Image {
                width: img.width,
                height: img.height,
                channels: 1,
                data,
            }
        }
    }
}
