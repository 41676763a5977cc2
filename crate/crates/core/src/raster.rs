//! Raster containers (contour images, scalar grids, pyramids) and the
//! resolution-change operations shared by the other modules.
//!
//! All rasters are row-major, `data[y * width + x]`, with pixel centers at
//! integer coordinates and the origin at pixel `(0, 0)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Real;

/// Read-only view shared by [`ScalarGrid`] and [`ContourImage`].
pub trait Raster<T: Real> {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn data(&self) -> &[T];

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> T {
        self.data()[y * self.width() + x]
    }

    /// Pixel value with zero padding outside the domain.
    #[inline]
    fn get_or_zero(&self, x: i64, y: i64) -> T {
        if x < 0 || y < 0 || x >= self.width() as i64 || y >= self.height() as i64 {
            T::zero()
        } else {
            self.data()[y as usize * self.width() + x as usize]
        }
    }

    fn sum(&self) -> T {
        crate::num::ordered_sum(self.data().iter().copied())
    }

    fn max_value(&self) -> T {
        self.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }
}

/// Rebuild a raster of the same kind from warped or transformed samples.
pub trait FromSamples<T: Real>: Raster<T> + Sized {
    fn from_samples(width: usize, height: usize, data: Vec<T>) -> Self;
}

/// Unconstrained finite scalar buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid<T: Real> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> ScalarGrid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "buffer of {} values for {width}x{height} grid",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at ({}, {})",
                i % width.max(1),
                i / width.max(1)
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::zero(); width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Real> Raster<T> for ScalarGrid<T> {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn data(&self) -> &[T] {
        &self.data
    }
}

impl<T: Real> FromSamples<T> for ScalarGrid<T> {
    fn from_samples(width: usize, height: usize, data: Vec<T>) -> Self {
        Self { width, height, data }
    }
}

/// Contour raster with intensities in `[0, 1]`; binary at input, soft once warped.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourImage<T: Real> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> ContourImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidInput(format!(
                "contour image must be at least 2x2, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "buffer of {} values for {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(Error::InvalidInput(format!(
                "intensity {} at ({}, {}) outside [0, 1]",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 2 && height >= 2, "contour image must be at least 2x2");
        Self { width, height, data: vec![T::zero(); width * height] }
    }

    /// Binary image from a list of `(x, y)` pixels; out-of-range pixels are ignored.
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        let mut img = Self::zeros(width, height);
        for &(x, y) in pixels {
            if x < width && y < height {
                img.data[y * width + x] = T::one();
            }
        }
        img
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        assert!(v >= T::zero() && v <= T::one(), "intensity outside [0, 1]");
        self.data[y * self.width + x] = v;
    }

    /// Pixels with value above one half, in row-major order.
    pub fn on_pixels(&self) -> Vec<(usize, usize)> {
        let half = T::lit(0.5);
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > half)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }

    /// Number of pixels strictly above zero.
    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|v| **v > T::zero()).count()
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.width {
            for y in 0..self.height {
                data.push(self.data[y * self.width + x]);
            }
        }
        Self { width: self.height, height: self.width, data }
    }

    pub fn to_grid(&self) -> ScalarGrid<T> {
        ScalarGrid::from_samples(self.width, self.height, self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> ContourImage<U> {
        ContourImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Load an 8-bit grayscale PGM or PNG; 0 maps to 0 and 255 to 1.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_luma8();
        let (w, h) = img.dimensions();
        let full = T::lit(255.0);
        let data = img.into_raw().into_iter().map(|b| T::from_u8(b).unwrap() / full).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Quantize to 8 bits (round to nearest).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// File contents for `path`: PGM for a `.pgm` extension, PNG otherwise.
    pub fn encode_for(&self, path: impl AsRef<Path>) -> Result<Vec<u8>> {
        encode_gray(path.as_ref(), self.width, self.height, self.to_bytes())
    }

    /// Save as PGM (`.pgm`) or PNG (any other extension).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray(path.as_ref(), self.width, self.height, self.to_bytes())
    }
}

impl<T: Real> Raster<T> for ContourImage<T> {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn data(&self) -> &[T] {
        &self.data
    }
}

impl<T: Real> FromSamples<T> for ContourImage<T> {
    /// Samples are clamped into `[0, 1]`; bilinear weights can overshoot by an ulp.
    fn from_samples(width: usize, height: usize, mut data: Vec<T>) -> Self {
        for v in data.iter_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
        Self { width, height, data }
    }
}

/// Encode 8-bit gray pixels as PGM when `path` ends in `.pgm`, PNG otherwise.
pub(crate) fn encode_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::InvalidInput("gray buffer size".into()))?;
    let is_pgm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        let mut out = Vec::with_capacity(width * height + 32);
        out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
        out.extend_from_slice(buf.as_raw());
        Ok(out)
    } else {
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

pub(crate) fn save_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, encode_gray(path, width, height, bytes)?)?;
    Ok(())
}

/// Threshold a scalar grid into a binary contour image (`> threshold` maps to 1).
pub fn binarize<T: Real>(img: &ScalarGrid<T>, threshold: T) -> Result<ContourImage<T>> {
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside (0, 1)")));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in grid".into()));
    }
    let data = img
        .data
        .iter()
        .map(|&v| if v > threshold { T::one() } else { T::zero() })
        .collect();
    ContourImage::new(img.width, img.height, data)
}

/// 2x2 max pooling with ceil halving; border blocks use the pixels available.
pub fn downsample_max<T: Real>(img: &ContourImage<T>) -> ContourImage<T> {
    let (w, h) = img.dims();
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut data = vec![T::zero(); ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut m = T::zero();
            for y in (2 * oy)..(2 * oy + 2).min(h) {
                for x in (2 * ox)..(2 * ox + 2).min(w) {
                    m = m.max(img.at(x, y));
                }
            }
            data[oy * ow + ox] = m;
        }
    }
    // Outputs keep the >= 2x2 invariant only when the input is at least 3 wide;
    // build_pyramid enforces its own 4x4 floor.
    ContourImage { width: ow, height: oh, data }
}

/// Coarse-to-fine image pyramid; `levels[0]` is the finest.
#[derive(Debug, Clone)]
pub struct Pyramid<T: Real> {
    pub levels: Vec<ContourImage<T>>,
}

impl<T: Real> Pyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> &ContourImage<T> {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Smallest edge length allowed at the coarsest pyramid level.
pub const MIN_LEVEL_SIZE: usize = 4;

/// Dimensions of pyramid level `k` for a `w x h` base image.
pub fn level_dims(w: usize, h: usize, k: usize) -> (usize, usize) {
    (0..k).fold((w, h), |(w, h), _| (w.div_ceil(2), h.div_ceil(2)))
}

pub fn build_pyramid<T: Real>(img: &ContourImage<T>, levels: usize) -> Result<Pyramid<T>> {
    if levels == 0 {
        return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
    }
    let (cw, ch) = level_dims(img.width(), img.height(), levels - 1);
    if cw < MIN_LEVEL_SIZE || ch < MIN_LEVEL_SIZE {
        return Err(Error::InvalidConfig(format!(
            "{levels} levels reduce {}x{} to {cw}x{ch}, below {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample_max(out.last().unwrap());
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear<T: Real>(img: &ScalarGrid<T>, width: usize, height: usize) -> ScalarGrid<T> {
    let (sw, sh) = img.dims();
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    ScalarGrid::from_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(sw - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let ax = T::lit(fx - x0 as f64);
        let ay = T::lit(fy - y0 as f64);
        let one = T::one();
        let top = img.at(x0, y0) * (one - ax) + img.at(x1, y0) * ax;
        let bot = img.at(x0, y1) * (one - ax) + img.at(x1, y1) * ax;
        top * (one - ay) + bot * ay
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_all_zero() {
        let g = ScalarGrid::<f64>::zeros(4, 4);
        let b = binarize(&g, 0.5).unwrap();
        assert!(b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn binarize_single_pixel() {
        let mut g = ScalarGrid::<f64>::zeros(4, 4);
        g.data_mut()[4 + 2] = 0.9;
        let b = binarize(&g, 0.5).unwrap();
        assert_eq!(b.on_pixels(), vec![(2, 1)]);
    }

    #[test]
    fn binarize_counts_match_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ScalarGrid::<f64>::from_fn(16, 16, |_, _| rng.random::<f64>());
        let expected = g.data().iter().filter(|v| **v > 0.5).count();
        let b = binarize(&g, 0.5).unwrap();
        assert_eq!(b.nonzero_count(), expected);
    }

    #[test]
    fn binarize_rejects_non_finite_and_bad_threshold() {
        let mut g = ScalarGrid::<f64>::zeros(4, 4);
        g.data_mut()[0] = f64::NAN;
        assert!(matches!(binarize(&g, 0.5), Err(Error::InvalidInput(_))));
        let g = ScalarGrid::<f64>::zeros(4, 4);
        assert!(binarize(&g, 1.0).is_err());
        assert!(ScalarGrid::new(2, 2, vec![0.0, f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn contour_image_invariants() {
        assert!(ContourImage::<f64>::new(1, 4, vec![0.0; 4]).is_err());
        assert!(ContourImage::<f64>::new(2, 2, vec![0.0, 1.5, 0.0, 0.0]).is_err());
        assert!(ContourImage::<f64>::new(2, 2, vec![0.0, 1.0, 0.5, 0.0]).is_ok());
    }

    #[test]
    fn downsample_ones_and_single_pixel() {
        let ones = ContourImage::<f64>::new(4, 4, vec![1.0; 16]).unwrap();
        let d = downsample_max(&ones);
        assert_eq!(d.dims(), (2, 2));
        assert!(d.data().iter().all(|v| *v == 1.0));

        let single = ContourImage::<f64>::from_pixels(4, 4, &[(3, 3)]);
        let d = downsample_max(&single);
        assert_eq!(d.on_pixels(), vec![(1, 1)]);
    }

    #[test]
    fn downsample_odd_matches_block_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let img = ContourImage::new(5, 5, data.clone()).unwrap();
        let d = downsample_max(&img);
        assert_eq!(d.dims(), (3, 3));
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for y in 0..5 {
                    for x in 0..5 {
                        if x / 2 == ox && y / 2 == oy {
                            m = m.max(data[y * 5 + x]);
                        }
                    }
                }
                assert_eq!(d.at(ox, oy), m);
            }
        }
    }

    #[test]
    fn pyramid_shapes() {
        let img = ContourImage::<f64>::zeros(128, 128);
        let p = build_pyramid(&img, 5).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| l.dims()).collect();
        assert_eq!(sizes, vec![(128, 128), (64, 64), (32, 32), (16, 16), (8, 8)]);

        let p = build_pyramid(&img, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.levels[0], img);

        let img = ContourImage::<f64>::zeros(100, 60);
        let p = build_pyramid(&img, 3).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| l.dims()).collect();
        assert_eq!(sizes, vec![(100, 60), (50, 30), (25, 15)]);
    }

    #[test]
    fn pyramid_too_deep() {
        let img = ContourImage::<f64>::zeros(16, 16);
        assert!(matches!(build_pyramid(&img, 4), Err(Error::InvalidConfig(_))));
        assert!(build_pyramid(&img, 3).is_ok());
        assert!(build_pyramid(&img, 0).is_err());
    }

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ContourImage::<f64>::from_pixels(7, 5, &[(1, 1), (6, 4), (3, 2)]);
        for name in ["a.pgm", "a.png"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            let back = ContourImage::<f64>::load(&p).unwrap();
            assert_eq!(back, img);
        }
        let raw = std::fs::read(dir.path().join("a.pgm")).unwrap();
        assert!(raw.starts_with(b"P5\n7 5\n255\n"));
    }

    proptest::proptest! {
        #[test]
        fn downsample_keeps_max_and_nonempty(
            w in 3usize..20, h in 3usize..20, seed in 0u64..1000, density in 0.0f64..0.3
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..w * h)
                .map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 })
                .collect();
            let img = ContourImage::new(w, h, data).unwrap();
            let d = downsample_max(&img);
            let n_in = img.nonzero_count();
            let n_out = d.nonzero_count();
            proptest::prop_assert!(n_out <= n_in);
            proptest::prop_assert_eq!(n_out == 0, n_in == 0);
            if n_in > 0 {
                proptest::prop_assert_eq!(d.max_value(), img.max_value());
            }
        }
    }
}
