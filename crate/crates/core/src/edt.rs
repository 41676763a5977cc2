//! Exact Euclidean distance transform.
//!
//! Distances are computed as exact integer squared distances with the
//! separable lower-envelope-of-parabolas method, then square-rooted once.
//! A pixel counts as "on" when its value exceeds one half.

use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::raster::{ContourImage, Raster};

/// Per-pixel distance to the nearest on pixel of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField<T: Real> {
    width: usize,
    height: usize,
    squared: Vec<u64>,
    data: Vec<T>,
}

impl<T: Real> DistanceField<T> {
    fn from_squared(width: usize, height: usize, squared: Vec<u64>) -> Self {
        let data = squared.iter().map(|&d| T::lit((d as f64).sqrt())).collect();
        Self { width, height, squared, data }
    }

    /// Exact squared distances.
    pub fn squared(&self) -> &[u64] {
        &self.squared
    }

    pub fn transpose(&self) -> Self {
        let mut sq = Vec::with_capacity(self.squared.len());
        for x in 0..self.width {
            for y in 0..self.height {
                sq.push(self.squared[y * self.width + x]);
            }
        }
        Self::from_squared(self.height, self.width, sq)
    }

    /// 8-bit image (PGM or PNG by extension) scaled so the largest distance
    /// maps to 255, the text of its sidecar, and the distance per gray level.
    pub fn encode_dump(&self, path: impl AsRef<Path>) -> Result<(Vec<u8>, String, f64)> {
        let max = self.data.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
        let scale = if max > 0.0 { max / 255.0 } else { 1.0 };
        let bytes = self
            .data
            .iter()
            .map(|v| (v.as_f64() / scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        let image = crate::raster::encode_gray(path.as_ref(), self.width, self.height, bytes)?;
        let side = format!("# distance = gray_level * scale\nscale {scale:.17e}\nmax {max:.17e}\n");
        Ok((image, side, scale))
    }

    /// Write an 8-bit PGM scaled so the largest distance maps to 255, plus a
    /// `<path>.txt` sidecar holding the distance represented by one gray level.
    pub fn dump_pgm(&self, path: impl AsRef<Path>) -> Result<f64> {
        let path = path.as_ref();
        let (image, side, scale) = self.encode_dump(path)?;
        std::fs::write(path, image)?;
        std::fs::write(sidecar_path(path), side)?;
        Ok(scale)
    }
}

/// `<path>.txt`, where distance dumps keep their scale.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    side.into()
}

impl<T: Real> Raster<T> for DistanceField<T> {
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

fn require_on<T: Real>(img: &ContourImage<T>) -> Result<Vec<bool>> {
    let half = T::lit(0.5);
    let mask: Vec<bool> = img.data().iter().map(|v| *v > half).collect();
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyShape("distance transform of an image with no on pixels".into()));
    }
    Ok(mask)
}

/// Exact Euclidean distance transform in `O(width * height)`.
pub fn edt<T: Real>(img: &ContourImage<T>) -> Result<DistanceField<T>> {
    let mask = require_on(img)?;
    let (w, h) = img.dims();

    // Pass 1: squared distance to the nearest on pixel within each column.
    let mut col = vec![None::<u64>; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask[y * w + x] {
                last = Some(y);
            }
            col[y * w + x] = last.map(|l| ((y - l) as u64).pow(2));
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask[y * w + x] {
                next = Some(y);
            }
            if let Some(n) = next {
                let d = ((n - y) as u64).pow(2);
                let cell = &mut col[y * w + x];
                *cell = Some(cell.map_or(d, |c| c.min(d)));
            }
        }
    }

    // Pass 2: lower envelope of parabolas along each row.
    let mut out = vec![0u64; w * h];
    let mut f = vec![None::<u64>; w];
    let mut row = vec![0u64; w];
    let mut env = Envelope::with_capacity(w);
    for y in 0..h {
        f.copy_from_slice(&col[y * w..(y + 1) * w]);
        env.lower_envelope(&f, &mut row);
        out[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    Ok(DistanceField::from_squared(w, h, out))
}

/// Rational breakpoint `num / den` with `den > 0`, or minus/plus infinity.
#[derive(Clone, Copy, Debug)]
enum Break {
    NegInf,
    At(i128, i128),
    PosInf,
}

impl Break {
    /// `self <= other`
    fn le(self, other: Break) -> bool {
        match (self, other) {
            (Break::NegInf, _) | (_, Break::PosInf) => true,
            (_, Break::NegInf) | (Break::PosInf, _) => false,
            (Break::At(a, b), Break::At(c, d)) => a * d <= c * b,
        }
    }

    /// `self < q`
    fn lt_int(self, q: i128) -> bool {
        match self {
            Break::NegInf => true,
            Break::PosInf => false,
            Break::At(n, d) => n < q * d,
        }
    }
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<Break>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    /// `out[q] = min_p (q - p)^2 + f[p]` over finite `f[p]`.
    fn lower_envelope(&mut self, f: &[Option<u64>], out: &mut [u64]) {
        self.v.clear();
        self.z.clear();
        let key = |p: usize| f[p].unwrap() as i128 + (p as i128) * (p as i128);
        for (q, fq) in f.iter().enumerate() {
            if fq.is_none() {
                continue;
            }
            if self.v.is_empty() {
                self.v.push(q);
                self.z.push(Break::NegInf);
                self.z.push(Break::PosInf);
                continue;
            }
            loop {
                let p = *self.v.last().unwrap();
                let s = Break::At(key(q) - key(p), 2 * (q as i128 - p as i128));
                let k = self.v.len() - 1;
                if k > 0 && s.le(self.z[k]) {
                    self.v.pop();
                    self.z.pop();
                    continue;
                }
                let last = self.z.len() - 1;
                self.z[last] = s;
                self.v.push(q);
                self.z.push(Break::PosInf);
                break;
            }
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while self.z[k + 1].lt_int(q as i128) {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as i64 - p as i64;
            *o = (dq * dq) as u64 + f[p].unwrap();
        }
    }
}

/// Literal `O(N^2)` scan over all (pixel, on pixel) pairs; the testing oracle.
pub fn edt_bruteforce<T: Real>(img: &ContourImage<T>) -> Result<DistanceField<T>> {
    let mask = require_on(img)?;
    let (w, h) = img.dims();
    let on: Vec<(i64, i64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| ((i % w) as i64, (i / w) as i64))
        .collect();
    let mut sq = Vec::with_capacity(w * h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let d = on
                .iter()
                .map(|&(ox, oy)| ((x - ox).pow(2) + (y - oy).pow(2)) as u64)
                .min()
                .unwrap();
            sq.push(d);
        }
    }
    Ok(DistanceField::from_squared(w, h, sq))
}
