//! Synthetic misaligned contour pairs: a target contour, a randomly
//! TPS-warped copy of it as source, then salt noise and occlusions on top.
//!
//! One 64-bit seed drives ChaCha8 with a separate stream per purpose, so
//! changing the corruption settings never changes the warp draw.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{binarize, resize_bilinear, ContourImage, Raster, ScalarGrid};
use crate::warp::{apply_warp, tps_field, TpsControlGrid, TpsParams};

pub const STREAM_WARP: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_OCCLUSION: u64 = 3;
pub const STREAM_SHAPE: u64 = 4;

/// Distance contours keep from the canvas border.
pub const MARGIN: usize = 16;
pub const MIN_SIZE: usize = 32;

/// Warp magnitude giving a mean initial asymmetric Chamfer score of 10 px on
/// 128 px synthetic pairs (seeds 0..100, 3x3 lattice); see `calibrate_magnitude`.
pub const DEFAULT_MAGNITUDE: f64 = 32.0;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSpec {
    pub seed: u64,
    /// Largest control-point offset of the ground-truth warp, px.
    pub magnitude: f64,
    /// Control lattice of the ground-truth warp (`grid x grid`).
    pub grid: usize,
    /// Probability that a background pixel becomes noise.
    pub density: f64,
    /// Inclusive range for the number of occlusion boxes.
    pub occlusions: [usize; 2],
    /// Inclusive range for occlusion box sides, px.
    pub box_size: [usize; 2],
    pub size: usize,
    /// Threshold for re-binarizing the warped target.
    pub threshold: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            magnitude: DEFAULT_MAGNITUDE,
            grid: 3,
            density: 0.05,
            occlusions: [1, 3],
            box_size: [8, 24],
            size: 128,
            threshold: 0.25,
        }
    }
}

impl PairSpec {
    /// No noise and no occlusions.
    pub fn clean(seed: u64, magnitude: f64) -> Self {
        Self { seed, magnitude, density: 0.0, occlusions: [0, 0], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.density) {
            return bad(format!("noise density {} outside [0, 1)", self.density));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return bad(format!("warp magnitude {} must be finite and >= 0", self.magnitude));
        }
        if self.size < MIN_SIZE {
            return bad(format!("image size {} below {MIN_SIZE}", self.size));
        }
        if self.grid < 2 {
            return bad("warp grid must be >= 2".into());
        }
        if self.occlusions[0] > self.occlusions[1] {
            return bad("occlusion count range is reversed".into());
        }
        if self.box_size[0] == 0 || self.box_size[0] > self.box_size[1] || self.box_size[1] > self.size {
            return bad(format!("occlusion box range {:?} invalid for size {}", self.box_size, self.size));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
    Stroke,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Polygon, ShapeKind::Stroke];
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "rectangle" => Ok(Self::Rectangle),
            "polygon" => Ok(Self::Polygon),
            "stroke" => Ok(Self::Stroke),
            _ => Err(Error::InvalidConfig(format!("unknown shape kind {s:?}"))),
        }
    }
}

/// Explicit contour geometry in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Ellipse { center: [f64; 2], radii: [f64; 2], angle: f64 },
    /// Axis-aligned, `width x height` pixels with top-left corner `origin`.
    Rectangle { origin: [usize; 2], width: usize, height: usize },
    Polygon { vertices: Vec<[f64; 2]> },
    Stroke { points: Vec<[f64; 2]> },
}

impl Shape {
    /// Random instance of `kind` that fits a `canvas x canvas` image with the margin.
    pub fn random(kind: ShapeKind, canvas: usize, seed: u64) -> Result<Self> {
        if canvas < 2 * MARGIN + 8 {
            return Err(Error::InvalidConfig(format!("canvas {canvas} too small for the {MARGIN}px margin")));
        }
        let mut rng = rng_stream(seed, STREAM_SHAPE);
        let c = (canvas - 1) as f64 / 2.0;
        let room = c - MARGIN as f64 - 1.0;
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.15 * room..=0.15 * room);
        Ok(match kind {
            ShapeKind::Ellipse => {
                let a = rng.random_range(0.5 * room..0.8 * room);
                let b = rng.random_range(0.35 * room..0.75 * room);
                Shape::Ellipse {
                    center: [c + jitter(&mut rng), c + jitter(&mut rng)],
                    radii: [a, b],
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                }
            }
            ShapeKind::Rectangle => {
                let max = (2.0 * room) as usize;
                let width = rng.random_range(max / 2..=max);
                let height = rng.random_range(max / 2..=max);
                let lo = MARGIN + 1;
                let ox = rng.random_range(lo..=canvas - MARGIN - 1 - width);
                let oy = rng.random_range(lo..=canvas - MARGIN - 1 - height);
                Shape::Rectangle { origin: [ox, oy], width, height }
            }
            ShapeKind::Polygon => {
                let k = rng.random_range(5..=8);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let center = [c + jitter(&mut rng), c + jitter(&mut rng)];
                let vertices = (0..k)
                    .map(|i| {
                        let a = phase + std::f64::consts::TAU * (i as f64 + rng.random_range(-0.25..0.25)) / k as f64;
                        let r = rng.random_range(0.45 * room..0.8 * room);
                        [center[0] + r * a.cos(), center[1] + r * a.sin()]
                    })
                    .collect();
                Shape::Polygon { vertices }
            }
            ShapeKind::Stroke => {
                // A smooth open arc: a random circular arc with a wobble.
                let r = rng.random_range(0.5 * room..0.75 * room);
                let span = rng.random_range(1.2 * std::f64::consts::PI..1.7 * std::f64::consts::PI);
                let start = rng.random_range(0.0..std::f64::consts::TAU);
                let wobble = rng.random_range(0.05..0.2) * r;
                let center = [c + jitter(&mut rng), c + jitter(&mut rng)];
                let n = 48;
                let points = (0..=n)
                    .map(|i| {
                        let t = i as f64 / n as f64;
                        let a = start + span * t;
                        let rr = r + wobble * (3.0 * std::f64::consts::PI * t).sin();
                        [center[0] + rr * a.cos(), center[1] + rr * a.sin()]
                    })
                    .collect();
                Shape::Stroke { points }
            }
        })
    }
}

fn line(a: (i64, i64), b: (i64, i64), out: &mut Vec<(i64, i64)>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn polyline(points: &[[f64; 2]], closed: bool) -> Vec<(i64, i64)> {
    let px: Vec<(i64, i64)> = points.iter().map(|p| (p[0].round() as i64, p[1].round() as i64)).collect();
    let mut out = Vec::new();
    for pair in px.windows(2) {
        line(pair[0], pair[1], &mut out);
    }
    if closed && px.len() > 1 {
        line(px[px.len() - 1], px[0], &mut out);
    }
    out
}

/// Drop staircase corners: an on pixel whose only on neighbours are two
/// 4-neighbours that touch each other diagonally adds nothing to 8-connectivity.
fn thin_corners(img: &mut ContourImage<f64>) {
    let (w, h) = img.dims();
    let on = |img: &ContourImage<f64>, x: i64, y: i64| img.get_or_zero(x, y) > 0.5;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !on(img, x, y) {
                continue;
            }
            let n8: Vec<(i64, i64)> = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
                .into_iter()
                .filter(|&(dx, dy)| on(img, x + dx, y + dy))
                .collect();
            if n8.len() == 2 {
                let (a, b) = (n8[0], n8[1]);
                let four = |d: (i64, i64)| d.0 == 0 || d.1 == 0;
                if four(a) && four(b) && (a.0 - b.0).abs() == 1 && (a.1 - b.1).abs() == 1 {
                    img.set(x as usize, y as usize, 0.0);
                }
            }
        }
    }
}

/// Rasterize `shape` as a one-pixel-wide 8-connected contour.
pub fn gen_contour(shape: &Shape, canvas: usize) -> Result<ContourImage<f64>> {
    let pts = match shape {
        Shape::Ellipse { center, radii, angle } => {
            if !(radii[0] > 0.0 && radii[1] > 0.0) {
                return Err(Error::InvalidConfig("ellipse radii must be > 0".into()));
            }
            let n = ((radii[0].max(radii[1]) * std::f64::consts::TAU / 2.0).ceil() as usize).max(8);
            let (s, c) = angle.sin_cos();
            let verts: Vec<[f64; 2]> = (0..n)
                .map(|k| {
                    let t = std::f64::consts::TAU * k as f64 / n as f64;
                    let (u, v) = (radii[0] * t.cos(), radii[1] * t.sin());
                    [center[0] + c * u - s * v, center[1] + s * u + c * v]
                })
                .collect();
            polyline(&verts, true)
        }
        Shape::Rectangle { origin, width, height } => {
            if *width < 2 || *height < 2 {
                return Err(Error::InvalidConfig("rectangle sides must be >= 2".into()));
            }
            let [x0, y0] = [origin[0] as f64, origin[1] as f64];
            let [x1, y1] = [x0 + (*width - 1) as f64, y0 + (*height - 1) as f64];
            polyline(&[[x0, y0], [x1, y0], [x1, y1], [x0, y1]], true)
        }
        Shape::Polygon { vertices } => {
            if vertices.len() < 3 {
                return Err(Error::InvalidConfig("polygon needs >= 3 vertices".into()));
            }
            polyline(vertices, true)
        }
        Shape::Stroke { points } => {
            if points.len() < 2 {
                return Err(Error::InvalidConfig("stroke needs >= 2 points".into()));
            }
            polyline(points, false)
        }
    };
    let lo = MARGIN as i64;
    let hi = canvas as i64 - 1 - MARGIN as i64;
    if let Some(p) = pts.iter().find(|p| p.0 < lo || p.1 < lo || p.0 > hi || p.1 > hi) {
        return Err(Error::InvalidConfig(format!(
            "shape pixel {p:?} outside the {MARGIN}px margin of a {canvas}px canvas"
        )));
    }
    let pixels: Vec<(usize, usize)> = pts.iter().map(|&(x, y)| (x as usize, y as usize)).collect();
    let mut img = ContourImage::from_pixels(canvas, canvas, &pixels);
    if !matches!(shape, Shape::Rectangle { .. }) {
        thin_corners(&mut img);
    }
    Ok(img)
}

/// Random contour of `kind`, deterministic per seed.
pub fn gen_random_contour(kind: ShapeKind, canvas: usize, seed: u64) -> Result<ContourImage<f64>> {
    gen_contour(&Shape::random(kind, canvas, seed)?, canvas)
}

/// Shape kind used for dataset item `seed`; cycles through every kind.
pub fn kind_for_seed(seed: u64) -> ShapeKind {
    ShapeKind::ALL[(seed % 4) as usize]
}

const IDX3_MAGIC: u32 = 2051;
pub const MNIST_SIZE: usize = 128;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse { offset, message: "truncated header".into() })
}

/// Outer boundary of a binary image: on pixels with a background (or
/// out-of-canvas) 4-neighbour.
pub fn boundary(img: &ContourImage<f64>) -> ContourImage<f64> {
    let (w, h) = img.dims();
    let on = |x: i64, y: i64| img.get_or_zero(x, y) > 0.5;
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let edge = on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1));
            if edge { 1.0 } else { 0.0 }
        })
        .collect();
    ContourImage::new(w, h, data).expect("same dims")
}

/// Parse an IDX3 image file already in memory.
pub fn parse_mnist_contours(bytes: &[u8]) -> Result<Vec<ContourImage<f64>>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX3_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("expected IDX3 magic {IDX3_MAGIC}, found {magic}") });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse { offset: 8, message: format!("empty image size {rows}x{cols}") });
    }
    let per = rows * cols;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * per;
        let Some(px) = bytes.get(start..start + per) else {
            return Err(Error::Parse { offset: bytes.len(), message: format!("truncated payload in image {i}") });
        };
        let grid = ScalarGrid::new(cols, rows, px.iter().map(|&b| b as f64 / 255.0).collect())?;
        let big = resize_bilinear(&grid, MNIST_SIZE, MNIST_SIZE);
        out.push(boundary(&binarize(&big, 0.5)?));
    }
    Ok(out)
}

pub fn load_mnist_contours(path: impl AsRef<Path>) -> Result<Vec<ContourImage<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_mnist_contours(&bytes)
}

/// Control offsets i.i.d. uniform in `[-magnitude, magnitude]`, identity affine part.
pub fn random_tps(seed: u64, magnitude: f64, grid: &TpsControlGrid<f64>) -> TpsParams<f64> {
    let mut p = TpsParams::identity(grid.len());
    if magnitude > 0.0 {
        let mut rng = rng_stream(seed, STREAM_WARP);
        for o in &mut p.offsets {
            *o = [rng.random_range(-magnitude..=magnitude), rng.random_range(-magnitude..=magnitude)];
        }
    }
    p
}

/// Erase contour pixels inside random boxes, then turn background pixels on
/// with probability `density`.
pub fn corrupt(img: &ContourImage<f64>, spec: &PairSpec, seed: u64) -> Result<ContourImage<f64>> {
    spec.validate()?;
    let (w, h) = img.dims();
    let mut out = img.clone();
    let mut rng = rng_stream(seed, STREAM_OCCLUSION);
    let count = rng.random_range(spec.occlusions[0]..=spec.occlusions[1]);
    for _ in 0..count {
        let bw = rng.random_range(spec.box_size[0]..=spec.box_size[1]).min(w);
        let bh = rng.random_range(spec.box_size[0]..=spec.box_size[1]).min(h);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                out.set(x, y, 0.0);
            }
        }
    }
    if spec.density > 0.0 {
        let mut rng = rng_stream(seed, STREAM_NOISE);
        for y in 0..h {
            for x in 0..w {
                // One draw per pixel keeps the noise pattern independent of the content.
                let hit = rng.random::<f64>() < spec.density;
                if hit && out.at(x, y) == 0.0 {
                    out.set(x, y, 1.0);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimPair {
    pub seed: u64,
    /// Corrupted, warped copy of the target.
    pub source: ContourImage<f64>,
    pub target: ContourImage<f64>,
    /// Warped target before corruption.
    pub clean_source: ContourImage<f64>,
    pub gt_warp: TpsParams<f64>,
    pub gt_grid: TpsControlGrid<f64>,
}

impl SimPair {
    /// Dense ground-truth field: `clean_source(p)` samples the target at `field(p)`.
    pub fn gt_field(&self) -> Result<crate::warp::WarpField<f64>> {
        let (w, h) = self.target.dims();
        tps_field(&self.gt_warp, &self.gt_grid, w, h)
    }

    /// Asymmetric Chamfer score of the clean pair before alignment.
    pub fn initial_misalignment(&self) -> Result<f64> {
        crate::eval::asym_chamfer(&self.clean_source, &self.target)
    }
}

pub fn make_pair(base: &ContourImage<f64>, spec: &PairSpec) -> Result<SimPair> {
    spec.validate()?;
    if base.dims() != (spec.size, spec.size) {
        return Err(Error::InvalidConfig(format!(
            "base image is {}x{}, canvas is {}x{}",
            base.width(),
            base.height(),
            spec.size,
            spec.size
        )));
    }
    if base.nonzero_count() == 0 {
        return Err(Error::EmptyShape("base contour is empty".into()));
    }
    let gt_grid = TpsControlGrid::new(spec.grid, spec.size, spec.size)?;
    let gt_warp = random_tps(spec.seed, spec.magnitude, &gt_grid);
    let field = tps_field(&gt_warp, &gt_grid, spec.size, spec.size)?;
    let clean_source = binarize(&apply_warp(&base.to_grid(), &field)?, spec.threshold)?;
    if clean_source.nonzero_count() == 0 {
        return Err(Error::Degenerate(format!("warp {} moved the contour off the canvas", spec.seed)));
    }
    let source = corrupt(&clean_source, spec, spec.seed)?;
    Ok(SimPair { seed: spec.seed, source, target: base.clone(), clean_source, gt_warp, gt_grid })
}

/// Synthetic pair for dataset item `spec.seed`: a random shape of the kind
/// chosen by the seed, warped and corrupted per `spec`.
pub fn synthetic_pair(spec: &PairSpec) -> Result<SimPair> {
    let base = gen_random_contour(kind_for_seed(spec.seed), spec.size, spec.seed)?;
    make_pair(&base, spec)
}

/// Mean initial asymmetric Chamfer score of synthetic clean pairs for `seeds`
/// at the given warp magnitude.
pub fn mean_initial_misalignment(template: &PairSpec, magnitude: f64, seeds: &[u64]) -> Result<f64> {
    let mut sum = 0.0;
    for &seed in seeds {
        let spec = PairSpec { seed, magnitude, ..template.clone() };
        sum += synthetic_pair(&spec)?.initial_misalignment()?;
    }
    Ok(sum / seeds.len().max(1) as f64)
}

/// Bisect the warp magnitude so that the mean initial score over `seeds`
/// hits `target_px`. Returns the magnitude and the mean it produced.
pub fn calibrate_magnitude(template: &PairSpec, seeds: &[u64], target_px: f64) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (0.0, 4.0 * target_px);
    let mut best = (hi, mean_initial_misalignment(template, hi, seeds)?);
    if best.1 < target_px {
        return Ok(best);
    }
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let m = mean_initial_misalignment(template, mid, seeds)?;
        if (m - target_px).abs() < (best.1 - target_px).abs() {
            best = (mid, m);
        }
        if m < target_px {
            lo = mid;
        } else {
            hi = mid;
        }
        if (m - target_px).abs() < 0.01 {
            break;
        }
    }
    Ok(best)
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub seed: u64,
    pub spec: PairSpec,
    pub source: String,
    pub target: String,
    pub clean_source: String,
    pub gt_warp: String,
}

/// Ground-truth warp as stored next to a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtWarpFile {
    pub grid: usize,
    pub width: usize,
    pub height: usize,
    /// `[dx, dy]` per control point, row-major over the lattice.
    pub offsets: Vec<[f64; 2]>,
    /// `a11 a12 tx a21 a22 ty`.
    pub affine: Vec<f64>,
}

impl GtWarpFile {
    pub fn of(pair: &SimPair) -> Self {
        let (width, height) = pair.gt_grid.dims();
        Self {
            grid: pair.gt_grid.g(),
            width,
            height,
            offsets: pair.gt_warp.offsets.clone(),
            affine: pair.gt_warp.affine.to_vec(),
        }
    }

    pub fn into_parts(self) -> Result<(TpsParams<f64>, TpsControlGrid<f64>)> {
        let grid = TpsControlGrid::new(self.grid, self.width, self.height)?;
        if self.offsets.len() != grid.len() {
            return Err(Error::mismatch((grid.len(), 1), (self.offsets.len(), 1)));
        }
        let affine = crate::warp::AffineParams::from_slice(&self.affine)?;
        Ok((TpsParams { offsets: self.offsets, affine }, grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_perimeter() {
        for (w, h) in [(10, 20), (2, 2), (50, 31)] {
            let img = gen_contour(&Shape::Rectangle { origin: [20, 20], width: w, height: h }, 128).unwrap();
            assert_eq!(img.nonzero_count(), 2 * (w + h) - 4);
        }
    }

    #[test]
    fn circle_count_near_circumference() {
        let img = gen_contour(&Shape::Ellipse { center: [64.0, 64.0], radii: [20.0, 20.0], angle: 0.3 }, 128).unwrap();
        let n = img.nonzero_count() as f64;
        let c = std::f64::consts::TAU * 20.0;
        assert!((n - c).abs() < 0.15 * c, "{n} vs {c}");
    }

    fn eight_neighbours(img: &ContourImage<f64>, x: usize, y: usize) -> usize {
        let mut k = 0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dx, dy) != (0, 0) && img.get_or_zero(x as i64 + dx, y as i64 + dy) > 0.5 {
                    k += 1;
                }
            }
        }
        k
    }

    #[test]
    fn random_shapes_fit_and_repeat() {
        for seed in 0..40 {
            for kind in ShapeKind::ALL {
                let a = gen_random_contour(kind, 128, seed).unwrap();
                assert_eq!(a, gen_random_contour(kind, 128, seed).unwrap());
                let px = a.on_pixels();
                assert!(px.len() > 40);
                for &(x, y) in &px {
                    assert!(x >= MARGIN && y >= MARGIN && x < 128 - MARGIN && y < 128 - MARGIN);
                    assert!(eight_neighbours(&a, x, y) >= 1);
                }
            }
        }
    }

    #[test]
    fn out_of_margin_rejected() {
        let r = gen_contour(&Shape::Ellipse { center: [20.0, 64.0], radii: [10.0, 10.0], angle: 0.0 }, 128);
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    fn idx(images: &[Vec<u8>], magic: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, images.len() as u32, 28, 28] {
            b.extend(v.to_be_bytes());
        }
        for im in images {
            b.extend(im);
        }
        b
    }

    #[test]
    fn mnist_square_becomes_ring() {
        let mut im = vec![0u8; 784];
        for y in 9..19 {
            for x in 9..19 {
                im[y * 28 + x] = 255;
            }
        }
        let out = parse_mnist_contours(&idx(&[im], 2051)).unwrap();
        assert_eq!(out.len(), 1);
        let c = &out[0];
        assert_eq!(c.dims(), (128, 128));
        let px = c.on_pixels();
        let (x0, x1) = (px.iter().map(|p| p.0).min().unwrap(), px.iter().map(|p| p.0).max().unwrap());
        let (y0, y1) = (px.iter().map(|p| p.1).min().unwrap(), px.iter().map(|p| p.1).max().unwrap());
        // Bilinear upsampling rounds the corners off by a pixel or two.
        let perimeter = 2 * ((x1 - x0 + 1) + (y1 - y0 + 1)) - 4;
        assert!(px.len() <= perimeter && px.len() + 12 >= perimeter, "{} vs {perimeter}", px.len());
        assert!(x1 - x0 > 35 && y1 - y0 > 35);
        for &(x, y) in &px {
            assert_eq!(eight_neighbours(c, x, y), 2, "closed one-pixel ring at ({x}, {y})");
        }
    }

    #[test]
    fn mnist_errors() {
        match parse_mnist_contours(&idx(&[], 2049)) {
            Err(Error::Parse { offset: 0, message }) => assert!(message.contains("2051")),
            other => panic!("{other:?}"),
        }
        assert!(parse_mnist_contours(&idx(&[], 2051)).unwrap().is_empty());
        let mut b = idx(&[vec![0; 784]], 2051);
        b.truncate(100);
        assert!(matches!(parse_mnist_contours(&b), Err(Error::Parse { .. })));
        assert!(matches!(parse_mnist_contours(&b[..6]), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn tps_draws() {
        let g = TpsControlGrid::new(4, 128, 128).unwrap();
        assert_eq!(random_tps(3, 0.0, &g), TpsParams::identity(16));
        assert_eq!(random_tps(3, 8.0, &g), random_tps(3, 8.0, &g));
        let mut sum = 0.0;
        let mut n = 0.0;
        for seed in 0..1000 {
            for o in random_tps(seed, 8.0, &g).offsets {
                for v in o {
                    assert!(v.abs() <= 8.0);
                    sum += v.abs();
                    n += 1.0;
                }
            }
        }
        assert!((sum / n - 4.0).abs() < 0.4);
    }

    #[test]
    fn corruption() {
        let img = gen_random_contour(ShapeKind::Ellipse, 128, 1).unwrap();
        let none = PairSpec { density: 0.0, occlusions: [0, 0], ..PairSpec::default() };
        assert_eq!(corrupt(&img, &none, 5).unwrap(), img);

        let noisy = PairSpec { density: 0.1, occlusions: [0, 0], ..PairSpec::default() };
        let out = corrupt(&img, &noisy, 5).unwrap();
        let bg = 128 * 128 - img.nonzero_count();
        let added = out.nonzero_count() - img.nonzero_count();
        assert!((added as f64 / bg as f64 - 0.1).abs() < 0.02);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!(*a == 0.0 || *b == 1.0, "noise never removes contour");
        }

        let erase = PairSpec { density: 0.0, occlusions: [1, 1], box_size: [128, 128], ..PairSpec::default() };
        assert_eq!(corrupt(&img, &erase, 5).unwrap().nonzero_count(), 0);
    }

    #[test]
    fn pairs() {
        let base = gen_random_contour(ShapeKind::Polygon, 128, 9).unwrap();
        let p = make_pair(&base, &PairSpec::clean(9, 0.0)).unwrap();
        assert_eq!(p.source, p.target);
        let spec = PairSpec { seed: 4, ..PairSpec::default() };
        let a = make_pair(&base, &spec).unwrap();
        let b = make_pair(&base, &spec).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.gt_warp, b.gt_warp);
        // Occlusion settings do not touch the warp draw.
        let c = make_pair(&base, &PairSpec { occlusions: [3, 3], ..spec.clone() }).unwrap();
        assert_eq!(a.clean_source, c.clean_source);
        // Corruption only adds noise or erases.
        let changed = a.source.data().iter().zip(a.clean_source.data()).filter(|(x, y)| x != y).count();
        assert!(changed > 0);
        assert!(make_pair(&base, &PairSpec { size: 64, ..spec }).is_err());
    }

    #[test]
    fn gt_file_roundtrip() {
        let p = synthetic_pair(&PairSpec { seed: 2, ..PairSpec::default() }).unwrap();
        let f = GtWarpFile::of(&p);
        let json = serde_json::to_string(&f).unwrap();
        let (params, grid) = serde_json::from_str::<GtWarpFile>(&json).unwrap().into_parts().unwrap();
        assert_eq!(params, p.gt_warp);
        assert_eq!(grid.points(), p.gt_grid.points());
    }
}
