//! Transform families and dense backward-sampling warp fields.
//!
//! A [`WarpField`] stores, for every output pixel `p`, the coordinate `q(p)`
//! in the input image to sample from. Coordinates are pixel-center based with
//! the origin at pixel `(0, 0)`. Sampling outside the domain reads zero.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::num::{dot4, Real};
use crate::raster::{FromSamples, Raster};

/// Dense backward map `q(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField<T: Real> {
    width: usize,
    height: usize,
    coords: Vec<[T; 2]>,
}

impl<T: Real> WarpField<T> {
    pub fn new(width: usize, height: usize, coords: Vec<[T; 2]>) -> Result<Self> {
        if coords.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} coordinates for {width}x{height} field",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite warp coordinate".into()));
        }
        Ok(Self { width, height, coords })
    }

    pub(crate) fn from_coords_unchecked(width: usize, height: usize, coords: Vec<[T; 2]>) -> Self {
        Self { width, height, coords }
    }

    pub fn identity(width: usize, height: usize) -> Self {
        let mut coords = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                coords.push([T::from_usize_lossy(x), T::from_usize_lossy(y)]);
            }
        }
        Self { width, height, coords }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(T, T) -> [T; 2]) -> Self {
        let mut coords = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                coords.push(f(T::from_usize_lossy(x), T::from_usize_lossy(y)));
            }
        }
        Self { width, height, coords }
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

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [T; 2] {
        self.coords[y * self.width + x]
    }

    #[inline]
    pub fn displacement_at(&self, x: usize, y: usize) -> [T; 2] {
        let q = self.at(x, y);
        [q[0] - T::from_usize_lossy(x), q[1] - T::from_usize_lossy(y)]
    }

    pub fn displacements(&self) -> Vec<[T; 2]> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.displacement_at(x, y))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite())
    }

    /// Mean Euclidean length of the displacement, in pixels.
    pub fn mean_displacement(&self) -> T {
        let n = T::from_usize_lossy(self.coords.len());
        crate::num::ordered_sum(
            self.displacements()
                .into_iter()
                .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt()),
        ) / n
    }

    /// Largest per-coordinate difference to another field of equal size.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.coords
            .iter()
            .zip(&other.coords)
            .fold(T::zero(), |m, (a, b)| m.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs()))
    }

    /// Displacement sampled bilinearly at a continuous location, clamped to the border.
    pub fn sample_displacement(&self, x: T, y: T) -> [T; 2] {
        let maxx = T::from_usize_lossy(self.width - 1);
        let maxy = T::from_usize_lossy(self.height - 1);
        let x = x.max(T::zero()).min(maxx);
        let y = y.max(T::zero()).min(maxy);
        let x0 = x.floor().to_usize().unwrap().min(self.width.saturating_sub(2));
        let y0 = y.floor().to_usize().unwrap().min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - T::from_usize_lossy(x0);
        let fy = y - T::from_usize_lossy(y0);
        let one = T::one();
        let d00 = self.displacement_at(x0, y0);
        let d10 = self.displacement_at(x1, y0);
        let d01 = self.displacement_at(x0, y1);
        let d11 = self.displacement_at(x1, y1);
        let mut out = [T::zero(); 2];
        for k in 0..2 {
            let top = d00[k] * (one - fx) + d10[k] * fx;
            let bot = d01[k] * (one - fx) + d11[k] * fx;
            out[k] = top * (one - fy) + bot * fy;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> WarpField<U> {
        WarpField {
            width: self.width,
            height: self.height,
            coords: self
                .coords
                .iter()
                .map(|c| [U::lit(c[0].as_f64()), U::lit(c[1].as_f64())])
                .collect(),
        }
    }

    /// Little-endian `WFLD` record: magic, `u32` width, `u32` height, then
    /// row-major `f64` `(x, y)` coordinate pairs.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"WFLD")?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.coords.len() * 16);
        for c in &self.coords {
            buf.extend_from_slice(&c[0].as_f64().to_le_bytes());
            buf.extend_from_slice(&c[1].as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.coords.len() * 16);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Parse { offset: bytes.len(), message: "truncated WFLD header".into() });
        }
        if &bytes[0..4] != b"WFLD" {
            return Err(Error::Parse { offset: 0, message: "expected magic WFLD".into() });
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + width * height * 16;
        if bytes.len() != need {
            return Err(Error::Parse {
                offset: bytes.len().min(need),
                message: format!("expected {need} bytes for {width}x{height} field, found {}", bytes.len()),
            });
        }
        let coords = bytes[12..]
            .chunks_exact(16)
            .map(|c| {
                let x = f64::from_le_bytes(c[0..8].try_into().unwrap());
                let y = f64::from_le_bytes(c[8..16].try_into().unwrap());
                [T::lit(x), T::lit(y)]
            })
            .collect();
        Self::new(width, height, coords)
    }
}

/// Six-parameter affine map `q = A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams<T: Real> {
    pub a11: T,
    pub a12: T,
    pub tx: T,
    pub a21: T,
    pub a22: T,
    pub ty: T,
}

impl<T: Real> AffineParams<T> {
    pub const LEN: usize = 6;

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { a11: o, a12: z, tx: z, a21: z, a22: o, ty: z }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        Self { tx, ty, ..Self::identity() }
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`.
    pub fn rotation_about(angle: T, scale: T, center: [T; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let (a11, a12, a21, a22) = (scale * c, -scale * s, scale * s, scale * c);
        Self {
            a11,
            a12,
            a21,
            a22,
            tx: center[0] - (a11 * center[0] + a12 * center[1]),
            ty: center[1] - (a21 * center[0] + a22 * center[1]),
        }
    }

    pub fn det(&self) -> T {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    #[inline]
    pub fn apply(&self, p: [T; 2]) -> [T; 2] {
        [
            self.a11 * p[0] + self.a12 * p[1] + self.tx,
            self.a21 * p[0] + self.a22 * p[1] + self.ty,
        ]
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::InvalidInput(format!("affine needs 6 parameters, got {}", v.len())));
        }
        Ok(Self { a11: v[0], a12: v[1], tx: v[2], a21: v[3], a22: v[4], ty: v[5] })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Parameters of `self` applied after `first`: `p -> self(first(p))`.
    pub fn after(&self, first: &Self) -> Self {
        Self {
            a11: self.a11 * first.a11 + self.a12 * first.a21,
            a12: self.a11 * first.a12 + self.a12 * first.a22,
            tx: self.a11 * first.tx + self.a12 * first.ty + self.tx,
            a21: self.a21 * first.a11 + self.a22 * first.a21,
            a22: self.a21 * first.a12 + self.a22 * first.a22,
            ty: self.a21 * first.tx + self.a22 * first.ty + self.ty,
        }
    }

    pub fn cast<U: Real>(&self) -> AffineParams<U> {
        let v: Vec<U> = self.to_vec().iter().map(|x| U::lit(x.as_f64())).collect();
        AffineParams::from_slice(&v).unwrap()
    }
}

/// Smallest |det| accepted as invertible.
pub const MIN_AFFINE_DET: f64 = 1e-8;

pub fn affine_field<T: Real>(params: &AffineParams<T>, width: usize, height: usize) -> WarpField<T> {
    WarpField::from_fn(width, height, |x, y| params.apply([x, y]))
}

pub fn affine_inverse<T: Real>(params: &AffineParams<T>) -> Result<AffineParams<T>> {
    let det = params.det();
    if !det.is_finite() || det.abs() <= T::lit(MIN_AFFINE_DET) {
        return Err(Error::SingularTransform { det: det.as_f64() });
    }
    let a11 = params.a22 / det;
    let a12 = -params.a12 / det;
    let a21 = -params.a21 / det;
    let a22 = params.a11 / det;
    Ok(AffineParams {
        a11,
        a12,
        a21,
        a22,
        tx: -(a11 * params.tx + a12 * params.ty),
        ty: -(a21 * params.tx + a22 * params.ty),
    })
}

/// TPS radial kernel `U(r) = r^2 log(r^2)` as a function of `r^2`.
#[inline]
pub fn tps_kernel<T: Real>(r2: T) -> T {
    if r2 <= T::zero() {
        T::zero()
    } else {
        r2 * r2.ln()
    }
}

/// Regular `g x g` lattice of TPS control points spanning `[0, w-1] x [0, h-1]`,
/// with the interpolation system factorized once.
#[derive(Debug, Clone)]
pub struct TpsControlGrid<T: Real> {
    g: usize,
    width: usize,
    height: usize,
    scale: T,
    points: Vec<[T; 2]>,
    /// Normalized control points.
    knots: Vec<[T; 2]>,
    /// Rows `0..n+3` of the inverse system restricted to its first `n` columns,
    /// row-major: maps control displacements to `(kernel weights, a0, ax, ay)`.
    solve: Vec<T>,
    /// Kernel matrix between control points, for bending energy.
    gram: Vec<T>,
}

impl<T: Real> TpsControlGrid<T> {
    pub fn new(g: usize, width: usize, height: usize) -> Result<Self> {
        if g < 2 {
            return Err(Error::InvalidConfig(format!("TPS lattice needs g >= 2, got {g}")));
        }
        if width < 2 || height < 2 {
            return Err(Error::InvalidConfig(format!("TPS domain {width}x{height} too small")));
        }
        let n = g * g;
        let sx = (width - 1) as f64 / (g - 1) as f64;
        let sy = (height - 1) as f64 / (g - 1) as f64;
        let scale = (width.max(height) - 1) as f64;
        let mut pts = Vec::with_capacity(n);
        for j in 0..g {
            for i in 0..g {
                pts.push([i as f64 * sx, j as f64 * sy]);
            }
        }
        let knots: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] / scale, p[1] / scale]).collect();
        let m = n + 3;
        let mut sys = DMatrix::<f64>::zeros(m, m);
        let mut gram = vec![0.0f64; n * n];
        for a in 0..n {
            for b in 0..n {
                let dx = knots[a][0] - knots[b][0];
                let dy = knots[a][1] - knots[b][1];
                let k = tps_kernel(dx * dx + dy * dy);
                sys[(a, b)] = k;
                gram[a * n + b] = k;
            }
            sys[(a, n)] = 1.0;
            sys[(a, n + 1)] = knots[a][0];
            sys[(a, n + 2)] = knots[a][1];
            sys[(n, a)] = 1.0;
            sys[(n + 1, a)] = knots[a][0];
            sys[(n + 2, a)] = knots[a][1];
        }
        let inv = sys
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("singular TPS system for g = {g}")))?;
        let mut solve = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                solve.push(T::lit(inv[(r, c)]));
            }
        }
        Ok(Self {
            g,
            width,
            height,
            scale: T::lit(scale),
            points: pts.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect(),
            knots: knots.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect(),
            solve,
            gram: gram.into_iter().map(T::lit).collect(),
        })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    /// Number of control points `n = g^2`.
    pub fn len(&self) -> usize {
        self.g * self.g
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn points(&self) -> &[[T; 2]] {
        &self.points
    }

    /// Spline coefficients for one axis of control displacements:
    /// `n` kernel weights followed by `(a0, ax, ay)`.
    pub fn coefficients(&self, disp: &[T]) -> Vec<T> {
        let n = self.len();
        debug_assert_eq!(disp.len(), n);
        (0..n + 3).map(|r| dot4(&self.solve[r * n..(r + 1) * n], disp)).collect()
    }

    /// Adjoint of [`coefficients`](Self::coefficients).
    pub fn coefficients_adjoint(&self, grad_coef: &[T]) -> Vec<T> {
        let n = self.len();
        let mut out = vec![T::zero(); n];
        for (r, &g) in grad_coef.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (o, s) in out.iter_mut().zip(&self.solve[r * n..(r + 1) * n]) {
                *o += g * *s;
            }
        }
        out
    }

    /// Basis row `[U(|z - c_j|)..., 1, zx, zy]` (normalized) at pixel location `z`.
    pub fn basis_row(&self, z: [T; 2], out: &mut [T]) {
        let n = self.len();
        let zx = z[0] / self.scale;
        let zy = z[1] / self.scale;
        for (o, k) in out[..n].iter_mut().zip(&self.knots) {
            let dx = zx - k[0];
            let dy = zy - k[1];
            *o = tps_kernel(dx * dx + dy * dy);
        }
        out[n] = T::one();
        out[n + 1] = zx;
        out[n + 2] = zy;
    }

    /// Bending energy `w^T K w` of one axis of kernel weights.
    pub fn bending_energy(&self, weights: &[T]) -> T {
        let n = self.len();
        let mut e = T::zero();
        for a in 0..n {
            e += weights[a] * dot4(&self.gram[a * n..(a + 1) * n], &weights[..n]);
        }
        e
    }

    /// Gradient of [`bending_energy`](Self::bending_energy) wrt the weights.
    pub fn bending_energy_grad(&self, weights: &[T]) -> Vec<T> {
        let n = self.len();
        (0..n)
            .map(|a| T::lit(2.0) * dot4(&self.gram[a * n..(a + 1) * n], &weights[..n]))
            .collect()
    }
}

/// Control displacements plus a global affine part: `q(z) = A z + t + D(z)`,
/// where `D` interpolates the control displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams<T: Real> {
    pub offsets: Vec<[T; 2]>,
    pub affine: AffineParams<T>,
}

impl<T: Real> TpsParams<T> {
    pub fn identity(n: usize) -> Self {
        Self { offsets: vec![[T::zero(); 2]; n], affine: AffineParams::identity() }
    }

    /// Flat `2n + 6` layout: `(dx_0, dy_0, ..., dx_{n-1}, dy_{n-1}, affine...)`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v: Vec<T> = self.offsets.iter().flat_map(|o| [o[0], o[1]]).collect();
        v.extend(self.affine.to_vec());
        v
    }

    pub fn from_slice(v: &[T], n: usize) -> Result<Self> {
        if v.len() != 2 * n + 6 {
            return Err(Error::InvalidInput(format!(
                "TPS with {n} controls needs {} parameters, got {}",
                2 * n + 6,
                v.len()
            )));
        }
        let offsets = v[..2 * n].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Ok(Self { offsets, affine: AffineParams::from_slice(&v[2 * n..])? })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> TpsParams<U> {
        let v: Vec<U> = self.to_vec().iter().map(|x| U::lit(x.as_f64())).collect();
        TpsParams::from_slice(&v, self.offsets.len()).unwrap()
    }
}

/// Evaluates a TPS transform at arbitrary points.
pub struct TpsEvaluator<'a, T: Real> {
    grid: &'a TpsControlGrid<T>,
    cx: Vec<T>,
    cy: Vec<T>,
    affine: AffineParams<T>,
    row: Vec<T>,
}

impl<'a, T: Real> TpsEvaluator<'a, T> {
    pub fn new(params: &TpsParams<T>, grid: &'a TpsControlGrid<T>) -> Result<Self> {
        if params.offsets.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} offsets for a {}-point lattice",
                params.offsets.len(),
                grid.len()
            )));
        }
        if !params.is_finite() {
            return Err(Error::InvalidInput("non-finite TPS parameters".into()));
        }
        let dx: Vec<T> = params.offsets.iter().map(|o| o[0]).collect();
        let dy: Vec<T> = params.offsets.iter().map(|o| o[1]).collect();
        Ok(Self {
            grid,
            cx: grid.coefficients(&dx),
            cy: grid.coefficients(&dy),
            affine: params.affine,
            row: vec![T::zero(); grid.len() + 3],
        })
    }

    pub fn eval(&mut self, z: [T; 2]) -> [T; 2] {
        self.grid.basis_row(z, &mut self.row);
        let a = self.affine.apply(z);
        [a[0] + dot4(&self.row, &self.cx), a[1] + dot4(&self.row, &self.cy)]
    }
}

pub fn tps_field<T: Real>(
    params: &TpsParams<T>,
    grid: &TpsControlGrid<T>,
    width: usize,
    height: usize,
) -> Result<WarpField<T>> {
    let mut ev = TpsEvaluator::new(params, grid)?;
    Ok(WarpField::from_fn(width, height, |x, y| ev.eval([x, y])))
}

/// Bilinear sample with zero padding and its spatial derivative.
#[inline]
pub fn sample_with_grad<T: Real, R: Raster<T> + ?Sized>(img: &R, q: [T; 2]) -> (T, [T; 2]) {
    let fx0 = q[0].floor();
    let fy0 = q[1].floor();
    let fx = q[0] - fx0;
    let fy = q[1] - fy0;
    let x0 = fx0.to_i64().unwrap_or(i64::MIN / 2);
    let y0 = fy0.to_i64().unwrap_or(i64::MIN / 2);
    let v00 = img.get_or_zero(x0, y0);
    let v10 = img.get_or_zero(x0 + 1, y0);
    let v01 = img.get_or_zero(x0, y0 + 1);
    let v11 = img.get_or_zero(x0 + 1, y0 + 1);
    let one = T::one();
    let top = v00 * (one - fx) + v10 * fx;
    let bot = v01 * (one - fx) + v11 * fx;
    let value = top * (one - fy) + bot * fy;
    let ddx = (v10 - v00) * (one - fy) + (v11 - v01) * fy;
    let ddy = bot - top;
    (value, [ddx, ddy])
}

#[inline]
pub fn sample<T: Real, R: Raster<T> + ?Sized>(img: &R, q: [T; 2]) -> T {
    sample_with_grad(img, q).0
}

/// Backward warp: `out(p) = img(q(p))` with bilinear interpolation.
pub fn apply_warp<T: Real, R: FromSamples<T>>(img: &R, field: &WarpField<T>) -> Result<R> {
    if img.dims() != field.dims() {
        return Err(Error::mismatch(img.dims(), field.dims()));
    }
    let data = field.coords.iter().map(|&q| sample(img, q)).collect();
    Ok(R::from_samples(field.width, field.height, data))
}

/// Double the resolution of a field: displacement at `p'` is twice the input
/// displacement sampled at `p' / 2`.
pub fn upsample_field<T: Real>(field: &WarpField<T>) -> WarpField<T> {
    upsample_field_to(field, field.width * 2, field.height * 2)
}

/// [`upsample_field`] onto an explicit target size (for odd pyramid levels).
pub fn upsample_field_to<T: Real>(field: &WarpField<T>, width: usize, height: usize) -> WarpField<T> {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    WarpField::from_fn(width, height, |x, y| {
        let d = field.sample_displacement(x * half, y * half);
        [x + two * d[0], y + two * d[1]]
    })
}

/// `combined(p) = early(late(p))`, so warping by `early` and then by `late`
/// approximates a single warp by `combined`. `early` is interpolated
/// bilinearly (its displacement is clamped at the border).
pub fn compose<T: Real>(late: &WarpField<T>, early: &WarpField<T>) -> Result<WarpField<T>> {
    if late.dims() != early.dims() {
        return Err(Error::mismatch(late.dims(), early.dims()));
    }
    let coords = late
        .coords
        .iter()
        .map(|&q| {
            let d = early.sample_displacement(q[0], q[1]);
            [q[0] + d[0], q[1] + d[1]]
        })
        .collect();
    Ok(WarpField::from_coords_unchecked(late.width, late.height, coords))
}

/// Numerical inverse of a backward map by fixed-point iteration
/// `r(p) = p - d(r(p))`, where `d` is the displacement of `field`.
pub fn invert_field<T: Real>(field: &WarpField<T>, iterations: usize) -> WarpField<T> {
    let mut inv = WarpField::identity(field.width, field.height);
    for _ in 0..iterations {
        let coords = (0..field.height)
            .flat_map(|y| (0..field.width).map(move |x| (x, y)))
            .zip(&inv.coords)
            .map(|((x, y), r)| {
                let d = field.sample_displacement(r[0], r[1]);
                [T::from_usize_lossy(x) - d[0], T::from_usize_lossy(y) - d[1]]
            })
            .collect();
        inv.coords = coords;
    }
    inv
}
