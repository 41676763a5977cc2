//! Local shape descriptors (unit intensity gradients) and the windowed
//! max-distance term used by the shape-dependent bound.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::raster::Raster;

/// Gradient magnitude below which a pixel has no orientation.
pub const GRAD_EPS: f64 = 1e-6;

/// Per-pixel 2D vectors with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid<T: Real> {
    width: usize,
    height: usize,
    vecs: Vec<[T; 2]>,
    valid: Vec<bool>,
}

impl<T: Real> VectorGrid<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// The unit vector at `(x, y)`, or `None` where the gradient vanished.
    pub fn get(&self, x: usize, y: usize) -> Option<[T; 2]> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.vecs[i])
    }

    pub fn vectors(&self) -> &[[T; 2]] {
        &self.vecs
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Rotate every valid vector by `angle` radians.
    pub fn rotated(&self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            vecs: self.vecs.iter().map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect(),
            ..self.clone()
        }
    }
}

/// Central differences in the interior, one-sided differences on the border.
pub fn raw_gradients<T: Real, R: Raster<T> + ?Sized>(img: &R) -> Vec<[T; 2]> {
    let (w, h) = img.dims();
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 {
                img.at(1, y) - img.at(0, y)
            } else if x == w - 1 {
                img.at(x, y) - img.at(x - 1, y)
            } else {
                (img.at(x + 1, y) - img.at(x - 1, y)) * half
            };
            let gy = if y == 0 {
                img.at(x, 1) - img.at(x, 0)
            } else if y == h - 1 {
                img.at(x, y) - img.at(x, y - 1)
            } else {
                (img.at(x, y + 1) - img.at(x, y - 1)) * half
            };
            out.push([gx, gy]);
        }
    }
    out
}

/// Adjoint of [`raw_gradients`]: scatters per-pixel gradient sensitivities
/// back onto image pixels, accumulating into `out`.
pub(crate) fn raw_gradients_adjoint<T: Real>(w: usize, h: usize, dg: &[[T; 2]], out: &mut [T]) {
    let half = T::lit(0.5);
    for y in 0..h {
        for x in 0..w {
            let [gx, gy] = dg[y * w + x];
            if gx != T::zero() {
                if x == 0 {
                    out[y * w + 1] += gx;
                    out[y * w] -= gx;
                } else if x == w - 1 {
                    out[y * w + x] += gx;
                    out[y * w + x - 1] -= gx;
                } else {
                    out[y * w + x + 1] += gx * half;
                    out[y * w + x - 1] -= gx * half;
                }
            }
            if gy != T::zero() {
                if y == 0 {
                    out[w + x] += gy;
                    out[x] -= gy;
                } else if y == h - 1 {
                    out[y * w + x] += gy;
                    out[(y - 1) * w + x] -= gy;
                } else {
                    out[(y + 1) * w + x] += gy * half;
                    out[(y - 1) * w + x] -= gy * half;
                }
            }
        }
    }
}

pub(crate) fn normalize_gradients<T: Real>(w: usize, h: usize, raw: &[[T; 2]]) -> VectorGrid<T> {
    let eps = T::lit(GRAD_EPS);
    let mut vecs = Vec::with_capacity(raw.len());
    let mut valid = Vec::with_capacity(raw.len());
    for g in raw {
        let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if n < eps {
            vecs.push([T::zero(); 2]);
            valid.push(false);
        } else {
            vecs.push([g[0] / n, g[1] / n]);
            valid.push(true);
        }
    }
    VectorGrid { width: w, height: h, vecs, valid }
}

pub fn unit_gradients<T: Real, R: Raster<T> + ?Sized>(img: &R) -> VectorGrid<T> {
    let (w, h) = img.dims();
    normalize_gradients(w, h, &raw_gradients(img))
}

/// `sqrt(max(0, 1 - u.v))` without the unit-length check.
#[inline]
pub fn grad_distance_unchecked<T: Real>(u: [T; 2], v: [T; 2]) -> T {
    (T::one() - (u[0] * v[0] + u[1] * v[1])).max(T::zero()).min(T::lit(2.0)).sqrt()
}

/// Distance between two unit vectors, in `[0, sqrt(2)]`.
pub fn grad_distance<T: Real>(u: [T; 2], v: [T; 2]) -> Result<T> {
    let tol = T::lit(1e-9).max(T::epsilon() * T::lit(64.0));
    for w in [u, v] {
        let n = (w[0] * w[0] + w[1] * w[1]).sqrt();
        if !n.is_finite() || (n - T::one()).abs() >= tol {
            return Err(Error::InvalidInput(format!("gradient ({}, {}) is not unit length", w[0], w[1])));
        }
    }
    Ok(grad_distance_unchecked(u, v))
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("window must be odd and >= 1, got {window}")));
    }
    Ok(())
}

/// Windowed maxima of the shape term, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ShapeMax<T: Real> {
    /// `sum support(x) * M(x)`.
    pub weighted: T,
    /// `sum support(x)`.
    pub mass: T,
    /// One entry per support pixel, row-major.
    pub entries: Vec<ShapeEntry<T>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ShapeEntry<T: Real> {
    pub pixel: usize,
    /// Row-major index of the maximizing target vector, if any was valid.
    pub best: Option<usize>,
    pub value: T,
}

/// `candidates`, when given, marks the target's contour pixels: one without a
/// valid orientation still competes in the window max, at `sqrt(2)`.
pub(crate) fn shape_max<T: Real, R: Raster<T> + ?Sized, C: Raster<T> + ?Sized>(
    src: &VectorGrid<T>,
    tgt: &VectorGrid<T>,
    support: &R,
    candidates: Option<&C>,
    window: usize,
) -> ShapeMax<T> {
    let (w, h) = src.dims();
    let r = window / 2;
    let worst = T::SQRT_2();
    let half = T::lit(0.5);
    let mut weighted = T::zero();
    let mut mass = T::zero();
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = support.at(x, y);
            if s == T::zero() {
                continue;
            }
            mass += s;
            let i = y * w + x;
            let Some(u) = src.valid[i].then(|| src.vecs[i]) else {
                weighted += s * worst;
                entries.push(ShapeEntry { pixel: i, best: None, value: worst });
                continue;
            };
            let mut best: Option<(Option<usize>, T)> = None;
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let j = yy * w + xx;
                    let (arg, d) = if tgt.valid[j] {
                        (Some(j), grad_distance_unchecked(u, tgt.vecs[j]))
                    } else if candidates.is_some_and(|c| c.at(xx, yy) > half) {
                        (None, worst)
                    } else {
                        continue;
                    };
                    if best.is_none_or(|(_, b)| d > b) {
                        best = Some((arg, d));
                    }
                }
            }
            match best {
                Some((arg, d)) => {
                    weighted += s * d;
                    entries.push(ShapeEntry { pixel: i, best: arg, value: d });
                }
                None => {
                    weighted += s * worst;
                    entries.push(ShapeEntry { pixel: i, best: None, value: worst });
                }
            }
        }
    }
    ShapeMax { weighted, mass, entries }
}

/// Support-weighted mean over `x` of the largest gradient distance between
/// `src(x)` and any valid `tgt(y)` in the odd square window centred on `x`.
/// Invalid source vectors and windows without a valid target vector count as
/// `sqrt(2)`.
pub fn local_shape_term<T: Real, R: Raster<T> + ?Sized>(
    src: &VectorGrid<T>,
    tgt: &VectorGrid<T>,
    support: &R,
    window: usize,
) -> Result<T> {
    check_window(window)?;
    if src.dims() != tgt.dims() {
        return Err(Error::mismatch(src.dims(), tgt.dims()));
    }
    if src.dims() != support.dims() {
        return Err(Error::mismatch(src.dims(), support.dims()));
    }
    let m = shape_max(src, tgt, support, None::<&R>, window);
    if m.mass <= T::zero() {
        return Err(Error::EmptyShape("shape term support has no mass".into()));
    }
    Ok(m.weighted / m.mass)
}

pub(crate) fn validate_window(window: usize) -> Result<()> {
    check_window(window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ContourImage, ScalarGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    fn random_contour(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> ContourImage<f64> {
        let data = (0..w * h).map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 }).collect();
        ContourImage::new(w, h, data).unwrap()
    }

    /// The definition, evaluated with no shortcuts.
    fn shape_term_oracle(
        src: &VectorGrid<f64>,
        tgt: &VectorGrid<f64>,
        support: &ContourImage<f64>,
        window: usize,
    ) -> f64 {
        let (w, h) = src.dims();
        let r = (window / 2) as i64;
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..h {
            for x in 0..w {
                let s = support.at(x, y);
                if s == 0.0 {
                    continue;
                }
                den += s;
                let mut m: Option<f64> = None;
                if let Some(u) = src.get(x, y) {
                    for yy in 0..h {
                        for xx in 0..w {
                            let inside = (xx as i64 - x as i64).abs() <= r && (yy as i64 - y as i64).abs() <= r;
                            if let (true, Some(v)) = (inside, tgt.get(xx, yy)) {
                                let d = (1.0 - (u[0] * v[0] + u[1] * v[1])).max(0.0).sqrt();
                                m = Some(m.map_or(d, |b: f64| b.max(d)));
                            }
                        }
                    }
                }
                num += s * m.unwrap_or(SQRT2);
            }
        }
        num / den
    }

    #[test]
    fn step_edge_gradients() {
        let img = ScalarGrid::<f64>::from_fn(8, 6, |x, _| if x >= 4 { 1.0 } else { 0.0 });
        let g = unit_gradients(&img);
        for y in 0..6 {
            assert_eq!(g.get(3, y), Some([1.0, 0.0]));
            assert_eq!(g.get(4, y), Some([1.0, 0.0]));
            assert_eq!(g.get(1, y), None);
            assert_eq!(g.get(6, y), None);
        }
    }

    #[test]
    fn constant_image_has_no_gradients() {
        let img = ScalarGrid::<f64>::from_fn(6, 6, |_, _| 0.7);
        assert_eq!(unit_gradients(&img).valid_count(), 0);
    }

    #[test]
    fn diagonal_ramp_gradients() {
        let img = ScalarGrid::<f64>::from_fn(16, 16, |x, y| ((x + y) as f64 / 30.0).min(1.0));
        let g = unit_gradients(&img);
        let c = SQRT2 / 2.0;
        for y in 1..8 {
            for x in 1..8 {
                let v = g.get(x, y).unwrap();
                assert!((v[0] - c).abs() < 1e-6 && (v[1] - c).abs() < 1e-6);
            }
        }
        let step = ScalarGrid::<f64>::from_fn(16, 16, |x, y| if x + y >= 16 { 1.0 } else { 0.0 });
        let g = unit_gradients(&step);
        for x in 3..13 {
            let v = g.get(x, 16 - x).unwrap();
            assert!((v[0] - c).abs() < 1e-6 && (v[1] - c).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_distance_examples() {
        let u = [0.6, 0.8];
        assert_eq!(grad_distance(u, u).unwrap(), 0.0);
        assert!((grad_distance(u, [-0.6, -0.8]).unwrap() - SQRT2).abs() < 1e-12);
        assert!((grad_distance(u, [-0.8, 0.6]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(grad_distance([1.0, 1.0], u), Err(Error::InvalidInput(_))));
        assert!(grad_distance([0.0, 0.0], u).is_err());
    }

    #[test]
    fn straight_edge_and_unit_window_are_zero() {
        // A line on the first row: every gradient points into the image.
        let line = ContourImage::<f64>::from_pixels(12, 12, &(0..12).map(|x| (x, 0)).collect::<Vec<_>>());
        let g = unit_gradients(&line);
        for window in [1, 3, 5, 23] {
            assert_eq!(local_shape_term(&g, &g, &line, window).unwrap(), 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blob = ScalarGrid::from_fn(10, 10, |_, _| rng.random::<f64>());
        let support = ContourImage::new(10, 10, blob.data().to_vec()).unwrap();
        let g = unit_gradients(&blob);
        let v = local_shape_term(&g, &g, &support, 1).unwrap();
        // Only pixels without an orientation are penalized.
        let invalid_mass: f64 = (0..100).filter(|&i| !g.valid()[i]).map(|i| support.data()[i]).sum();
        assert!((v - invalid_mass * SQRT2 / support.sum()).abs() < 1e-7);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let (w, h) = (rng.random_range(6..14), rng.random_range(6..14));
            let a = random_contour(&mut rng, w, h, 0.3);
            let b = random_contour(&mut rng, w, h, 0.3);
            if a.sum() == 0.0 {
                continue;
            }
            let (ga, gb) = (unit_gradients(&a), unit_gradients(&b));
            for window in [1, 3, 5, 7] {
                let fast = local_shape_term(&ga, &gb, &a, window).unwrap();
                let slow = shape_term_oracle(&ga, &gb, &a, window);
                assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn window_and_support_errors() {
        let a = ContourImage::<f64>::from_pixels(6, 6, &[(2, 2)]);
        let g = unit_gradients(&a);
        assert!(matches!(local_shape_term(&g, &g, &a, 4), Err(Error::InvalidConfig(_))));
        assert!(local_shape_term(&g, &g, &a, 0).is_err());
        let empty = ContourImage::<f64>::zeros(6, 6);
        assert!(matches!(local_shape_term(&g, &g, &empty, 3), Err(Error::EmptyShape(_))));
        let other = unit_gradients(&ContourImage::<f64>::zeros(5, 6));
        assert!(matches!(local_shape_term(&g, &other, &a, 3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn adjoint_matches_forward_stencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (7, 5);
        let img = ScalarGrid::from_fn(w, h, |_, _| rng.random::<f64>());
        let dg: Vec<[f64; 2]> = (0..w * h).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let g = raw_gradients(&img);
        let lhs: f64 = g.iter().zip(&dg).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
        let mut back = vec![0.0; w * h];
        raw_gradients_adjoint(w, h, &dg, &mut back);
        let rhs: f64 = back.iter().zip(img.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn window_monotone_and_bounded(seed in 0u64..500, w in 4usize..12, h in 4usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_contour(&mut rng, w, h, 0.35);
            let b = random_contour(&mut rng, w, h, 0.35);
            proptest::prop_assume!(a.sum() > 0.0);
            let (ga, gb) = (unit_gradients(&a), unit_gradients(&b));
            // Per pixel: once the window holds a valid target vector, growing it
            // can only raise the max. An empty window is charged sqrt(2), which
            // a larger window may undercut.
            let mut prev: Option<Vec<ShapeEntry<f64>>> = None;
            let mut prev_total = -1.0;
            for window in [1, 3, 5, 7, 9] {
                let v = local_shape_term(&ga, &gb, &a, window).unwrap();
                proptest::prop_assert!((0.0..=SQRT2 + 1e-12).contains(&v));
                let m = shape_max(&ga, &gb, &a, None::<&ContourImage<f64>>, window);
                if let Some(p) = &prev {
                    for (e0, e1) in p.iter().zip(&m.entries) {
                        if e0.best.is_some() {
                            proptest::prop_assert!(e1.value >= e0.value);
                        }
                    }
                    if p.iter().all(|e| e.best.is_some() || !ga.valid()[e.pixel]) {
                        proptest::prop_assert!(v >= prev_total);
                    }
                }
                prev = Some(m.entries);
                prev_total = v;
            }
        }

        #[test]
        fn common_rotation_preserves_distances(seed in 0u64..500, angle in -3.2f64..3.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ScalarGrid::from_fn(8, 8, |_, _| rng.random::<f64>());
            let b = ScalarGrid::from_fn(8, 8, |_, _| rng.random::<f64>());
            let (ga, gb) = (unit_gradients(&a), unit_gradients(&b));
            let (ra, rb) = (ga.rotated(angle), gb.rotated(angle));
            for i in 0..64 {
                if let (Some(u), Some(v), Some(ru), Some(rv)) =
                    (ga.get(i % 8, i / 8), gb.get(i % 8, i / 8), ra.get(i % 8, i / 8), rb.get(i % 8, i / 8))
                {
                    let d0 = grad_distance(u, v).unwrap();
                    let d1 = grad_distance(ru, rv).unwrap();
                    proptest::prop_assert!((d0 - d1).abs() < 1e-7);
                }
            }
        }
    }
}
