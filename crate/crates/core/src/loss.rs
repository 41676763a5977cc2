//! Chamfer-family losses on contour images, pixel-wise baselines, and the
//! image-level sensitivities the optimizer chains through the warp.
//!
//! Distance fields are only ever computed on the original binary images; the
//! warped images enter linearly (the reparameterized form), so no derivative
//! of a distance transform is ever needed.

use serde::{Deserialize, Serialize};

use crate::edt::{edt, DistanceField};
use crate::error::{Error, Result};
use crate::num::{ordered_sum, Real};
use crate::raster::{ContourImage, Raster};
use crate::shape::{
    grad_distance_unchecked, normalize_gradients, raw_gradients, raw_gradients_adjoint, shape_max,
    unit_gradients, validate_window, VectorGrid,
};
use crate::warp::{apply_warp, WarpField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// One-directional `(1/N) S(θ).dt[T]`.
    Chamfer,
    /// Bidirectional reparameterized Chamfer, no shape term.
    Reparam,
    /// Reparameterized Chamfer plus the windowed shape term.
    Upperbound,
    Ncc,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidConfig(format!("unknown loss kind {s:?}")))
    }
}

/// How each directed Chamfer sum is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide each directed sum by the mass of the image it runs over
    /// (matches the point-set Chamfer distance on binary images).
    SupportMass,
    /// `1/N_S` with the `dt[S]` sum and `1/N_T` with the `dt[T]` sum,
    /// using the original pixel counts.
    AsWritten,
    /// Plain sums.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub window: usize,
    pub scale_weights: Vec<f64>,
    pub kind: LossKind,
    pub normalization: Normalization,
    /// TPS bending-energy weight; zero disables the regularizer.
    pub bending_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            window: 5,
            scale_weights: vec![1.0; 5],
            kind: LossKind::Upperbound,
            normalization: Normalization::SupportMass,
            bending_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.bending_weight >= 0.0 && self.bending_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!("bending_weight must be >= 0, got {}", self.bending_weight)));
        }
        if let Some(l) = self.scale_weights.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(format!("scale weight {l} must be finite and >= 0")));
        }
        validate_window(self.window)
    }
}

/// Loss value split into its parts. `total = proximity + alpha * shape + regularizer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub proximity: f64,
    pub shape: f64,
    pub alpha: f64,
    pub window: usize,
    /// Part driven by the warped source (`S(θ).dt[T]`, or the source-side baseline).
    pub forward_proximity: f64,
    /// Part driven by the warped target (`dt[S].T(θ⁻¹)`, or the target-side baseline).
    pub backward_proximity: f64,
    /// Shape term supported on the warped source.
    pub forward_shape: f64,
    /// Shape term supported on the target.
    pub backward_shape: f64,
    pub regularizer: f64,
}

impl LossBreakdown {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct serializes")
    }
}

/// A source/target pair at one resolution with everything that stays fixed
/// while warps change: distance fields, target orientations, pixel counts.
#[derive(Debug, Clone)]
pub struct PairContext<T: Real> {
    source: ContourImage<T>,
    target: ContourImage<T>,
    dt_source: DistanceField<T>,
    dt_target: DistanceField<T>,
    target_grads: VectorGrid<T>,
    source_count: T,
    target_count: T,
}

impl<T: Real> PairContext<T> {
    pub fn new(source: ContourImage<T>, target: ContourImage<T>) -> Result<Self> {
        let dts = edt(&source)?;
        let dtt = edt(&target)?;
        Self::with_fields(source, target, dts, dtt)
    }

    pub fn with_fields(
        source: ContourImage<T>,
        target: ContourImage<T>,
        dt_source: DistanceField<T>,
        dt_target: DistanceField<T>,
    ) -> Result<Self> {
        let d = source.dims();
        for other in [target.dims(), dt_source.dims(), dt_target.dims()] {
            if other != d {
                return Err(Error::mismatch(d, other));
            }
        }
        let source_count = source.sum();
        let target_count = target.sum();
        if source_count <= T::zero() || target_count <= T::zero() {
            return Err(Error::EmptyShape("source and target need contour pixels".into()));
        }
        Ok(Self {
            target_grads: unit_gradients(&target),
            source,
            target,
            dt_source,
            dt_target,
            source_count,
            target_count,
        })
    }

    pub fn source(&self) -> &ContourImage<T> {
        &self.source
    }

    pub fn target(&self) -> &ContourImage<T> {
        &self.target
    }

    pub fn dt_source(&self) -> &DistanceField<T> {
        &self.dt_source
    }

    pub fn dt_target(&self) -> &DistanceField<T> {
        &self.dt_target
    }

    pub fn dims(&self) -> (usize, usize) {
        self.source.dims()
    }
}

/// One direction's share of the loss with its sensitivity to the warped image.
#[derive(Debug, Clone)]
pub(crate) struct Part<T: Real> {
    pub proximity: T,
    pub shape_fwd: T,
    pub shape_bwd: T,
    pub value: T,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Part<T> {
    fn zero(n: usize, want_grad: bool) -> Self {
        Self {
            proximity: T::zero(),
            shape_fwd: T::zero(),
            shape_bwd: T::zero(),
            value: T::zero(),
            grad: want_grad.then(|| vec![T::zero(); n]),
        }
    }
}

fn weighted_dot<T: Real>(a: &[T], b: &[T]) -> T {
    ordered_sum(a.iter().zip(b).map(|(x, y)| *x * *y))
}

fn mass_of<T: Real>(img: &ContourImage<T>, what: &str) -> Result<T> {
    let m = img.sum();
    if m <= T::zero() {
        return Err(Error::EmptyShape(format!("{what} has no contour mass")));
    }
    Ok(m)
}

/// `sum(moving * dt) / norm` and its derivative wrt `moving`.
fn directed<T: Real>(
    moving: &ContourImage<T>,
    dt: &DistanceField<T>,
    norm: Normalization,
    fixed_count: T,
    want_grad: bool,
    what: &str,
) -> Result<(T, Option<Vec<T>>)> {
    let mass = mass_of(moving, what)?;
    let num = weighted_dot(dt.data(), moving.data());
    let den = match norm {
        Normalization::SupportMass => mass,
        Normalization::AsWritten => fixed_count,
        Normalization::None => T::one(),
    };
    let value = num / den;
    let grad = want_grad.then(|| match norm {
        Normalization::SupportMass => dt.data().iter().map(|&d| (d - value) / den).collect(),
        _ => dt.data().iter().map(|&d| d / den).collect(),
    });
    Ok((value, grad))
}

/// Terms that depend on the warped source.
pub(crate) fn forward_part<T: Real>(
    ctx: &PairContext<T>,
    sw: &ContourImage<T>,
    kind: LossKind,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<Part<T>> {
    let n = sw.data().len();
    match kind {
        LossKind::Ncc | LossKind::Mse => {
            let (value, grad) = baseline_with_grad(baseline_of(kind), sw, &ctx.target, want_grad)?;
            Ok(Part { proximity: value, value, grad, ..Part::zero(n, false) })
        }
        LossKind::Chamfer | LossKind::Reparam | LossKind::Upperbound => {
            let (prox, mut grad) =
                directed(sw, &ctx.dt_target, cfg.normalization, ctx.target_count, want_grad, "warped source")?;
            let mut part = Part { proximity: prox, value: prox, grad: None, ..Part::zero(n, false) };
            if kind == LossKind::Upperbound {
                let alpha = T::lit(cfg.alpha);
                let (sf, sb) = shape_terms(ctx, sw, cfg, alpha, grad.as_mut())?;
                part.shape_fwd = sf;
                part.shape_bwd = sb;
                part.value = prox + alpha * (sf + sb);
            }
            part.grad = grad;
            Ok(part)
        }
    }
}

/// Terms that depend on the warped target.
pub(crate) fn backward_part<T: Real>(
    ctx: &PairContext<T>,
    tw: &ContourImage<T>,
    kind: LossKind,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<Part<T>> {
    let n = tw.data().len();
    match kind {
        LossKind::Chamfer => Ok(Part::zero(n, want_grad)),
        LossKind::Ncc | LossKind::Mse => {
            let (value, grad) = baseline_with_grad(baseline_of(kind), tw, &ctx.source, want_grad)?;
            Ok(Part { proximity: value, value, grad, ..Part::zero(n, false) })
        }
        LossKind::Reparam | LossKind::Upperbound => {
            let (prox, grad) =
                directed(tw, &ctx.dt_source, cfg.normalization, ctx.source_count, want_grad, "warped target")?;
            Ok(Part { proximity: prox, value: prox, grad, ..Part::zero(n, false) })
        }
    }
}

/// Both shape terms; when `grad` is given, adds `alpha *` their derivative wrt `sw`.
fn shape_terms<T: Real>(
    ctx: &PairContext<T>,
    sw: &ContourImage<T>,
    cfg: &LossConfig,
    alpha: T,
    grad: Option<&mut Vec<T>>,
) -> Result<(T, T)> {
    let (w, h) = sw.dims();
    let raw = raw_gradients(sw);
    let src = normalize_gradients(w, h, &raw);
    let tgt = &ctx.target_grads;
    let fwd = shape_max(&src, tgt, sw, Some(&ctx.target), cfg.window);
    let bwd = shape_max(tgt, &src, &ctx.target, Some(sw), cfg.window);
    let normalized = cfg.normalization != Normalization::None;
    let nf = if normalized { fwd.mass } else { T::one() };
    let nb = if normalized { bwd.mass } else { T::one() };
    if fwd.mass <= T::zero() || bwd.mass <= T::zero() {
        return Err(Error::EmptyShape("shape term support has no mass".into()));
    }
    let sf = fwd.weighted / nf;
    let sb = bwd.weighted / nb;

    let Some(grad) = grad else {
        return Ok((sf, sb));
    };
    if alpha == T::zero() {
        return Ok((sf, sb));
    }
    let two = T::lit(2.0);
    let tiny = T::lit(1e-12);
    let mut du = vec![[T::zero(); 2]; w * h];
    for e in &fwd.entries {
        let s = sw.data()[e.pixel];
        grad[e.pixel] += alpha * if normalized { (e.value - sf) / nf } else { e.value };
        if let Some(j) = e.best {
            if e.value > tiny {
                let v = tgt.vectors()[j];
                let c = alpha * s / (nf * two * e.value);
                du[e.pixel][0] -= c * v[0];
                du[e.pixel][1] -= c * v[1];
            }
        }
    }
    for e in &bwd.entries {
        if let Some(j) = e.best {
            if e.value > tiny {
                let v = tgt.vectors()[e.pixel];
                let c = alpha * ctx.target.data()[e.pixel] / (nb * two * e.value);
                du[j][0] -= c * v[0];
                du[j][1] -= c * v[1];
            }
        }
    }
    // Through the normalization u = g / |g|.
    let mut dg = vec![[T::zero(); 2]; w * h];
    for (i, d) in du.iter().enumerate() {
        if d[0] == T::zero() && d[1] == T::zero() {
            continue;
        }
        let u = src.vectors()[i];
        let g = raw[i];
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        let along = u[0] * d[0] + u[1] * d[1];
        dg[i] = [(d[0] - along * u[0]) / norm, (d[1] - along * u[1]) / norm];
    }
    raw_gradients_adjoint(w, h, &dg, grad);
    Ok((sf, sb))
}

/// Hash of the discrete choices behind the shape terms for a warped source:
/// support set, orientation validity and every window argmax. Returns the
/// smallest positive window maximum, i.e. how close the terms sit to the apex
/// of the cone `|u - v|`.
pub(crate) fn shape_signature<T: Real>(
    ctx: &PairContext<T>,
    sw: &ContourImage<T>,
    cfg: &LossConfig,
    state: &mut impl std::hash::Hasher,
) -> T {
    use std::hash::Hash;
    let (w, h) = sw.dims();
    let src = normalize_gradients(w, h, &raw_gradients(sw));
    src.valid().hash(state);
    let tiny = T::lit(1e-12);
    let mut apex = T::infinity();
    for m in [
        shape_max(&src, &ctx.target_grads, sw, Some(&ctx.target), cfg.window),
        shape_max(&ctx.target_grads, &src, &ctx.target, Some(sw), cfg.window),
    ] {
        for e in &m.entries {
            (e.pixel, e.best, e.value > tiny).hash(state);
            if e.value > tiny {
                apex = apex.min(e.value);
            }
        }
    }
    apex
}

pub(crate) fn combine<T: Real>(fwd: &Part<T>, bwd: &Part<T>, cfg: &LossConfig, regularizer: T) -> LossBreakdown {
    let alpha = T::lit(cfg.alpha);
    let proximity = bwd.proximity + fwd.proximity;
    let shape = fwd.shape_fwd + fwd.shape_bwd;
    let total = proximity + alpha * shape + regularizer;
    LossBreakdown {
        total: total.as_f64(),
        proximity: proximity.as_f64(),
        shape: shape.as_f64(),
        alpha: cfg.alpha,
        window: cfg.window,
        forward_proximity: fwd.proximity.as_f64(),
        backward_proximity: bwd.proximity.as_f64(),
        forward_shape: fwd.shape_fwd.as_f64(),
        backward_shape: fwd.shape_bwd.as_f64(),
        regularizer: regularizer.as_f64(),
    }
}

fn check_fields<T: Real>(ctx: &PairContext<T>, fields: &[&WarpField<T>]) -> Result<()> {
    for f in fields {
        if f.dims() != ctx.dims() {
            return Err(Error::mismatch(ctx.dims(), f.dims()));
        }
    }
    Ok(())
}

/// Loss of the configured kind for a pair of warps.
pub fn evaluate_loss<T: Real>(
    ctx: &PairContext<T>,
    fwd: &WarpField<T>,
    bwd: &WarpField<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_fields(ctx, &[fwd, bwd])?;
    let sw = apply_warp(&ctx.source, fwd)?;
    let tw = apply_warp(&ctx.target, bwd)?;
    let f = forward_part(ctx, &sw, cfg.kind, cfg, false)?;
    let b = backward_part(ctx, &tw, cfg.kind, cfg, false)?;
    Ok(combine(&f, &b, cfg, T::zero()))
}

/// Symmetric Chamfer distance of two binary images from their distance fields:
/// each directed sum is averaged over the image it runs over.
pub fn chamfer_mdt<T: Real>(
    s: &ContourImage<T>,
    t: &ContourImage<T>,
    dt_s: &DistanceField<T>,
    dt_t: &DistanceField<T>,
) -> Result<T> {
    let d = s.dims();
    for other in [t.dims(), dt_s.dims(), dt_t.dims()] {
        if other != d {
            return Err(Error::mismatch(d, other));
        }
    }
    let ns = mass_of(s, "source")?;
    let nt = mass_of(t, "target")?;
    Ok(weighted_dot(dt_s.data(), t.data()) / nt + weighted_dot(s.data(), dt_t.data()) / ns)
}

/// Reparameterized Chamfer: `dt[S].T(bwd) / |T(bwd)| + S(fwd).dt[T] / |S(fwd)|`.
pub fn chamfer_reparam<T: Real>(
    s: &ContourImage<T>,
    t: &ContourImage<T>,
    dt_s: &DistanceField<T>,
    dt_t: &DistanceField<T>,
    fwd: &WarpField<T>,
    bwd: &WarpField<T>,
) -> Result<T> {
    let ctx = PairContext::with_fields(s.clone(), t.clone(), dt_s.clone(), dt_t.clone())?;
    let cfg = LossConfig { kind: LossKind::Reparam, ..LossConfig::default() };
    Ok(T::lit(evaluate_loss(&ctx, fwd, bwd, &cfg)?.proximity))
}

/// Reparameterized Chamfer plus `alpha` times the windowed shape term.
pub fn chamfer_upperbound<T: Real>(
    s: &ContourImage<T>,
    t: &ContourImage<T>,
    dt_s: &DistanceField<T>,
    dt_t: &DistanceField<T>,
    fwd: &WarpField<T>,
    bwd: &WarpField<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let ctx = PairContext::with_fields(s.clone(), t.clone(), dt_s.clone(), dt_t.clone())?;
    let cfg = LossConfig { kind: LossKind::Upperbound, ..cfg.clone() };
    evaluate_loss(&ctx, fwd, bwd, &cfg)
}

/// Shape-dependent Chamfer distance by exhaustive search over point pairs:
/// for every contour pixel, the minimum over the other contour of
/// `E(x, y) + alpha * grad_distance`, where a missing orientation on either
/// side counts as `sqrt(2)`. Quadratic; meant as a reference.
///
/// The distance and orientation parts of the minimizing pairs (nearest pair on
/// ties) are summed separately and combined like [`LossBreakdown::total`], so
/// the two agree to the bit wherever the bound is tight.
pub fn chamfer_shape_direct<T: Real>(s: &ContourImage<T>, t: &ContourImage<T>, alpha: T) -> Result<T> {
    if s.dims() != t.dims() {
        return Err(Error::mismatch(s.dims(), t.dims()));
    }
    let ps = s.on_pixels();
    let pt = t.on_pixels();
    if ps.is_empty() || pt.is_empty() {
        return Err(Error::EmptyShape("direct Chamfer needs two non-empty contours".into()));
    }
    let gs = unit_gradients(s);
    let gt = unit_gradients(t);
    let worst = T::SQRT_2();
    // (mean E, mean grad distance) of the minimizing pairs.
    let directed = |from: &[(usize, usize)], gf: &VectorGrid<T>, to: &[(usize, usize)], gto: &VectorGrid<T>| {
        let (mut acc_e, mut acc_g) = (T::zero(), T::zero());
        for &(x, y) in from {
            let u = gf.get(x, y);
            let mut best = (T::infinity(), T::infinity(), T::infinity());
            for &(xx, yy) in to {
                let dx = x as i64 - xx as i64;
                let dy = y as i64 - yy as i64;
                let e = T::lit(((dx * dx + dy * dy) as f64).sqrt());
                let g = match (u, gto.get(xx, yy)) {
                    (Some(a), Some(b)) => grad_distance_unchecked(a, b),
                    _ => worst,
                };
                let v = e + alpha * g;
                if v < best.0 || (v == best.0 && e < best.1) {
                    best = (v, e, g);
                }
            }
            acc_e += best.1;
            acc_g += best.2;
        }
        let n = T::from_usize_lossy(from.len());
        (acc_e / n, acc_g / n)
    };
    let (e_ts, g_ts) = directed(&pt, &gt, &ps, &gs);
    let (e_st, g_st) = directed(&ps, &gs, &pt, &gt);
    Ok((e_ts + e_st) + alpha * (g_st + g_ts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ncc,
    Mse,
}

fn baseline_of(kind: LossKind) -> BaselineKind {
    match kind {
        LossKind::Ncc => BaselineKind::Ncc,
        _ => BaselineKind::Mse,
    }
}

/// Pixel-wise baseline losses, lower is better: mean squared difference, or
/// one minus the zero-mean normalized cross-correlation.
pub fn baseline_loss<T: Real, A: Raster<T>, B: Raster<T>>(kind: BaselineKind, warped: &A, target: &B) -> Result<T> {
    Ok(baseline_with_grad(kind, warped, target, false)?.0)
}

fn baseline_with_grad<T: Real, A: Raster<T> + ?Sized, B: Raster<T> + ?Sized>(
    kind: BaselineKind,
    a: &A,
    b: &B,
    want_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    if a.dims() != b.dims() {
        return Err(Error::mismatch(b.dims(), a.dims()));
    }
    let (a, b) = (a.data(), b.data());
    let n = T::from_usize_lossy(a.len());
    match kind {
        BaselineKind::Mse => {
            let value = ordered_sum(a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y))) / n;
            let two = T::lit(2.0);
            let grad = want_grad.then(|| a.iter().zip(b).map(|(x, y)| two * (*x - *y) / n).collect());
            Ok((value, grad))
        }
        BaselineKind::Ncc => {
            let ma = ordered_sum(a.iter().copied()) / n;
            let mb = ordered_sum(b.iter().copied()) / n;
            let ca: Vec<T> = a.iter().map(|x| *x - ma).collect();
            let cb: Vec<T> = b.iter().map(|x| *x - mb).collect();
            let saa = weighted_dot(&ca, &ca);
            let sbb = weighted_dot(&cb, &cb);
            if saa <= T::zero() || sbb <= T::zero() {
                return Err(Error::Degenerate("normalized cross-correlation of a constant image".into()));
            }
            let denom = (saa * sbb).sqrt();
            let r = weighted_dot(&ca, &cb) / denom;
            let grad = want_grad.then(|| ca.iter().zip(&cb).map(|(x, y)| r * *x / saa - *y / denom).collect());
            Ok((T::one() - r, grad))
        }
    }
}

/// Weighted sum of per-scale losses.
pub fn multiscale_loss<T: Real>(losses: &[T], weights: &[T]) -> Result<T> {
    if losses.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} losses but {} scale weights",
            losses.len(),
            weights.len()
        )));
    }
    Ok(ordered_sum(losses.iter().zip(weights).map(|(l, w)| *l * *w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ScalarGrid;
    use crate::warp::{affine_field, affine_inverse, AffineParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_binary(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> ContourImage<f64> {
        loop {
            let data: Vec<f64> = (0..w * h).map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 }).collect();
            if data.iter().any(|v| *v > 0.0) {
                return ContourImage::new(w, h, data).unwrap();
            }
        }
    }

    fn point_set_chamfer(s: &ContourImage<f64>, t: &ContourImage<f64>) -> f64 {
        let dir = |a: &[(usize, usize)], b: &[(usize, usize)]| {
            a.iter()
                .map(|p| {
                    b.iter()
                        .map(|q| {
                            let dx = p.0 as f64 - q.0 as f64;
                            let dy = p.1 as f64 - q.1 as f64;
                            (dx * dx + dy * dy).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / a.len() as f64
        };
        let (ps, pt) = (s.on_pixels(), t.on_pixels());
        dir(&ps, &pt) + dir(&pt, &ps)
    }

    fn mdt(s: &ContourImage<f64>, t: &ContourImage<f64>) -> f64 {
        chamfer_mdt(s, t, &edt(s).unwrap(), &edt(t).unwrap()).unwrap()
    }

    #[test]
    fn chamfer_mdt_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_binary(&mut rng, 16, 16, 0.1);
        assert_eq!(mdt(&s, &s), 0.0);

        let a = ContourImage::<f64>::from_pixels(8, 8, &[(0, 0)]);
        let b = ContourImage::<f64>::from_pixels(8, 8, &[(3, 4)]);
        assert_eq!(mdt(&a, &b), 10.0);

        for _ in 0..50 {
            let s = random_binary(&mut rng, 16, 16, 0.08);
            let t = random_binary(&mut rng, 16, 16, 0.15);
            let v = mdt(&s, &t);
            assert!((v - point_set_chamfer(&s, &t)).abs() < 1e-9);
            assert!((v - mdt(&t, &s)).abs() < 1e-12);
        }
        let empty = ContourImage::<f64>::zeros(8, 8);
        assert!(matches!(
            chamfer_mdt(&empty, &a, &edt(&a).unwrap(), &edt(&a).unwrap()),
            Err(Error::EmptyShape(_))
        ));
    }

    #[test]
    fn as_written_normalization_differs_when_counts_differ() {
        let s = ContourImage::<f64>::from_pixels(10, 10, &[(1, 1)]);
        let t = ContourImage::<f64>::from_pixels(10, 10, &[(4, 5), (8, 8)]);
        let ctx = PairContext::new(s.clone(), t.clone()).unwrap();
        let id = WarpField::identity(10, 10);
        let cfg = LossConfig { kind: LossKind::Reparam, normalization: Normalization::AsWritten, ..Default::default() };
        let written = evaluate_loss(&ctx, &id, &id, &cfg).unwrap().proximity;
        // (1/N_S) dt[S].T + (1/N_T) S.dt[T] with N_S = 1, N_T = 2.
        let d1 = 5.0;
        let d2 = (49.0f64 + 49.0).sqrt();
        assert!((written - ((d1 + d2) / 1.0 + d1 / 2.0)).abs() < 1e-12);
        let mass = evaluate_loss(&ctx, &id, &id, &LossConfig { kind: LossKind::Reparam, ..Default::default() })
            .unwrap()
            .proximity;
        assert!((mass - point_set_chamfer(&s, &t)).abs() < 1e-12);
        let none = LossConfig { normalization: Normalization::None, ..cfg };
        assert!((evaluate_loss(&ctx, &id, &id, &none).unwrap().proximity - (d1 + d2 + d1)).abs() < 1e-12);
    }

    #[test]
    fn reparam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_binary(&mut rng, 16, 16, 0.1);
        let t = random_binary(&mut rng, 16, 16, 0.1);
        let (ds, dt) = (edt(&s).unwrap(), edt(&t).unwrap());
        let id = WarpField::identity(16, 16);
        assert_eq!(chamfer_reparam(&s, &t, &ds, &dt, &id, &id).unwrap(), chamfer_mdt(&s, &t, &ds, &dt).unwrap());

        let base: Vec<(usize, usize)> = (6..14).map(|i| (i, 6)).chain((6..14).map(|i| (6, i))).collect();
        let s = ContourImage::<f64>::from_pixels(24, 24, &base);
        let t = ContourImage::<f64>::from_pixels(24, 24, &base.iter().map(|&(x, y)| (x + 3, y + 2)).collect::<Vec<_>>());
        let (ds, dt) = (edt(&s).unwrap(), edt(&t).unwrap());
        // Backward sampling: T(p) = S(p - (3, 2)).
        let fwd = affine_field(&AffineParams::translation(-3.0, -2.0), 24, 24);
        let bwd = affine_field(&AffineParams::translation(3.0, 2.0), 24, 24);
        assert_eq!(chamfer_reparam(&s, &t, &ds, &dt, &fwd, &bwd).unwrap(), 0.0);
        assert!(chamfer_reparam(&s, &t, &ds, &dt, &bwd, &fwd).unwrap() > 1.0);
    }

    #[test]
    fn upperbound_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_binary(&mut rng, 14, 14, 0.12);
        let t = random_binary(&mut rng, 14, 14, 0.12);
        let (ds, dt) = (edt(&s).unwrap(), edt(&t).unwrap());
        let id = WarpField::identity(14, 14);
        let zero = LossConfig { alpha: 0.0, ..Default::default() };
        let ub = chamfer_upperbound(&s, &t, &ds, &dt, &id, &id, &zero).unwrap();
        assert_eq!(ub.total, chamfer_reparam(&s, &t, &ds, &dt, &id, &id).unwrap());

        let cfg = LossConfig { alpha: 0.3, ..Default::default() };
        let ub = chamfer_upperbound(&s, &t, &ds, &dt, &id, &id, &cfg).unwrap();
        assert!((ub.total - (ub.proximity + ub.alpha * ub.shape)).abs() < 1e-12);
        assert!((ub.shape - ub.forward_shape - ub.backward_shape).abs() < 1e-15);
        let json = ub.to_json();
        for key in ["total", "proximity", "shape", "alpha", "window"] {
            assert!(json.get(key).is_some(), "{key}");
        }

        let line = ContourImage::<f64>::from_pixels(12, 12, &(0..12).map(|x| (x, 0)).collect::<Vec<_>>());
        let dl = edt(&line).unwrap();
        let id = WarpField::identity(12, 12);
        let ub = chamfer_upperbound(&line, &line, &dl, &dl, &id, &id, &cfg).unwrap();
        assert_eq!(ub.total, 0.0);
        assert_eq!(chamfer_shape_direct(&line, &line, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn direct_with_zero_alpha_is_chamfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = random_binary(&mut rng, 12, 12, 0.15);
            let t = random_binary(&mut rng, 12, 12, 0.15);
            assert_eq!(chamfer_shape_direct(&s, &t, 0.0).unwrap(), mdt(&s, &t));
        }
    }

    #[test]
    fn dominance_with_global_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let w = rng.random_range(12..=24);
            let h = rng.random_range(12..=24);
            let s = random_binary(&mut rng, w, h, 0.1);
            let t = random_binary(&mut rng, w, h, 0.1);
            let (ds, dt) = (edt(&s).unwrap(), edt(&t).unwrap());
            let id = WarpField::identity(w, h);
            for alpha in [0.0, 1e-2, 1.0] {
                let cfg = LossConfig { alpha, window: 2 * w.max(h) + 1, ..Default::default() };
                let ub = chamfer_upperbound(&s, &t, &ds, &dt, &id, &id, &cfg).unwrap().total;
                let direct = chamfer_shape_direct(&s, &t, alpha).unwrap();
                assert!(ub >= direct, "{ub} < {direct} at alpha {alpha}");
            }
        }
    }

    #[test]
    fn baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = ScalarGrid::from_fn(9, 7, |_, _| rng.random::<f64>());
        let b = ScalarGrid::from_fn(9, 7, |_, _| rng.random::<f64>());
        assert_eq!(baseline_loss(BaselineKind::Mse, &a, &a).unwrap(), 0.0);
        assert!(baseline_loss(BaselineKind::Ncc, &a, &a).unwrap().abs() < 1e-12);
        let neg = ScalarGrid::from_fn(9, 7, |x, y| 1.0 - a.at(x, y));
        assert!((baseline_loss(BaselineKind::Ncc, &a, &neg).unwrap() - 2.0).abs() < 1e-12);

        let (da, db) = (a.data(), b.data());
        let n = da.len() as f64;
        let mse: f64 = da.iter().zip(db).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        assert!((baseline_loss(BaselineKind::Mse, &a, &b).unwrap() - mse).abs() < 1e-12);
        let (ma, mb) = (da.iter().sum::<f64>() / n, db.iter().sum::<f64>() / n);
        let cov: f64 = da.iter().zip(db).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = da.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = db.iter().map(|y| (y - mb).powi(2)).sum();
        let ncc = 1.0 - cov / (va * vb).sqrt();
        assert!((baseline_loss(BaselineKind::Ncc, &a, &b).unwrap() - ncc).abs() < 1e-12);

        let flat = ScalarGrid::from_fn(9, 7, |_, _| 0.5);
        assert!(matches!(baseline_loss(BaselineKind::Ncc, &flat, &a), Err(Error::Degenerate(_))));
        let small = ScalarGrid::<f64>::zeros(3, 3);
        assert!(baseline_loss(BaselineKind::Mse, &small, &a).is_err());
    }

    #[test]
    fn baseline_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = ScalarGrid::from_fn(6, 5, |_, _| rng.random::<f64>());
        let b = ScalarGrid::from_fn(6, 5, |_, _| rng.random::<f64>());
        for kind in [BaselineKind::Mse, BaselineKind::Ncc] {
            let (_, g) = baseline_with_grad(kind, &a, &b, true).unwrap();
            let g = g.unwrap();
            for i in 0..30 {
                let h = 1e-6;
                let mut p = a.clone();
                p.data_mut()[i] += h;
                let mut m = a.clone();
                m.data_mut()[i] -= h;
                let fd = (baseline_loss(kind, &p, &b).unwrap() - baseline_loss(kind, &m, &b).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "{kind:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn multiscale_examples() {
        assert_eq!(multiscale_loss(&[3.5], &[1.0]).unwrap(), 3.5);
        assert_eq!(multiscale_loss(&[3.5, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        let l = [1.0, 2.5, 0.25, 4.0, 8.0];
        assert_eq!(multiscale_loss(&l, &[1.0; 5]).unwrap(), 1.0 + 2.5 + 0.25 + 4.0 + 8.0);
        assert!(matches!(multiscale_loss(&l, &[1.0; 4]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { window: 4, ..Default::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { scale_weights: vec![1.0, -0.5], ..Default::default() }.validate().is_err());
        assert_eq!("NCC".parse::<LossKind>().unwrap(), LossKind::Ncc);
        assert!("l2".parse::<LossKind>().is_err());
        let json = serde_json::to_string(&LossConfig::default()).unwrap();
        assert!(json.contains("\"support_mass\"") && json.contains("\"upperbound\""));
        let back: LossConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, LossConfig::default());
    }

    #[test]
    fn reparam_identity_integer_translation_exact() {
        let (w, h) = (40, 40);
        let s = ContourImage::<f64>::from_pixels(
            w,
            h,
            &(0..360).map(|k| {
                let a = k as f64 * std::f64::consts::PI / 180.0;
                ((20.0 + 7.0 * a.cos()).round() as usize, (19.0 + 5.0 * a.sin()).round() as usize)
            }).collect::<Vec<_>>(),
        );
        let t = ContourImage::<f64>::from_pixels(w, h, &[(15, 15), (22, 25), (18, 21), (26, 14)]);
        let ds = edt(&s).unwrap();
        let a = AffineParams::translation(2.0, -3.0);
        let inv = affine_inverse(&a).unwrap();
        let sw = apply_warp(&s, &affine_field(&a, w, h)).unwrap();
        let tw = apply_warp(&t, &affine_field(&inv, w, h)).unwrap();
        let lhs = weighted_dot(edt(&sw).unwrap().data(), t.data());
        let rhs = weighted_dot(ds.data(), tw.data());
        assert_eq!(lhs, rhs);
    }

    proptest::proptest! {
        #[test]
        fn min_max_inequality(f in proptest::collection::vec(-1e6f64..1e6, 1..64), seed in 0u64..10000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = f.iter().map(|_| rng.random_range(-1e6..1e6)).collect();
            let min_sum = f.iter().zip(&g).map(|(a, b)| a + b).fold(f64::INFINITY, f64::min);
            let min_f = f.iter().copied().fold(f64::INFINITY, f64::min);
            let max_g = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(min_sum <= min_f + max_g);
        }

        #[test]
        fn chamfer_is_nonnegative_and_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_binary(&mut rng, 10, 10, 0.2);
            let t = random_binary(&mut rng, 10, 10, 0.2);
            let a = mdt(&s, &t);
            proptest::prop_assert!(a >= 0.0);
            proptest::prop_assert!((a - mdt(&t, &s)).abs() < 1e-12);
            proptest::prop_assert_eq!(a == 0.0, s == t);
        }
    }
}
