//! Stage objectives: the loss as a function of one transform's parameters,
//! with analytic gradients and a finite-difference fallback.
//!
//! A stage refines an incoming field `Q` with a new transform `G`; the
//! combined backward map is `G(Q(p))`. `G` is linear in its parameters, so
//! the TPS basis at the incoming coordinates is tabulated once per stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{backward_part, combine, forward_part, LossBreakdown, LossConfig, Part, PairContext};
use crate::num::Real;
use crate::raster::{ContourImage, FromSamples, Raster};
use crate::warp::{sample_with_grad, AffineParams, TpsControlGrid, TpsParams, WarpField};

/// Transform family of one stage.
#[derive(Debug, Clone)]
pub enum Family<T: Real> {
    Affine,
    Tps(TpsControlGrid<T>),
}

impl<T: Real> Family<T> {
    pub fn tps(g: usize, width: usize, height: usize) -> Result<Self> {
        Ok(Family::Tps(TpsControlGrid::new(g, width, height)?))
    }

    /// 6 for affine, `2n + 6` for a TPS with `n` controls.
    pub fn param_len(&self) -> usize {
        match self {
            Family::Affine => 6,
            Family::Tps(g) => 2 * g.len() + 6,
        }
    }

    pub fn identity_params(&self) -> Vec<T> {
        match self {
            Family::Affine => AffineParams::identity().to_vec(),
            Family::Tps(g) => TpsParams::identity(g.len()).to_vec(),
        }
    }

    /// Combined field `G(Q(p))` for parameters `params` over `incoming`.
    pub fn field(&self, params: &[T], incoming: &WarpField<T>) -> Result<WarpField<T>> {
        self.check(params)?;
        let coords: Vec<[T; 2]> = match self {
            Family::Affine => {
                let a = AffineParams::from_slice(params)?;
                incoming.coords().iter().map(|&z| a.apply(z)).collect()
            }
            Family::Tps(grid) => {
                let p = TpsParams::from_slice(params, grid.len())?;
                let mut ev = crate::warp::TpsEvaluator::new(&p, grid)?;
                incoming.coords().iter().map(|&z| ev.eval(z)).collect()
            }
        };
        WarpField::new(incoming.width(), incoming.height(), coords)
    }

    fn check(&self, params: &[T]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite transform parameter".into()));
        }
        Ok(())
    }
}

/// Which image a stage objective warps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Warps the source towards the target (`θ_{S→T}`).
    Forward,
    /// Warps the target towards the source (`θ_{T→S}`).
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    /// Central differences with the given step.
    FiniteDifference,
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Margin, in units of the difference step, that smoothness checks keep from
/// the zero of a gradient distance.
pub const APEX_MARGIN: f64 = 100.0;

/// Loss value of one direction with its parts.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Real> {
    pub value: T,
    pub grad: Option<Vec<T>>,
    pub(crate) part: Part<T>,
    pub regularizer: T,
}

/// The part of the loss one transform controls, as a function of its parameters.
pub struct DirectionalObjective<'a, T: Real> {
    ctx: &'a PairContext<T>,
    cfg: &'a LossConfig,
    family: &'a Family<T>,
    dir: Direction,
    incoming: &'a WarpField<T>,
    /// Row-major `P x (n + 3)` TPS basis at the incoming coordinates, kept in
    /// single precision: the product with it is memory bound.
    basis: Vec<f32>,
}

impl<'a, T: Real> DirectionalObjective<'a, T> {
    pub fn new(
        ctx: &'a PairContext<T>,
        cfg: &'a LossConfig,
        family: &'a Family<T>,
        dir: Direction,
        incoming: &'a WarpField<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if incoming.dims() != ctx.dims() {
            return Err(Error::mismatch(ctx.dims(), incoming.dims()));
        }
        if let Family::Tps(grid) = family {
            if grid.dims() != ctx.dims() {
                return Err(Error::mismatch(ctx.dims(), grid.dims()));
            }
        }
        let basis = match family {
            Family::Affine => Vec::new(),
            Family::Tps(grid) => {
                let m = grid.len() + 3;
                let mut b = Vec::with_capacity(incoming.coords().len() * m);
                let mut row = vec![T::zero(); m];
                for &z in incoming.coords() {
                    grid.basis_row(z, &mut row);
                    b.extend(row.iter().map(|v| v.as_f64() as f32));
                }
                b
            }
        };
        Ok(Self { ctx, cfg, family, dir, incoming, basis })
    }

    pub fn direction(&self) -> Direction {
        self.dir
    }

    pub fn param_len(&self) -> usize {
        self.family.param_len()
    }

    fn moving(&self) -> &ContourImage<T> {
        match self.dir {
            Direction::Forward => self.ctx.source(),
            Direction::Backward => self.ctx.target(),
        }
    }

    /// Sampling coordinates for `params`. They are linear in `params`, which
    /// lets a line search move along a direction without another basis product.
    pub(crate) fn linear_coords(&self, params: &[T]) -> Vec<[T; 2]> {
        let k = params.len() - 6;
        let a = &params[k..];
        let affine = |z: [T; 2]| [a[0] * z[0] + a[1] * z[1] + a[2], a[3] * z[0] + a[4] * z[1] + a[5]];
        match self.family {
            Family::Affine => self.incoming.coords().iter().map(|&z| affine(z)).collect(),
            Family::Tps(grid) => {
                let m = grid.len() + 3;
                let (cx, cy) = self.coefficients(params).expect("TPS family");
                self.incoming
                    .coords()
                    .iter()
                    .zip(self.basis.chunks_exact(m))
                    .map(|(&z, row)| {
                        let (ux, uy) = dot2(row, &cx, &cy);
                        let q = affine(z);
                        [q[0] + ux, q[1] + uy]
                    })
                    .collect()
            }
        }
    }

    /// Per-axis spline coefficients of the offset block (TPS only).
    fn coefficients(&self, params: &[T]) -> Option<(Vec<T>, Vec<T>)> {
        match self.family {
            Family::Affine => None,
            Family::Tps(grid) => {
                let n = grid.len();
                let dx: Vec<T> = params[..2 * n].iter().step_by(2).copied().collect();
                let dy: Vec<T> = params[1..2 * n].iter().step_by(2).copied().collect();
                Some((grid.coefficients(&dx), grid.coefficients(&dy)))
            }
        }
    }

    pub(crate) fn coords(&self, params: &[T]) -> Result<Vec<[T; 2]>> {
        self.family.check(params)?;
        Ok(self.linear_coords(params))
    }

    pub fn field(&self, params: &[T]) -> Result<WarpField<T>> {
        WarpField::new(self.incoming.width(), self.incoming.height(), self.coords(params)?)
    }

    fn regularizer(&self, coefs: Option<&(Vec<T>, Vec<T>)>) -> T {
        match (self.family, coefs) {
            (Family::Tps(grid), Some((cx, cy))) if self.cfg.bending_weight > 0.0 => {
                let n = grid.len();
                T::lit(self.cfg.bending_weight) * (grid.bending_energy(&cx[..n]) + grid.bending_energy(&cy[..n]))
            }
            _ => T::zero(),
        }
    }

    pub fn evaluate(&self, params: &[T], want_grad: bool) -> Result<Evaluation<T>> {
        let coords = self.coords(params)?;
        self.evaluate_coords(params, &coords, want_grad)
    }

    /// Evaluate with precomputed sampling coordinates; `params` only feeds the
    /// regularizer.
    pub(crate) fn evaluate_coords(&self, params: &[T], coords: &[[T; 2]], want_grad: bool) -> Result<Evaluation<T>> {
        let img = self.moving();
        let (w, h) = img.dims();
        let mut samples = Vec::with_capacity(coords.len());
        let mut spatial = if want_grad { Vec::with_capacity(coords.len()) } else { Vec::new() };
        for &q in coords {
            if !(q[0].is_finite() && q[1].is_finite()) {
                return Err(Error::Numerical("non-finite warp coordinate".into()));
            }
            let (v, d) = sample_with_grad(img, q);
            samples.push(v);
            if want_grad {
                spatial.push(d);
            }
        }
        let warped = ContourImage::from_samples(w, h, samples);
        let part = match self.dir {
            Direction::Forward => forward_part(self.ctx, &warped, self.cfg.kind, self.cfg, want_grad)?,
            Direction::Backward => backward_part(self.ctx, &warped, self.cfg.kind, self.cfg, want_grad)?,
        };
        let coefs = if self.cfg.bending_weight > 0.0 { self.coefficients(params) } else { None };
        let regularizer = self.regularizer(coefs.as_ref());
        let value = part.value + regularizer;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite {:?} loss", self.dir)));
        }
        let grad = if want_grad {
            let dimg = part.grad.as_ref().expect("gradient requested");
            Some(self.chain(dimg, &spatial, coefs.as_ref())?)
        } else {
            None
        };
        Ok(Evaluation { value, grad, part, regularizer })
    }

    /// Chain image sensitivities through the sampler into the parameters.
    fn chain(&self, dimg: &[T], spatial: &[[T; 2]], coefs: Option<&(Vec<T>, Vec<T>)>) -> Result<Vec<T>> {
        let z = self.incoming.coords();
        let mut ga = [T::zero(); 6];
        let m = match self.family {
            Family::Affine => 0,
            Family::Tps(grid) => grid.len() + 3,
        };
        let mut gcx = vec![T::zero(); m];
        let mut gcy = vec![T::zero(); m];
        for (p, (&di, s)) in dimg.iter().zip(spatial).enumerate() {
            if di == T::zero() || (s[0] == T::zero() && s[1] == T::zero()) {
                continue;
            }
            let qx = di * s[0];
            let qy = di * s[1];
            let zp = z[p];
            ga[0] += qx * zp[0];
            ga[1] += qx * zp[1];
            ga[2] += qx;
            ga[3] += qy * zp[0];
            ga[4] += qy * zp[1];
            ga[5] += qy;
            if m > 0 {
                let row = &self.basis[p * m..(p + 1) * m];
                for ((cx, cy), b) in gcx.iter_mut().zip(gcy.iter_mut()).zip(row) {
                    let b = T::lit(*b as f64);
                    *cx += qx * b;
                    *cy += qy * b;
                }
            }
        }
        let mut grad = Vec::with_capacity(self.param_len());
        if let Family::Tps(grid) = self.family {
            let n = grid.len();
            if self.cfg.bending_weight > 0.0 {
                let (cx, cy) = coefs.expect("TPS coefficients");
                let bw = T::lit(self.cfg.bending_weight);
                for (g, e) in gcx.iter_mut().zip(grid.bending_energy_grad(&cx[..n])) {
                    *g += bw * e;
                }
                for (g, e) in gcy.iter_mut().zip(grid.bending_energy_grad(&cy[..n])) {
                    *g += bw * e;
                }
            }
            let dx = grid.coefficients_adjoint(&gcx);
            let dy = grid.coefficients_adjoint(&gcy);
            for (a, b) in dx.into_iter().zip(dy) {
                grad.push(a);
                grad.push(b);
            }
        }
        grad.extend_from_slice(&ga);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite {:?} gradient", self.dir)));
        }
        Ok(grad)
    }

    /// Hash of every discrete decision the loss makes at `params`: bilinear
    /// cells of all samples and, for the shape term, validity masks and window
    /// argmaxes. The loss is smooth between parameter points that share a
    /// signature, which is what finite-difference checks need.
    pub fn kink_signature(&self, params: &[T]) -> Result<u64> {
        Ok(self.kink_state(params)?.0)
    }

    /// Signature plus the smallest positive shape-term entry (infinite when
    /// there is none).
    fn kink_state(&self, params: &[T]) -> Result<(u64, T)> {
        use std::hash::{Hash, Hasher};
        let coords = self.coords(params)?;
        let mut state = std::collections::hash_map::DefaultHasher::new();
        let img = self.moving();
        let mut samples = Vec::with_capacity(coords.len());
        for &q in &coords {
            (q[0].floor().to_i64(), q[1].floor().to_i64()).hash(&mut state);
            samples.push(sample_with_grad(img, q).0);
        }
        let (w, h) = img.dims();
        let warped = ContourImage::from_samples(w, h, samples);
        let mut apex = T::infinity();
        if self.dir == Direction::Forward && self.cfg.kind == crate::loss::LossKind::Upperbound {
            apex = crate::loss::shape_signature(self.ctx, &warped, self.cfg, &mut state);
        }
        Ok((state.finish(), apex))
    }

    /// True when `params` perturbed by `±h` along any single coordinate keeps
    /// the same [`kink_signature`](Self::kink_signature), and no shape-term
    /// entry is within `APEX_MARGIN * h` of the apex of its cone, where the
    /// curvature is too high for a central difference of step `h`.
    pub fn is_smooth_at(&self, params: &[T], h: T) -> Result<bool> {
        let (base, apex) = self.kink_state(params)?;
        if apex < T::lit(APEX_MARGIN) * h {
            return Ok(false);
        }
        let mut p = params.to_vec();
        for i in 0..params.len() {
            for d in [h, -h] {
                p[i] = params[i] + d;
                if self.kink_signature(&p)? != base {
                    return Ok(false);
                }
            }
            p[i] = params[i];
        }
        Ok(true)
    }

    pub fn value(&self, params: &[T]) -> Result<T> {
        Ok(self.evaluate(params, false)?.value)
    }

    pub fn gradient(&self, params: &[T], mode: GradMode) -> Result<Vec<T>> {
        match mode {
            GradMode::Analytic => Ok(self.evaluate(params, true)?.grad.expect("requested")),
            GradMode::FiniteDifference => self.finite_difference(params, T::lit(FD_STEP)),
        }
    }

    pub fn finite_difference(&self, params: &[T], h: T) -> Result<Vec<T>> {
        let mut p = params.to_vec();
        let two_h = h + h;
        (0..params.len())
            .map(|i| {
                p[i] = params[i] + h;
                let up = self.value(&p)?;
                p[i] = params[i] - h;
                let down = self.value(&p)?;
                p[i] = params[i];
                Ok((up - down) / two_h)
            })
            .collect()
    }
}

#[inline]
fn dot2<T: Real>(row: &[f32], a: &[T], b: &[T]) -> (T, T) {
    let k = row.len() / 4 * 4;
    let mut sa = [T::zero(); 4];
    let mut sb = [T::zero(); 4];
    for ((r, x), y) in row[..k].chunks_exact(4).zip(a[..k].chunks_exact(4)).zip(b[..k].chunks_exact(4)) {
        for i in 0..4 {
            let v = T::lit(r[i] as f64);
            sa[i] += v * x[i];
            sb[i] += v * y[i];
        }
    }
    let (mut ta, mut tb) = (T::zero(), T::zero());
    for ((r, x), y) in row[k..].iter().zip(&a[k..]).zip(&b[k..]) {
        let v = T::lit(*r as f64);
        ta += v * *x;
        tb += v * *y;
    }
    ((sa[0] + sa[1]) + (sa[2] + sa[3]) + ta, (sb[0] + sb[1]) + (sb[2] + sb[3]) + tb)
}

/// Gradient of the full loss wrt `[forward params, backward params]` for a
/// stage refining `incoming_fwd` and `incoming_bwd`.
#[allow(clippy::too_many_arguments)]
pub fn loss_grad<T: Real>(
    ctx: &PairContext<T>,
    cfg: &LossConfig,
    family: &Family<T>,
    incoming_fwd: &WarpField<T>,
    incoming_bwd: &WarpField<T>,
    fwd_params: &[T],
    bwd_params: &[T],
    mode: GradMode,
) -> Result<Vec<T>> {
    let f = DirectionalObjective::new(ctx, cfg, family, Direction::Forward, incoming_fwd)?;
    let b = DirectionalObjective::new(ctx, cfg, family, Direction::Backward, incoming_bwd)?;
    let mut g = f.gradient(fwd_params, mode)?;
    g.extend(b.gradient(bwd_params, mode)?);
    Ok(g)
}

/// Full loss breakdown for a stage's forward and backward parameters.
pub fn stage_breakdown<T: Real>(
    fwd: &DirectionalObjective<'_, T>,
    bwd: &DirectionalObjective<'_, T>,
    fwd_params: &[T],
    bwd_params: &[T],
) -> Result<LossBreakdown> {
    let f = fwd.evaluate(fwd_params, false)?;
    let b = bwd.evaluate(bwd_params, false)?;
    Ok(combine(&f.part, &b.part, fwd.cfg, f.regularizer + b.regularizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{evaluate_loss, LossKind};
    use crate::raster::ScalarGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth compact bump of radius `r` centred at `c`.
    fn bump(w: usize, h: usize, c: [f64; 2], r: f64) -> ContourImage<f64> {
        let g = ScalarGrid::from_fn(w, h, |x, y| {
            let d2 = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)) / (r * r);
            if d2 < 1.0 {
                (1.0 - d2).powi(3)
            } else {
                0.0
            }
        });
        ContourImage::new(w, h, g.into_data()).unwrap()
    }

    fn binary_pair(w: usize, h: usize) -> (ContourImage<f64>, ContourImage<f64>) {
        let ring = |cx: f64, cy: f64| {
            let pts: Vec<(usize, usize)> = (0..200)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::TAU / 200.0;
                    ((cx + 4.0 * a.cos()).round() as usize, (cy + 3.0 * a.sin()).round() as usize)
                })
                .collect();
            ContourImage::from_pixels(w, h, &pts)
        };
        (ring(w as f64 / 2.0 - 1.0, h as f64 / 2.0), ring(w as f64 / 2.0 + 1.0, h as f64 / 2.0 - 1.0))
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
    }

    #[test]
    fn family_fields() {
        let id = WarpField::<f64>::identity(10, 8);
        let aff = Family::Affine;
        assert_eq!(aff.field(&aff.identity_params(), &id).unwrap(), id);
        let tps = Family::tps(3, 10, 8).unwrap();
        assert_eq!(tps.param_len(), 2 * 9 + 6);
        let f = tps.field(&tps.identity_params(), &id).unwrap();
        assert!(f.max_abs_diff(&id) < 1e-9);
        assert!(aff.field(&[1.0; 5], &id).is_err());
        assert!(aff.field(&[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0], &id).is_err());
    }

    #[test]
    fn objective_field_matches_family_field() {
        let (s, t) = binary_pair(20, 18);
        let ctx = PairContext::new(s, t).unwrap();
        let cfg = LossConfig::default();
        let incoming = WarpField::from_fn(20, 18, |x: f64, y: f64| [x + 0.3 * (y * 0.2).sin(), y - 0.2]);
        let fam = Family::tps(3, 20, 18).unwrap();
        let obj = DirectionalObjective::new(&ctx, &cfg, &fam, Direction::Forward, &incoming).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = fam.identity_params().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let a = obj.field(&p).unwrap();
        let b = fam.field(&p, &incoming).unwrap();
        // The tabulated basis is single precision.
        assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn breakdown_matches_direct_evaluation() {
        let (s, t) = binary_pair(24, 20);
        let ctx = PairContext::new(s, t).unwrap();
        let id = WarpField::identity(24, 20);
        let fam = Family::Affine;
        for kind in [LossKind::Upperbound, LossKind::Reparam, LossKind::Chamfer, LossKind::Mse, LossKind::Ncc] {
            let cfg = LossConfig { kind, alpha: 0.5, ..Default::default() };
            let f = DirectionalObjective::new(&ctx, &cfg, &fam, Direction::Forward, &id).unwrap();
            let b = DirectionalObjective::new(&ctx, &cfg, &fam, Direction::Backward, &id).unwrap();
            let pf = AffineParams::translation(0.5, -0.25).to_vec();
            let pb = AffineParams::translation(-0.5, 0.25).to_vec();
            let got = stage_breakdown(&f, &b, &pf, &pb).unwrap();
            let want = evaluate_loss(&ctx, &f.field(&pf).unwrap(), &b.field(&pb).unwrap(), &cfg).unwrap();
            assert_eq!(got, want, "{kind:?}");
        }
    }

    #[test]
    fn constant_image_zero_gradient() {
        let ones = ContourImage::<f64>::new(12, 12, vec![1.0; 144]).unwrap();
        let ctx = PairContext::new(ones.clone(), ones).unwrap();
        let cfg = LossConfig { alpha: 0.0, ..Default::default() };
        let id = WarpField::identity(12, 12);
        let p = AffineParams::translation(0.5, 0.5).to_vec();
        let g = loss_grad(&ctx, &cfg, &Family::Affine, &id, &id, &p, &p, GradMode::Analytic).unwrap();
        assert!(g.iter().all(|v| *v == 0.0), "{g:?}");
    }

    #[test]
    fn translation_gradient_sign() {
        // Target blob sits 5 px right of the source blob; sampling further
        // left (negative tx) moves the warped source right.
        let (w, h) = (40, 24);
        let s = bump(w, h, [14.0, 12.0], 6.0);
        let t = bump(w, h, [19.0, 12.0], 6.0);
        let on = |img: &ContourImage<f64>| {
            ContourImage::new(w, h, img.data().iter().map(|v| if *v > 0.3 { 1.0 } else { 0.0 }).collect()).unwrap()
        };
        let ctx = PairContext::new(on(&s), on(&t)).unwrap();
        let cfg = LossConfig::default();
        let id = WarpField::identity(w, h);
        let obj = DirectionalObjective::new(&ctx, &cfg, &Family::Affine, Direction::Forward, &id).unwrap();
        let p0 = AffineParams::translation(0.5, 0.5).to_vec();
        let g = obj.gradient(&p0, GradMode::Analytic).unwrap();
        let mut p1 = p0.clone();
        p1[2] -= 1.0;
        assert!(obj.value(&p1).unwrap() < obj.value(&p0).unwrap());
        assert!(g[2] > 0.0, "{g:?}");
    }

    /// Checks one random point; returns false when the point sits within `h`
    /// of a kink and was skipped.
    fn check_family(fam: &Family<f64>, seed: u64, tps: bool) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rng.random_range(12..=24);
        let h = rng.random_range(12..=24);
        let cx = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(n as f64 * 0.35..n as f64 * 0.65);
        let s = bump(w, h, [cx(&mut rng, w), cx(&mut rng, h)], rng.random_range(3.5..5.5));
        let t = bump(w, h, [cx(&mut rng, w), cx(&mut rng, h)], rng.random_range(3.5..5.5));
        let on = |img: &ContourImage<f64>| {
            ContourImage::new(w, h, img.data().iter().map(|v| if *v > 0.2 { 1.0 } else { 0.0 }).collect()).unwrap()
        };
        // Binary images define the distance fields; the smooth bumps are warped.
        let ctx = PairContext::with_fields(
            s.clone(),
            t.clone(),
            crate::edt::edt(&on(&s)).unwrap(),
            crate::edt::edt(&on(&t)).unwrap(),
        )
        .unwrap();
        let fam = match fam {
            Family::Affine => Family::Affine,
            Family::Tps(g) => Family::tps(g.g(), w, h).unwrap(),
        };
        let cfg = LossConfig { alpha: [0.0, 1e-2, 0.5][seed as usize % 3], ..Default::default() };
        let id = WarpField::identity(w, h);
        let mut p = fam.identity_params();
        let k = p.len() - 6;
        if tps {
            for v in p[..k].iter_mut() {
                *v = rng.random_range(-0.15..0.15);
            }
        }
        p[k] += rng.random_range(-0.004..0.004);
        p[k + 1] += rng.random_range(-0.004..0.004);
        p[k + 2] = 0.5 * if rng.random::<bool>() { 1.0 } else { -1.0 };
        p[k + 3] += rng.random_range(-0.004..0.004);
        p[k + 4] += rng.random_range(-0.004..0.004);
        p[k + 5] = 0.5 * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let objs: Vec<_> = [Direction::Forward, Direction::Backward]
            .into_iter()
            .map(|dir| DirectionalObjective::new(&ctx, &cfg, &fam, dir, &id).unwrap())
            .collect();
        if !objs.iter().all(|o| o.is_smooth_at(&p, FD_STEP).unwrap()) {
            return false;
        }
        for obj in &objs {
            let dir = obj.direction();
            let a = obj.gradient(&p, GradMode::Analytic).unwrap();
            let n = obj.gradient(&p, GradMode::FiniteDifference).unwrap();
            for (i, (x, y)) in a.iter().zip(&n).enumerate() {
                let e = rel_err(*x, *y);
                assert!(e < 1e-4, "seed {seed} {dir:?} component {i}: analytic {x} vs numeric {y} ({e})");
            }
        }
        true
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let checked = (0..200).filter(|&seed| check_family(&Family::Affine, seed, false)).take(12).count();
        assert_eq!(checked, 12, "only {checked} smooth points");
    }

    #[test]
    fn tps_gradient_matches_finite_differences() {
        let checked = (0..200)
            .filter(|&seed| check_family(&Family::tps(2 + (seed as usize % 3), 16, 16).unwrap(), 100 + seed, true))
            .take(9)
            .count();
        assert_eq!(checked, 9, "only {checked} smooth points");
    }

    #[test]
    fn bending_energy_gradient() {
        let (s, t) = binary_pair(20, 20);
        let ctx = PairContext::new(s, t).unwrap();
        let cfg = LossConfig { bending_weight: 0.3, kind: LossKind::Reparam, ..Default::default() };
        let fam = Family::tps(3, 20, 20).unwrap();
        let id = WarpField::identity(20, 20);
        let obj = DirectionalObjective::new(&ctx, &cfg, &fam, Direction::Forward, &id).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = fam.identity_params();
        for v in p[..18].iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let k = 18;
        p[k + 2] = 0.5;
        p[k + 5] = -0.5;
        let e = obj.evaluate(&p, true).unwrap();
        assert!(e.regularizer > 0.0);
        let n = obj.finite_difference(&p, 1e-5).unwrap();
        for (a, b) in e.grad.unwrap().iter().zip(&n) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }
}
