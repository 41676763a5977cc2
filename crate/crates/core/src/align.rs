//! Progressive coarse-to-fine alignment by direct optimization.
//!
//! Each stage refines the fields handed down from the coarser level with one
//! transform per direction, found by gradient descent with a backtracking
//! line search. The forward and backward parts of the loss depend on
//! disjoint parameter blocks, so each block gets its own line search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{combine, evaluate_loss, multiscale_loss, LossBreakdown, LossConfig, PairContext};
use crate::num::Real;
use crate::objective::{stage_breakdown, Direction, DirectionalObjective, Evaluation, Family};
use crate::raster::{build_pyramid, level_dims, ContourImage, Raster};
use crate::warp::{affine_inverse, apply_warp, upsample_field_to, AffineParams, WarpField};

/// Transform family of a stage, as written in schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum FamilySpec {
    Affine,
    Tps { grid: usize },
}

impl std::fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FamilySpec::Affine => write!(f, "affine"),
            FamilySpec::Tps { grid } => write!(f, "tps{grid}x{grid}"),
        }
    }
}

pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_AFFINE_STEP: f64 = 1e-2;
pub const DEFAULT_TPS_STEP: f64 = 1e-1;
/// Largest number of step halvings per line search.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Pyramid level, 0 = full resolution.
    pub level: usize,
    pub family: FamilySpec,
    pub max_iters: usize,
    /// Initial step; doubled after each accepted step, halved on rejection.
    pub step: f64,
    /// Stop once the relative improvement of an accepted step falls below this.
    pub tolerance: f64,
    /// Trust region for the affine part: both singular values of the linear
    /// block stay within `[1 / max_scale, max_scale]` and its determinant
    /// stays positive.
    #[serde(default = "default_max_scale")]
    pub max_scale: f64,
}

pub const DEFAULT_MAX_SCALE: f64 = 2.0;

fn default_max_scale() -> f64 {
    DEFAULT_MAX_SCALE
}

/// Whether the linear block `[[a, b], [c, d]]` lies in the trust region.
pub fn affine_in_trust_region(a: f64, b: f64, c: f64, d: f64, max_scale: f64) -> bool {
    let det = a * d - b * c;
    if !(det > 0.0) {
        return false;
    }
    // Singular values from the trace and determinant of A^T A.
    let t = a * a + b * b + c * c + d * d;
    let disc = (t * t - 4.0 * det * det).max(0.0).sqrt();
    let hi = ((t + disc) / 2.0).sqrt();
    let lo = det / hi;
    hi <= max_scale && lo >= 1.0 / max_scale
}

impl StageSpec {
    pub fn affine(level: usize) -> Self {
        Self {
            level,
            family: FamilySpec::Affine,
            max_iters: DEFAULT_MAX_ITERS,
            step: DEFAULT_AFFINE_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_scale: DEFAULT_MAX_SCALE,
        }
    }

    pub fn tps(level: usize, grid: usize) -> Self {
        Self {
            level,
            family: FamilySpec::Tps { grid },
            max_iters: DEFAULT_MAX_ITERS,
            step: DEFAULT_TPS_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_scale: DEFAULT_MAX_SCALE,
        }
    }
}

/// Affine on the coarsest of five levels, then TPS lattices of 2, 4, 8 and
/// 16 per side on the four finer ones.
pub fn default_schedule() -> Vec<StageSpec> {
    vec![
        StageSpec::affine(4),
        StageSpec::tps(3, 2),
        StageSpec::tps(2, 4),
        StageSpec::tps(1, 8),
        StageSpec::tps(0, 16),
    ]
}

pub fn validate_schedule(schedule: &[StageSpec]) -> Result<()> {
    let Some(first) = schedule.first() else {
        return Err(Error::InvalidConfig("schedule has no stages".into()));
    };
    if first.family != FamilySpec::Affine {
        return Err(Error::InvalidConfig("the coarsest stage must be affine".into()));
    }
    let mut grid = 0;
    for (i, pair) in schedule.windows(2).enumerate() {
        if pair[1].level > pair[0].level {
            return Err(Error::InvalidConfig(format!("stage {} is coarser than stage {i}", i + 1)));
        }
    }
    for (i, s) in schedule.iter().enumerate() {
        if !(s.step > 0.0 && s.step.is_finite()) || !(s.tolerance >= 0.0) {
            return Err(Error::InvalidConfig(format!("stage {i}: step must be > 0 and tolerance >= 0")));
        }
        if !(s.max_scale > 1.0) {
            return Err(Error::InvalidConfig(format!("stage {i}: max_scale must be > 1")));
        }
        if let FamilySpec::Tps { grid: g } = s.family {
            if g < 2 {
                return Err(Error::InvalidConfig(format!("stage {i}: TPS grid must be >= 2")));
            }
            if g < grid {
                return Err(Error::InvalidConfig(format!("stage {i}: TPS grid shrinks from {grid} to {g}")));
            }
            grid = g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Converged,
    NoDescent,
}

/// Optimization record of one direction within a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionTrace {
    /// Final raw parameters (affine `a11 a12 tx a21 a22 ty`, TPS offsets then affine).
    pub params: Vec<f64>,
    /// Accepted loss values, starting with the initial one.
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub stop: StopReason,
}

impl DirectionTrace {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    pub level: usize,
    pub family: FamilySpec,
    pub width: usize,
    pub height: usize,
    pub forward: DirectionTrace,
    pub backward: DirectionTrace,
    /// Stage loss at identity increments.
    pub initial_loss: f64,
    pub final_loss: LossBreakdown,
    /// Loss at full resolution of the fields passed on after this stage.
    pub full_resolution_loss: f64,
    /// Whether the stage's forward field was passed on; a stage that would
    /// raise the full-resolution loss leaves the incoming field in place.
    pub forward_applied: bool,
    pub backward_applied: bool,
}

impl StageReport {
    /// Combined accepted-loss trace (forward + backward), padded with each
    /// direction's last value.
    pub fn trace(&self) -> Vec<f64> {
        let n = self.forward.trace.len().max(self.backward.trace.len());
        let at = |t: &[f64], i: usize| t[i.min(t.len() - 1)];
        (0..n).map(|i| at(&self.forward.trace, i) + at(&self.backward.trace, i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult<T: Real> {
    /// Composed `θ_{S→T}` at full resolution: warping the source by it aligns it to the target.
    pub forward: WarpField<T>,
    /// Composed `θ_{T→S}` at full resolution.
    pub backward: WarpField<T>,
    pub stages: Vec<StageReport>,
    pub final_loss: LossBreakdown,
    /// `sum_i λ_i L_i` over stages, each evaluated at full resolution.
    pub multiscale_loss: f64,
}

impl<T: Real> AlignmentResult<T> {
    pub fn aligned_source(&self, source: &ContourImage<T>) -> Result<ContourImage<T>> {
        apply_warp(source, &self.forward)
    }

    pub fn trace_json(&self) -> serde_json::Value {
        serde_json::json!({
            "width": self.forward.width(),
            "height": self.forward.height(),
            "stages": self.stages,
            "final_loss": self.final_loss,
            "multiscale_loss": self.multiscale_loss,
        })
    }
}

/// Linear reparameterization used by the optimizer. Affine blocks move as
/// `A (z - c) + c + t` with the matrix increment divided by `scale`, so a unit
/// step shifts points at distance `scale` from the centre by about a pixel,
/// on par with a unit translation step. TPS offsets are already in pixels.
struct Precond {
    offsets: usize,
    center: [f64; 2],
    scale: f64,
}

impl Precond {
    fn new<T: Real>(family: &Family<T>, w: usize, h: usize) -> Self {
        Self {
            offsets: family.param_len() - 6,
            center: [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0],
            scale: w.max(h) as f64 / 2.0,
        }
    }

    fn raw<T: Real>(&self, base: &[T], psi: &[T]) -> Vec<T> {
        let mut out = base.to_vec();
        for (o, p) in out[..self.offsets].iter_mut().zip(psi) {
            *o += *p;
        }
        let k = self.offsets;
        let s = T::lit(self.scale);
        let (cx, cy) = (T::lit(self.center[0]), T::lit(self.center[1]));
        let m = [psi[k] / s, psi[k + 1] / s, psi[k + 3] / s, psi[k + 4] / s];
        out[k] += m[0];
        out[k + 1] += m[1];
        out[k + 2] += psi[k + 2] - (m[0] * cx + m[1] * cy);
        out[k + 3] += m[2];
        out[k + 4] += m[3];
        out[k + 5] += psi[k + 5] - (m[2] * cx + m[3] * cy);
        out
    }

    fn pullback<T: Real>(&self, g: &[T]) -> Vec<T> {
        let mut out = g.to_vec();
        let k = self.offsets;
        let s = T::lit(self.scale);
        let (cx, cy) = (T::lit(self.center[0]), T::lit(self.center[1]));
        out[k] = (g[k] - cx * g[k + 2]) / s;
        out[k + 1] = (g[k + 1] - cy * g[k + 2]) / s;
        out[k + 3] = (g[k + 3] - cx * g[k + 5]) / s;
        out[k + 4] = (g[k + 4] - cy * g[k + 5]) / s;
        out
    }
}

struct Descent<T: Real> {
    params: Vec<T>,
    /// Sampling coordinates the accepted loss was evaluated at.
    coords: Vec<[T; 2]>,
    last: Evaluation<T>,
    trace: Vec<f64>,
    evaluations: usize,
    stop: StopReason,
}

/// Gradient descent with backtracking from `base`; never accepts a worse iterate.
///
/// Sampling coordinates are linear in the parameters, so each iteration maps
/// the search direction to coordinates once and every trial step is a cheap
/// update of the current coordinates.
fn descend<T: Real>(
    obj: &DirectionalObjective<'_, T>,
    base: &[T],
    pre: &Precond,
    spec: &StageSpec,
    stage: usize,
) -> Result<Descent<T>> {
    let start_failed = |e: Error| Error::Optimization {
        stage,
        message: format!("{:?} loss undefined at the stage start: {e}", obj.direction()),
        trace: Vec::new(),
    };
    let mut params = base.to_vec();
    let mut coords = obj.coords(&params).map_err(start_failed)?;
    let mut current = obj.evaluate_coords(&params, &coords, true).map_err(start_failed)?;
    let mut trace = vec![current.value.as_f64()];
    let mut evaluations = 1;
    let mut step = T::lit(spec.step);
    let mut stop = StopReason::MaxIters;
    let zero = vec![T::zero(); base.len()];
    for _ in 0..spec.max_iters {
        let g = pre.pullback(current.grad.as_ref().expect("gradient requested"));
        if g.iter().all(|v| *v == T::zero()) {
            stop = StopReason::Converged;
            break;
        }
        let dir = pre.raw(&zero, &g);
        let dcoords = obj.linear_coords(&dir);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let tp: Vec<T> = params.iter().zip(&dir).map(|(p, d)| *p - step * *d).collect();
            let tc: Vec<[T; 2]> =
                coords.iter().zip(&dcoords).map(|(c, d)| [c[0] - step * d[0], c[1] - step * d[1]]).collect();
            evaluations += 1;
            let k = tp.len() - 6;
            let ok = tp.iter().all(|v| v.is_finite())
                && affine_in_trust_region(
                    tp[k].as_f64(),
                    tp[k + 1].as_f64(),
                    tp[k + 3].as_f64(),
                    tp[k + 4].as_f64(),
                    spec.max_scale,
                );
            match ok.then(|| obj.evaluate_coords(&tp, &tc, true)) {
                Some(Ok(e)) if e.value < current.value => {
                    accepted = Some((tp, tc, e));
                    break;
                }
                _ => step = step * T::lit(0.5),
            }
        }
        let Some((tp, tc, e)) = accepted else {
            stop = StopReason::NoDescent;
            break;
        };
        let prev = current.value;
        params = tp;
        coords = tc;
        current = e;
        trace.push(current.value.as_f64());
        step = step + step;
        let rel = (prev - current.value) / prev.abs().max(T::lit(1e-300));
        if rel < T::lit(spec.tolerance) {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(Descent { params, coords, last: current, trace, evaluations, stop })
}

/// Outcome of one stage: refined fields and the parameters that produced them.
#[derive(Debug, Clone)]
pub struct StageOutcome<T: Real> {
    pub forward_params: Vec<T>,
    pub backward_params: Vec<T>,
    pub forward_field: WarpField<T>,
    pub backward_field: WarpField<T>,
    pub report: StageReport,
}

/// Optimize one stage's forward and backward transforms over the incoming
/// fields. `stage` is only used to label errors and reports.
pub fn optimize_stage<T: Real>(
    spec: &StageSpec,
    ctx: &PairContext<T>,
    init_fwd: &WarpField<T>,
    init_bwd: &WarpField<T>,
    cfg: &LossConfig,
    stage: usize,
) -> Result<StageOutcome<T>> {
    let (w, h) = ctx.dims();
    let family = match spec.family {
        FamilySpec::Affine => Family::Affine,
        FamilySpec::Tps { grid } => Family::tps(grid, w, h)?,
    };
    let fwd = DirectionalObjective::new(ctx, cfg, &family, Direction::Forward, init_fwd)?;
    let bwd = DirectionalObjective::new(ctx, cfg, &family, Direction::Backward, init_bwd)?;
    let pre = Precond::new(&family, w, h);
    let identity = family.identity_params();
    let initial = stage_breakdown(&fwd, &bwd, &identity, &identity).map_err(|e| Error::Optimization {
        stage,
        message: format!("loss undefined at the stage start: {e}"),
        trace: Vec::new(),
    })?;

    let f = descend(&fwd, &identity, &pre, spec, stage)?;

    // With nothing handed down yet, the inverse of the forward affine is a
    // natural start for the backward one; keep whichever start is better.
    let mut bwd_base = identity.clone();
    let untouched = |q: &WarpField<T>| q.max_abs_diff(&WarpField::identity(w, h)) == T::zero();
    if spec.family == FamilySpec::Affine && untouched(init_fwd) && untouched(init_bwd) {
        if let Ok(inv) = AffineParams::from_slice(&f.params).and_then(|a| affine_inverse(&a)) {
            let seeded = inv.to_vec();
            if let (Ok(a), Ok(b)) = (bwd.value(&seeded), bwd.value(&identity)) {
                if a < b {
                    bwd_base = seeded;
                }
            }
        }
    }
    let mut b = descend(&bwd, &bwd_base, &pre, spec, stage)?;
    if bwd_base != identity {
        // Report the trace from the identity start so it stays comparable.
        b.trace.insert(0, bwd.value(&identity)?.as_f64());
    }

    let final_loss = combine(&f.last.part, &b.last.part, cfg, f.last.regularizer + b.last.regularizer);
    let forward_field = WarpField::new(w, h, f.coords)?;
    let backward_field = WarpField::new(w, h, b.coords)?;
    let to_f64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let report = StageReport {
        index: stage,
        level: spec.level,
        family: spec.family,
        width: w,
        height: h,
        forward: DirectionTrace { params: to_f64(&f.params), trace: f.trace, evaluations: f.evaluations, stop: f.stop },
        backward: DirectionTrace { params: to_f64(&b.params), trace: b.trace, evaluations: b.evaluations, stop: b.stop },
        initial_loss: initial.total,
        final_loss,
        full_resolution_loss: f64::NAN,
        forward_applied: false,
        backward_applied: false,
    };
    Ok(StageOutcome {
        forward_params: f.params,
        backward_params: b.params,
        forward_field,
        backward_field,
        report,
    })
}

fn upsample_to_level<T: Real>(field: &WarpField<T>, from: usize, to: usize, base: (usize, usize)) -> WarpField<T> {
    let mut f = field.clone();
    for level in (to..from).rev() {
        let (w, h) = level_dims(base.0, base.1, level);
        f = upsample_field_to(&f, w, h);
    }
    f
}

/// Coarse-to-fine alignment of `source` onto `target`.
pub fn align<T: Real>(
    source: &ContourImage<T>,
    target: &ContourImage<T>,
    schedule: &[StageSpec],
    cfg: &LossConfig,
) -> Result<AlignmentResult<T>> {
    cfg.validate()?;
    validate_schedule(schedule)?;
    if source.dims() != target.dims() {
        return Err(Error::mismatch(target.dims(), source.dims()));
    }
    if cfg.scale_weights.len() != schedule.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scale weights for {} stages",
            cfg.scale_weights.len(),
            schedule.len()
        )));
    }
    let base = source.dims();
    let levels = schedule[0].level + 1;
    let ps = build_pyramid(source, levels)?;
    let pt = build_pyramid(target, levels)?;
    let mut contexts: Vec<Option<PairContext<T>>> = vec![None; levels];
    let mut context = |level: usize| -> Result<PairContext<T>> {
        if contexts[level].is_none() {
            contexts[level] = Some(PairContext::new(ps.levels[level].clone(), pt.levels[level].clone())?);
        }
        Ok(contexts[level].clone().expect("just built"))
    };

    let full = context(0)?;
    let mut level = schedule[0].level;
    let (w, h) = level_dims(base.0, base.1, level);
    let mut fwd = WarpField::identity(w, h);
    let mut bwd = WarpField::identity(w, h);
    let id = WarpField::identity(base.0, base.1);
    let mut kept = evaluate_loss(&full, &id, &id, cfg)?;
    let mut stages = Vec::with_capacity(schedule.len());
    let mut full_losses = Vec::with_capacity(schedule.len());
    for (i, spec) in schedule.iter().enumerate() {
        if spec.level < level {
            fwd = upsample_to_level(&fwd, level, spec.level, base);
            bwd = upsample_to_level(&bwd, level, spec.level, base);
            level = spec.level;
        }
        let ctx = context(level)?;
        let out = optimize_stage(spec, &ctx, &fwd, &bwd, cfg, i)?;
        let mut report = out.report;
        // A coarse optimum can be slightly off at full resolution; each
        // direction keeps its incoming field unless the stage does not hurt
        // its share of the full-resolution loss.
        let up = |f: &WarpField<T>| upsample_to_level(f, level, 0, base);
        let cand = evaluate_loss(&full, &up(&out.forward_field), &up(&out.backward_field), cfg);
        if let Ok(c) = &cand {
            let (cf, cb) = direction_shares(c);
            let (kf, kb) = direction_shares(&kept);
            report.forward_applied = cf <= kf;
            report.backward_applied = cb <= kb;
        }
        if report.forward_applied {
            fwd = out.forward_field;
        }
        if report.backward_applied {
            bwd = out.backward_field;
        }
        kept = match cand {
            Ok(c) if report.forward_applied && report.backward_applied => c,
            _ => evaluate_loss(&full, &up(&fwd), &up(&bwd), cfg)?,
        };
        report.full_resolution_loss = kept.total;
        full_losses.push(kept.total);
        stages.push(report);
    }
    let forward = upsample_to_level(&fwd, level, 0, base);
    let backward = upsample_to_level(&bwd, level, 0, base);
    let final_loss = kept;
    let multiscale_loss = multiscale_loss(&full_losses, &cfg.scale_weights)?;
    Ok(AlignmentResult { forward, backward, stages, final_loss, multiscale_loss })
}

/// Parts of a loss controlled by the forward and by the backward field.
fn direction_shares(b: &LossBreakdown) -> (f64, f64) {
    (b.forward_proximity + b.alpha * b.shape, b.backward_proximity)
}

/// Pyramid depth needed by a schedule.
pub fn schedule_levels(schedule: &[StageSpec]) -> usize {
    schedule.iter().map(|s| s.level).max().map_or(0, |l| l + 1)
}

/// Check that a schedule's pyramid fits an image of the given size.
pub fn check_schedule_fits(schedule: &[StageSpec], width: usize, height: usize) -> Result<()> {
    let probe = ContourImage::<f64>::zeros(width.max(2), height.max(2));
    build_pyramid(&probe, schedule_levels(schedule)).map(|_| ())
}
