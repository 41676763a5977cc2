//! Small oracle-backed checks of the core routines, runnable from an installed
//! binary.

use chamfer_align::edt::{edt, edt_bruteforce};
use chamfer_align::loss::{chamfer_shape_direct, chamfer_upperbound, LossConfig};
use chamfer_align::objective::{Direction, DirectionalObjective, Family, GradMode, FD_STEP};
use chamfer_align::raster::Raster;
use chamfer_align::simulate::rng_stream;
use chamfer_align::warp::{affine_field, affine_inverse, apply_warp};
use chamfer_align::{AffineParams, ContourImage, PairContext, WarpField};
use rand::Rng;

use crate::{CliError, CliResult};

type Check = fn(u64, usize) -> Result<String, String>;

const CHECKS: [(&str, Check); 5] = [
    ("edt-exact", edt_exact),
    ("min-max", min_max),
    ("upperbound-dominance", dominance),
    ("translation-reparam", translation_reparam),
    ("affine-gradient", affine_gradient),
];

pub fn run(seed: u64, cases: usize) -> CliResult<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check(seed, cases.max(1)) {
            Ok(detail) => println!("ok      {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAILED  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} selftest check(s) failed")));
    }
    Ok(())
}

fn random_binary(rng: &mut impl Rng, w: usize, h: usize, density: f64) -> ContourImage {
    loop {
        let data: Vec<f64> = (0..w * h).map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 }).collect();
        if data.iter().any(|v| *v > 0.0) {
            return ContourImage::new(w, h, data).expect("sized");
        }
    }
}

fn edt_exact(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = rng_stream(seed, 101);
    for k in 0..cases {
        let img = random_binary(&mut rng, 24, 24, [0.01, 0.1, 0.5][k % 3]);
        let fast = edt(&img).map_err(|e| e.to_string())?;
        let slow = edt_bruteforce(&img).map_err(|e| e.to_string())?;
        if fast.squared() != slow.squared() {
            return Err(format!("case {k} differs from brute force"));
        }
    }
    Ok(format!("{cases} images match brute force"))
}

fn min_max(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = rng_stream(seed, 102);
    for k in 0..cases * 10 {
        let n = rng.random_range(1..=64);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let lhs = f.iter().zip(&g).map(|(a, b)| a + b).fold(f64::INFINITY, f64::min);
        let rhs = f.iter().copied().fold(f64::INFINITY, f64::min) + g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lhs <= rhs) {
            return Err(format!("case {k}: {lhs} > {rhs}"));
        }
    }
    Ok(format!("{} vectors", cases * 10))
}

fn dominance(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = rng_stream(seed, 103);
    for k in 0..cases {
        let w = rng.random_range(12..=18);
        let h = rng.random_range(12..=18);
        let s = random_binary(&mut rng, w, h, 0.1);
        let t = random_binary(&mut rng, w, h, 0.1);
        let (ds, dt) = (edt(&s).map_err(|e| e.to_string())?, edt(&t).map_err(|e| e.to_string())?);
        let id = WarpField::identity(w, h);
        for alpha in [0.0, 1e-2, 1.0] {
            let cfg = LossConfig { alpha, window: 2 * w.max(h) + 1, ..Default::default() };
            let ub = chamfer_upperbound(&s, &t, &ds, &dt, &id, &id, &cfg).map_err(|e| e.to_string())?.total;
            let direct = chamfer_shape_direct(&s, &t, alpha).map_err(|e| e.to_string())?;
            if !(ub >= direct) {
                return Err(format!("case {k}, alpha {alpha}: bound {ub} < direct {direct}"));
            }
        }
    }
    Ok(format!("{cases} pairs at three alphas"))
}

fn translation_reparam(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = rng_stream(seed, 104);
    let (w, h) = (40, 40);
    let ring: Vec<(usize, usize)> = (0..360)
        .map(|k| {
            let a = (k as f64).to_radians();
            ((20.0 + 7.0 * a.cos()).round() as usize, (20.0 + 5.0 * a.sin()).round() as usize)
        })
        .collect();
    let s = ContourImage::from_pixels(w, h, &ring);
    let ds = edt(&s).map_err(|e| e.to_string())?;
    for k in 0..cases {
        let pts: Vec<(usize, usize)> = (0..6).map(|_| (rng.random_range(12..28), rng.random_range(12..28))).collect();
        let t = ContourImage::from_pixels(w, h, &pts);
        let a = AffineParams::translation(rng.random_range(-4..=4) as f64, rng.random_range(-4..=4) as f64);
        let inv = affine_inverse(&a).map_err(|e| e.to_string())?;
        let sw = apply_warp(&s, &affine_field(&a, w, h)).map_err(|e| e.to_string())?;
        let tw = apply_warp(&t, &affine_field(&inv, w, h)).map_err(|e| e.to_string())?;
        let dsw = edt(&sw).map_err(|e| e.to_string())?;
        let lhs: f64 = dsw.data().iter().zip(t.data()).map(|(d, v)| d * v).sum();
        let rhs: f64 = ds.data().iter().zip(tw.data()).map(|(d, v)| d * v).sum();
        if lhs != rhs {
            return Err(format!("case {k}: {lhs} != {rhs}"));
        }
    }
    Ok(format!("{cases} translations exact"))
}

fn affine_gradient(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = rng_stream(seed, 105);
    let (w, h) = (24, 24);
    let disk = |cx: f64, cy: f64, r: f64| {
        let pts: Vec<(usize, usize)> = (0..w * h)
            .map(|i| (i % w, i / w))
            .filter(|&(x, y)| ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() <= r)
            .collect();
        ContourImage::from_pixels(w, h, &pts)
    };
    let id = WarpField::identity(w, h);
    let cfg = LossConfig::default();
    let (mut checked, mut worst) = (0, 0.0f64);
    for _ in 0..cases * 4 {
        if checked == cases {
            break;
        }
        // Offset the disks so the point is not near-stationary, where tiny
        // components make relative errors meaningless.
        let (cx, cy) = (rng.random_range(10.0..14.0), rng.random_range(10.0..14.0));
        let (a, d) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(2.0..4.0));
        let s = disk(cx, cy, rng.random_range(3.0..5.0));
        let t = disk(cx + d * a.cos(), cy + d * a.sin(), rng.random_range(3.0..5.0));
        let ctx = PairContext::new(s, t).map_err(|e| e.to_string())?;
        let mut p = AffineParams::identity().to_vec();
        for v in p.iter_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        p[2] += rng.random_range(0.2..0.8);
        p[5] += rng.random_range(0.2..0.8);
        let obj = DirectionalObjective::new(&ctx, &cfg, &Family::Affine, Direction::Forward, &id)
            .map_err(|e| e.to_string())?;
        if !obj.is_smooth_at(&p, FD_STEP).map_err(|e| e.to_string())? {
            continue;
        }
        let a = obj.gradient(&p, GradMode::Analytic).map_err(|e| e.to_string())?;
        let n = obj.gradient(&p, GradMode::FiniteDifference).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&n) {
            let e = (x - y).abs() / (x.abs() + y.abs()).max(1e-8);
            worst = worst.max(e);
            if e >= 1e-4 {
                return Err(format!("point {checked}: analytic {x} vs numeric {y}"));
            }
        }
        checked += 1;
    }
    if checked == 0 {
        return Err("no smooth test point found".into());
    }
    Ok(format!("{checked} points, worst relative error {worst:.1e}"))
}
