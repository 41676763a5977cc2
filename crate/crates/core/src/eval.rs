//! Alignment metrics on clean contours: the asymmetric Chamfer score and the
//! percentage of source mass within `Z` pixels of the target.

use serde::{Deserialize, Serialize};

use crate::align::AlignmentResult;
use crate::edt::{edt, DistanceField};
use crate::error::{Error, Result};
use crate::num::{ordered_sum, Real};
use crate::raster::{binarize, ContourImage, Raster};
use crate::simulate::SimPair;
use crate::warp::{apply_warp, WarpField};

pub const DEFAULT_Z: f64 = 5.0;

fn source_mass<T: Real>(s: &ContourImage<T>) -> Result<T> {
    let n = ordered_sum(s.data().iter().copied());
    if n <= T::zero() {
        return Err(Error::EmptyShape("aligned source has no mass".into()));
    }
    Ok(n)
}

fn check<T: Real>(s: &ContourImage<T>, t: &ContourImage<T>) -> Result<()> {
    if s.dims() != t.dims() {
        return Err(Error::mismatch(t.dims(), s.dims()));
    }
    Ok(())
}

fn score_with<T: Real>(s: &ContourImage<T>, dt: &DistanceField<T>) -> Result<f64> {
    let n = source_mass(s)?;
    let sum = ordered_sum(s.data().iter().zip(dt.data()).map(|(a, d)| *a * *d));
    Ok((sum / n).as_f64())
}

fn pct_with<T: Real>(s: &ContourImage<T>, dt: &DistanceField<T>, z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::InvalidConfig(format!("Z must be > 0, got {z}")));
    }
    let n = source_mass(s)?;
    let z = T::lit(z);
    let within = ordered_sum(
        s.data().iter().zip(dt.data()).map(|(a, d)| if *d <= z { *a } else { T::zero() }),
    );
    Ok((T::lit(100.0) * within / n).as_f64())
}

/// `(1/N) sum S_aligned * edt(T_clean)` with `N` the source intensity mass.
pub fn asym_chamfer<T: Real>(s_aligned: &ContourImage<T>, t_clean: &ContourImage<T>) -> Result<f64> {
    check(s_aligned, t_clean)?;
    source_mass(s_aligned)?;
    score_with(s_aligned, &edt(t_clean)?)
}

/// Intensity-weighted percentage of source mass within `z` px of the target.
pub fn pct_within<T: Real>(s_aligned: &ContourImage<T>, t_clean: &ContourImage<T>, z: f64) -> Result<f64> {
    check(s_aligned, t_clean)?;
    source_mass(s_aligned)?;
    pct_with(s_aligned, &edt(t_clean)?, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub score: f64,
    pub pct_within: f64,
}

pub fn metrics<T: Real>(s_aligned: &ContourImage<T>, t_clean: &ContourImage<T>, z: f64) -> Result<Metrics> {
    check(s_aligned, t_clean)?;
    source_mass(s_aligned)?;
    let dt = edt(t_clean)?;
    Ok(Metrics { score: score_with(s_aligned, &dt)?, pct_within: pct_with(s_aligned, &dt, z)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub z: f64,
    /// Threshold the warped clean source before scoring (strict pixel counting).
    pub binarize: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { z: DEFAULT_Z, binarize: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub initial: Metrics,
    #[serde(rename = "final")]
    pub final_: Metrics,
}

/// Score a single alignment: initial metrics on `(clean_source, target)`,
/// final ones after warping the clean source by the forward field.
pub fn evaluate(result: &AlignmentResult<f64>, pair: &SimPair, opts: &EvalOptions) -> Result<EvalRow> {
    evaluate_forward(&result.forward, pair, opts)
}

/// [`evaluate`] given only the composed forward field.
pub fn evaluate_forward(forward: &WarpField<f64>, pair: &SimPair, opts: &EvalOptions) -> Result<EvalRow> {
    let initial = metrics(&pair.clean_source, &pair.target, opts.z)?;
    let mut aligned = apply_warp(&pair.clean_source, forward)?;
    if let Some(th) = opts.binarize {
        aligned = binarize(&aligned.to_grid(), th)?;
    }
    let final_ = metrics(&aligned, &pair.target, opts.z)?;
    Ok(EvalRow { id: pair.seed.to_string(), initial, final_ })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, median: f64::NAN };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
        Self { mean: ordered_sum(values.iter().copied()) / k as f64, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub initial_score: Summary,
    pub final_score: Summary,
    pub initial_pct_within: Summary,
    pub final_pct_within: Summary,
    /// Pairs whose final score is strictly below the initial one.
    pub improved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub loss: String,
    pub z: f64,
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, loss: impl Into<String>, z: f64, rows: Vec<EvalRow>) -> Self {
        let col = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let aggregate = Aggregate {
            initial_score: Summary::of(&col(|r| r.initial.score)),
            final_score: Summary::of(&col(|r| r.final_.score)),
            initial_pct_within: Summary::of(&col(|r| r.initial.pct_within)),
            final_pct_within: Summary::of(&col(|r| r.final_.pct_within)),
            improved: rows.iter().filter(|r| r.final_.score < r.initial.score).count(),
        };
        Self { method: method.into(), loss: loss.into(), z, rows, aggregate }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// Two-row text table: the unaligned pairs, then this method; mean score
    /// with the percentage within `Z` in brackets.
    pub fn to_table(&self) -> String {
        let a = &self.aggregate;
        let cell = |s: &Summary, p: &Summary| format!("{:.2} ({:.0}%)", s.mean, p.mean);
        let rows = [
            ("Given test pairs".to_string(), "-".to_string(), cell(&a.initial_score, &a.initial_pct_within)),
            (self.method.clone(), self.loss.clone(), cell(&a.final_score, &a.final_pct_within)),
        ];
        let header = ("Method", "Loss", format!("Score (% within Z={})", self.z));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap().max(header.0.len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap().max(header.1.len());
        let mut out = format!("{:<w0$}  {:<w1$}  {}\n", header.0, header.1, header.2);
        for (m, l, c) in rows {
            out.push_str(&format!("{m:<w0$}  {l:<w1$}  {c}\n"));
        }
        out.push_str(&format!(
            "pairs: {}  median score {:.2} -> {:.2}  improved {}/{}\n",
            self.rows.len(),
            a.initial_score.median,
            a.final_score.median,
            a.improved,
            self.rows.len()
        ));
        out
    }
}
