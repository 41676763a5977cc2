use chamfer_align::align::{align, default_schedule, StageSpec};
use chamfer_align::edt::edt;
use chamfer_align::eval::evaluate;
use chamfer_align::loss::LossConfig;
use chamfer_align::raster::{self, Raster};
use chamfer_align::simulate::{synthetic_pair, PairSpec, DEFAULT_MAGNITUDE};
use chamfer_align::warp::apply_warp;
use chamfer_align::{ContourImage, WarpField};

fn short_schedule() -> Vec<StageSpec> {
    vec![StageSpec::affine(2), StageSpec::tps(1, 3)]
}

fn cfg_for(schedule: &[StageSpec]) -> LossConfig {
    LossConfig { scale_weights: vec![1.0; schedule.len()], ..Default::default() }
}

#[test]
fn clean_pair_gets_closer() {
    let pair = synthetic_pair(&PairSpec { size: 64, ..PairSpec::clean(3, DEFAULT_MAGNITUDE / 2.0) }).unwrap();
    let schedule = short_schedule();
    let result = align(&pair.source, &pair.target, &schedule, &cfg_for(&schedule)).unwrap();
    let row = evaluate(&result, &pair, &Default::default()).unwrap();
    assert!(row.final_.score < row.initial.score, "{} -> {}", row.initial.score, row.final_.score);
    assert_eq!(result.stages.len(), 2);
    assert!(result.forward.is_finite() && result.backward.is_finite());
}

#[test]
fn f32_and_f64_agree_on_the_loss_at_identity() {
    let pair = synthetic_pair(&PairSpec { size: 64, ..PairSpec::clean(5, DEFAULT_MAGNITUDE / 2.0) }).unwrap();
    let schedule = vec![StageSpec::affine(1)];
    let cfg = LossConfig { scale_weights: vec![1.0], ..Default::default() };
    let r64 = align(&pair.source, &pair.target, &schedule, &cfg).unwrap();
    let (s32, t32): (raster::ContourImage<f32>, raster::ContourImage<f32>) = (pair.source.cast(), pair.target.cast());
    let r32 = align(&s32, &t32, &schedule, &cfg).unwrap();
    let (a, b) = (r64.stages[0].initial_loss, r32.stages[0].initial_loss);
    assert!((a - b).abs() <= 1e-4 * a.abs(), "{a} vs {b}");
}

#[test]
fn warp_files_round_trip_bit_exact() {
    let pair = synthetic_pair(&PairSpec::default()).unwrap();
    let field = pair.gt_field().unwrap();
    let back = WarpField::from_bytes(&field.to_bytes()).unwrap();
    assert_eq!(back.coords(), field.coords());
}

#[test]
fn ground_truth_field_maps_the_target_onto_the_clean_source() {
    let spec = PairSpec::clean(11, DEFAULT_MAGNITUDE);
    let pair = synthetic_pair(&spec).unwrap();
    let warped = apply_warp(&pair.target.to_grid(), &pair.gt_field().unwrap()).unwrap();
    assert_eq!(raster::binarize(&warped, spec.threshold).unwrap(), pair.clean_source);
    assert!(pair.initial_misalignment().unwrap() > 2.0);
}

#[test]
fn default_schedule_runs_on_a_128_canvas_only_when_it_fits() {
    let schedule = default_schedule();
    let small = ContourImage::from_pixels(32, 32, &[(4, 4), (20, 20)]);
    assert!(align(&small, &small, &schedule, &LossConfig::default()).is_err());
    let d = edt(&small).unwrap();
    assert_eq!(d.at(4, 4), 0.0);
}
