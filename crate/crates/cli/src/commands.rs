use std::path::{Path, PathBuf};

use chamfer_align::align::{align, AlignmentResult, StageSpec};
use chamfer_align::edt::{edt, sidecar_path};
use chamfer_align::eval::{evaluate_forward, EvalReport, EvalRow};
use chamfer_align::raster::Raster;
use chamfer_align::simulate::{
    load_mnist_contours, make_pair, synthetic_pair, GtWarpFile, ManifestEntry, PairSpec, SimPair,
};
use chamfer_align::warp::apply_warp;
use chamfer_align::{ContourImage, WarpField};
use rayon::prelude::*;

use crate::config::{data_dir, RunConfig};
use crate::{
    write_atomic, AlignArgs, CliError, CliResult, Command, Common, DtArgs, EvalArgs, OverlayArgs, SimulateArgs,
};

pub const MANIFEST: &str = "manifest.jsonl";
pub const RUN_JSON: &str = "run.json";
pub const METHOD: &str = "Direct optimization";

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(a) => {
            let (cfg, jobs) = resolve_simulate(a)?;
            simulate(&cfg, jobs)
        }
        Command::Align(a) => {
            let (cfg, jobs) = resolve_align(a)?;
            align_cmd(&cfg, jobs)
        }
        Command::Eval(a) => {
            let (cfg, jobs) = resolve_eval(a)?;
            eval_cmd(&cfg, jobs)
        }
        Command::Overlay(a) => overlay_cmd(&resolve_overlay(a)?),
        Command::Dt(a) => dt_cmd(&resolve_dt(a)?),
        Command::Selftest(a) => crate::selftest::run(a.seed, a.cases),
    }
}

fn base_config(common: &Common, command: &str) -> CliResult<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path, command),
        None => Ok(RunConfig::for_command(command)),
    }
}

fn jobs(common: &Common) -> CliResult<usize> {
    match common.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn require(path: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

pub fn resolve_simulate(a: SimulateArgs) -> CliResult<(RunConfig, usize)> {
    let mut cfg = base_config(&a.common, "simulate")?;
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.count, a.count);
    let p = &mut cfg.pair;
    set(&mut p.magnitude, a.magnitude);
    set(&mut p.grid, a.grid);
    set(&mut p.density, a.density);
    set(&mut p.occlusions, a.occlusions);
    set(&mut p.box_size, a.box_size);
    set(&mut p.size, a.size);
    set(&mut p.threshold, a.threshold);
    cfg.pair.seed = cfg.seed;
    if a.mnist.is_some() {
        cfg.mnist = a.mnist;
    }
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    cfg.paths.out.get_or_insert_with(|| data_dir().join("simulated"));
    cfg.validate()?;
    Ok((cfg, jobs(&a.common)?))
}

pub fn resolve_align(a: AlignArgs) -> CliResult<(RunConfig, usize)> {
    let mut cfg = base_config(&a.common, "align")?;
    if a.source.is_some() {
        cfg.paths.source = a.source;
        cfg.paths.target = a.target;
        cfg.paths.manifest = None;
    } else if a.manifest.is_some() {
        cfg.paths.manifest = a.manifest;
        cfg.paths.source = None;
        cfg.paths.target = None;
    }
    if cfg.paths.source.is_some() != cfg.paths.target.is_some() {
        return Err(CliError::Usage("--source and --target go together".into()));
    }
    if cfg.paths.source.is_none() {
        cfg.paths.manifest.get_or_insert_with(|| data_dir().join("simulated").join(MANIFEST));
    }
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    cfg.paths.out.get_or_insert_with(|| data_dir().join("results"));
    let l = &mut cfg.loss;
    set(&mut l.alpha, a.loss.alpha);
    set(&mut l.window, a.loss.window);
    set(&mut l.kind, a.loss.loss);
    set(&mut l.normalization, a.loss.normalization);
    set(&mut l.bending_weight, a.loss.bending_weight);
    set(&mut l.scale_weights, a.loss.scale_weights);
    if let Some(path) = &a.loss.schedule {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read schedule {}: {e}", path.display())))?;
        cfg.schedule = serde_json::from_str::<Vec<StageSpec>>(&text)
            .map_err(|e| CliError::Usage(format!("bad schedule {}: {e}", path.display())))?;
    }
    cfg.validate()?;
    Ok((cfg, jobs(&a.common)?))
}

pub fn resolve_eval(a: EvalArgs) -> CliResult<(RunConfig, usize)> {
    let mut cfg = base_config(&a.common, "eval")?;
    for (slot, flag) in [
        (&mut cfg.paths.manifest, a.manifest),
        (&mut cfg.paths.results, a.results),
        (&mut cfg.paths.out, a.out),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    cfg.paths.manifest.get_or_insert_with(|| data_dir().join("simulated").join(MANIFEST));
    cfg.paths.results.get_or_insert_with(|| data_dir().join("results"));
    cfg.paths.out.get_or_insert_with(|| data_dir().join("eval"));
    set(&mut cfg.eval.z, a.z);
    if a.binarize.is_some() {
        cfg.eval.binarize = a.binarize;
    }
    cfg.validate()?;
    Ok((cfg, jobs(&a.common)?))
}

pub fn resolve_overlay(a: OverlayArgs) -> CliResult<RunConfig> {
    let mut cfg = base_config(&a.common, "overlay")?;
    let p = &mut cfg.paths;
    if a.aligned.is_some() {
        p.aligned = a.aligned;
        p.forward = None;
    } else if a.forward.is_some() {
        p.forward = a.forward;
        p.aligned = None;
    }
    for (slot, flag) in [(&mut p.source, a.source), (&mut p.target, a.target), (&mut p.out, a.out)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    require(&p.source, "source")?;
    require(&p.target, "target")?;
    require(&p.out, "out")?;
    if p.aligned.is_some() == p.forward.is_some() {
        return Err(CliError::Usage("give exactly one of --aligned and --forward".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_dt(a: DtArgs) -> CliResult<RunConfig> {
    let mut cfg = base_config(&a.common, "dt")?;
    if a.input.is_some() {
        cfg.paths.input = a.input;
    }
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    require(&cfg.paths.input, "input")?;
    require(&cfg.paths.out, "out")?;
    cfg.validate()?;
    Ok(cfg)
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))
}

fn json_bytes<T: serde::Serialize + ?Sized>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn load_image(path: &Path) -> CliResult<ContourImage> {
    ContourImage::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn save_image(img: &ContourImage, path: &Path) -> CliResult<()> {
    write_atomic(path, &img.encode_for(path)?)?;
    Ok(())
}

/// Run `work` on every item in the pool, keeping input order. The first
/// failure, in item order, is returned.
fn fan_out<I: Sync, O: Send>(
    jobs: usize,
    items: &[I],
    label: impl Fn(&I) -> String + Sync,
    work: impl Fn(&I) -> CliResult<O> + Sync,
) -> CliResult<Vec<O>> {
    let out: Vec<CliResult<O>> = pool(jobs)?.install(|| items.par_iter().map(&work).collect());
    out.into_iter()
        .zip(items)
        .map(|(r, item)| {
            r.map_err(|e| match e {
                CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", label(item))),
                usage => usage,
            })
        })
        .collect()
}

fn write_run_json(cfg: &RunConfig, path: &Path) -> CliResult<()> {
    write_atomic(path, cfg.to_json().as_bytes())?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    let out = cfg.paths.out.clone().expect("resolved");
    let bases = match &cfg.mnist {
        Some(path) => {
            let b = load_mnist_contours(path)?;
            if b.is_empty() {
                return Err(CliError::Runtime(format!("{} holds no images", path.display())));
            }
            Some(b)
        }
        None => None,
    };
    let seeds: Vec<u64> = (0..cfg.count as u64).map(|k| cfg.seed + k).collect();
    let entries = fan_out(
        jobs,
        &seeds,
        |s| format!("seed {s}"),
        |&seed| {
            let spec = PairSpec { seed, ..cfg.pair.clone() };
            let pair = match &bases {
                Some(b) => make_pair(&b[(seed % b.len() as u64) as usize], &spec)?,
                None => synthetic_pair(&spec)?,
            };
            write_pair(&out, &pair, spec)
        },
    )?;
    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&serde_json::to_string(e).expect("serializes"));
        manifest.push('\n');
    }
    let manifest_path = out.join(MANIFEST);
    write_atomic(&manifest_path, manifest.as_bytes())?;
    write_run_json(cfg, &out.join(RUN_JSON))?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn write_pair(out: &Path, pair: &SimPair, spec: PairSpec) -> CliResult<ManifestEntry> {
    let rel = |name: &str| format!("pairs/{}/{name}", pair.seed);
    let entry = ManifestEntry {
        seed: pair.seed,
        spec,
        source: rel("source.png"),
        target: rel("target.png"),
        clean_source: rel("clean_source.png"),
        gt_warp: rel("gt_warp.json"),
    };
    save_image(&pair.source, &out.join(&entry.source))?;
    save_image(&pair.target, &out.join(&entry.target))?;
    save_image(&pair.clean_source, &out.join(&entry.clean_source))?;
    write_atomic(&out.join(&entry.gt_warp), &json_bytes(&GtWarpFile::of(pair)))?;
    Ok(entry)
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Files written for one aligned pair.
pub const RESULT_FILES: [&str; 4] = ["forward.wfld", "backward.wfld", "trace.json", "aligned.pgm"];

fn write_result(dir: &Path, result: &AlignmentResult<f64>, source: &ContourImage) -> CliResult<()> {
    write_atomic(&dir.join(RESULT_FILES[0]), &result.forward.to_bytes())?;
    write_atomic(&dir.join(RESULT_FILES[1]), &result.backward.to_bytes())?;
    write_atomic(&dir.join(RESULT_FILES[2]), &json_bytes(&result.trace_json()))?;
    save_image(&result.aligned_source(source)?, &dir.join(RESULT_FILES[3]))
}

pub fn align_cmd(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    let out = cfg.paths.out.clone().expect("resolved");
    if let (Some(s), Some(t)) = (&cfg.paths.source, &cfg.paths.target) {
        let source = load_image(s)?;
        let target = load_image(t)?;
        let result = align(&source, &target, &cfg.schedule, &cfg.loss)?;
        write_result(&out, &result, &source)?;
        write_run_json(cfg, &out.join(RUN_JSON))?;
        println!("{}", serde_json::to_string(&result.final_loss).expect("serializes"));
        return Ok(());
    }
    let manifest = cfg.paths.manifest.clone().expect("resolved");
    let entries = read_manifest(&manifest)?;
    let base = manifest_dir(&manifest);
    fan_out(
        jobs,
        &entries,
        |e| format!("seed {}", e.seed),
        |e| {
            let source = load_image(&base.join(&e.source))?;
            let target = load_image(&base.join(&e.target))?;
            let result = align(&source, &target, &cfg.schedule, &cfg.loss)?;
            write_result(&out.join(e.seed.to_string()), &result, &source)
        },
    )?;
    write_run_json(cfg, &out.join(RUN_JSON))?;
    println!("{}", out.display());
    Ok(())
}

fn load_pair(base: &Path, e: &ManifestEntry) -> CliResult<SimPair> {
    let gt_path = base.join(&e.gt_warp);
    let text = std::fs::read_to_string(&gt_path).map_err(|err| CliError::Runtime(format!("{}: {err}", gt_path.display())))?;
    let gt: GtWarpFile = serde_json::from_str(&text)
        .map_err(|err| CliError::Runtime(format!("{}: {err}", gt_path.display())))?;
    let (gt_warp, gt_grid) = gt.into_parts()?;
    Ok(SimPair {
        seed: e.seed,
        source: load_image(&base.join(&e.source))?,
        target: load_image(&base.join(&e.target))?,
        clean_source: load_image(&base.join(&e.clean_source))?,
        gt_warp,
        gt_grid,
    })
}

fn load_field(path: &Path) -> CliResult<WarpField> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    WarpField::from_bytes(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Label for the loss column, from the `run.json` the results came with.
fn loss_label(results: &Path) -> String {
    let Ok(text) = std::fs::read_to_string(results.join(RUN_JSON)) else {
        return "unknown".into();
    };
    match serde_json::from_str::<RunConfig>(&text) {
        Ok(r) => {
            let kind = serde_json::to_value(r.loss.kind).ok().and_then(|v| v.as_str().map(String::from));
            format!("{} (alpha={})", kind.unwrap_or_default(), r.loss.alpha)
        }
        Err(_) => "unknown".into(),
    }
}

pub fn eval_cmd(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    let manifest = cfg.paths.manifest.clone().expect("resolved");
    let results = cfg.paths.results.clone().expect("resolved");
    let out = cfg.paths.out.clone().expect("resolved");
    let entries = read_manifest(&manifest)?;
    let base = manifest_dir(&manifest);
    let rows: Vec<EvalRow> = fan_out(
        jobs,
        &entries,
        |e| format!("seed {}", e.seed),
        |e| {
            let pair = load_pair(&base, e)?;
            let forward = load_field(&results.join(e.seed.to_string()).join(RESULT_FILES[0]))?;
            let row = evaluate_forward(&forward, &pair, &cfg.eval)?;
            write_atomic(&out.join("pairs").join(format!("{}.json", e.seed)), &json_bytes(&row))?;
            Ok(row)
        },
    )?;
    let report = EvalReport::new(METHOD, loss_label(&results), cfg.eval.z, rows);
    let table = report.to_table();
    write_atomic(&out.join("report.json"), &json_bytes(&report))?;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    write_run_json(cfg, &out.join(RUN_JSON))?;
    print!("{table}");
    Ok(())
}

/// Config of a single-file command goes next to the file as `<out>.run.json`.
fn file_run_json(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".run.json");
    p.into()
}

pub fn overlay_cmd(cfg: &RunConfig) -> CliResult<()> {
    let p = &cfg.paths;
    let out = p.out.clone().expect("resolved");
    let source = load_image(p.source.as_deref().expect("resolved"))?;
    let target = load_image(p.target.as_deref().expect("resolved"))?;
    let aligned = match (&p.aligned, &p.forward) {
        (Some(a), _) => load_image(a)?,
        (None, Some(f)) => apply_warp(&source, &load_field(f)?)?,
        (None, None) => unreachable!("checked when resolving"),
    };
    crate::emit_overlay(&source, &target, &aligned, &out)?;
    write_run_json(cfg, &file_run_json(&out))?;
    println!("{}", out.display());
    Ok(())
}

pub fn dt_cmd(cfg: &RunConfig) -> CliResult<()> {
    let input = cfg.paths.input.clone().expect("resolved");
    let out = cfg.paths.out.clone().expect("resolved");
    let img = load_image(&input)?;
    let field = edt(&img)?;
    let (bytes, side, scale) = field.encode_dump(&out)?;
    write_atomic(&out, &bytes)?;
    write_atomic(&sidecar_path(&out), side.as_bytes())?;
    write_run_json(cfg, &file_run_json(&out))?;
    let max = field.data().iter().fold(0.0f64, |m, v| m.max(*v));
    println!("{} {}x{} max {max} scale {scale}", out.display(), img.width(), img.height());
    Ok(())
}
