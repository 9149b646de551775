use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use fqpath::eval::{
    correlation_report, make_blur_ladder, threshold_grid, threshold_sweep, write_ladder, BlurModel,
    LadderConfig, PairedSamples,
};
use fqpath::hvsm::{load_kernel, save_kernel, synthesize_kernel, HvsmKernel, KernelDesign};
use fqpath::image::encode_png;
use fqpath::optics::PsfModel;
use fqpath::projection::{
    fit_projection, load_projection, project_score, save_projection, ProjectionModel,
    TrainingProfiles,
};
use fqpath::scoring::{score_patch, ScoringParams, Workspace};
use fqpath::wsi::{
    cumsum_curve, decide, open_image, render_heatmap, tile_and_score, write_curve_csv, Execution,
    HeatmapGrid, SlideScorer, TissueConfig, DEFAULT_CURVE_BINS, DEFAULT_PASS_RATIO,
    DEFAULT_PATCH_SIZE, DEFAULT_THRESHOLD, DEFAULT_Z_CAP,
};
use fqpath::write_atomic;
use serde_json::json;

use crate::config::RunConfig;
use crate::{
    BenchArgs, Cli, Command, EvalArgs, FitProjectionArgs, HeatmapArgs, MakeLadderArgs, OpticsArgs,
    ScoreArgs, ScoringArgs, SweepArgs, SynthKernelArgs,
};

pub enum Outcome {
    Done,
    GateFailed,
}

/// A bad flag or configuration value (exit status 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(path) => {
            require_file(path)?;
            RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?
        }
        None => RunConfig::default(),
    };
    match cli.command {
        Command::SynthKernel(a) => synth_kernel(a, &cfg),
        Command::Score(a) => score(a, &cfg),
        Command::Heatmap(a) => heatmap(a, &cfg),
        Command::FitProjection(a) => fit(a),
        Command::Eval(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::MakeLadder(a) => make_ladder(a, &cfg),
        Command::Bench(a) => bench(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{} is not a readable file", path.display());
    }
    Ok(())
}

fn require_output(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(usage(format!("--{name} must be positive, got {v}")));
    }
    Ok(v)
}

fn psf_model(a: &OpticsArgs, cfg: &RunConfig) -> Result<PsfModel> {
    let d = PsfModel::default();
    PsfModel::new(
        a.na.or(cfg.optics.na).unwrap_or(d.numerical_aperture),
        a.refractive_index.or(cfg.optics.refractive_index).unwrap_or(d.refractive_index),
        a.wavelength_m.or(cfg.optics.wavelength_m).unwrap_or(d.wavelength),
    )
    .map_err(|e| usage(e.to_string()))
}

fn pixel_pitch(a: &OpticsArgs, cfg: &RunConfig) -> Result<f64> {
    let p = a.pixel_pitch_m.or(cfg.optics.pixel_pitch_m).unwrap_or(KernelDesign::default().pixel_pitch);
    positive("pixel-pitch-m", p)
}

fn synth_kernel(a: SynthKernelArgs, cfg: &RunConfig) -> Result<Outcome> {
    require_output(&a.out)?;
    let model = psf_model(&a.optics, cfg)?;
    let d = KernelDesign::default();
    let design = KernelDesign {
        z_star: a.z_star.or(cfg.design.z_star).unwrap_or(d.z_star),
        order_count: a.orders.or(cfg.design.order_count).unwrap_or(d.order_count),
        cutoff: a.cutoff.or(cfg.design.cutoff).unwrap_or(d.cutoff),
        half_length: a.half_length.or(cfg.design.half_length).unwrap_or(d.half_length),
        pixel_pitch: pixel_pitch(&a.optics, cfg)?,
        ..d
    };
    let kernel = synthesize_kernel(&model, &design)?;
    save_kernel(&kernel, &a.out)?;
    eprintln!(
        "kernel: {} taps, band limit {:.4}, fit residual {:.4}",
        kernel.len(),
        kernel.fit_band_limit,
        kernel.fit_residual
    );
    Ok(Outcome::Done)
}

fn kernel_path(a: &ScoringArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let path = a
        .kernel
        .clone()
        .or_else(|| cfg.kernel.clone())
        .ok_or_else(|| usage("--kernel is required"))?;
    require_file(&path)?;
    Ok(path)
}

fn scoring_params(a: &ScoringArgs, cfg: &RunConfig) -> Result<ScoringParams> {
    let d = ScoringParams::default();
    let p = ScoringParams {
        moment_order: a.moment_order.or(cfg.scoring.moment_order).unwrap_or(d.moment_order),
        percentile: a.percentile.or(cfg.scoring.percentile).unwrap_or(d.percentile),
        ..d
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
                    matches!(ext.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            require_file(p)?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(usage("no input images found"));
    }
    Ok(out)
}

fn score(a: ScoreArgs, cfg: &RunConfig) -> Result<Outcome> {
    let inputs = expand_inputs(&a.inputs)?;
    let kpath = kernel_path(&a.scoring, cfg)?;
    let ppath = a.projection.clone().or_else(|| cfg.projection.clone());
    if let Some(p) = &ppath {
        require_file(p)?;
    }
    if let Some(out) = &a.out {
        require_output(out)?;
    }
    let params = scoring_params(&a.scoring, cfg)?;
    let kernel = load_kernel(&kpath)?;
    let projection = ppath.as_deref().map(load_projection).transpose()?;

    let mut ws = Workspace::new();
    let mut band = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "raw_score", "projected_score", "n_retained", "sigma95", "degenerate_flag"])?;
    for path in &inputs {
        let mut src = open_image(path)?;
        let (width, height) = (src.width(), src.height());
        src.read_band(0, height, &mut band)?;
        let s = ws
            .score_band(&band, width, 0, width, height, &kernel, &params)
            .with_context(|| format!("cannot score {}", path.display()))?;
        let projected = projection
            .as_ref()
            .map(|m| project_score(m, s.raw).to_string())
            .unwrap_or_default();
        w.write_record([
            path.display().to_string(),
            s.raw.to_string(),
            projected,
            s.n_retained.to_string(),
            s.sigma95.to_string(),
            u8::from(s.degenerate).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?;
    emit(a.out.as_deref(), &bytes)?;
    Ok(Outcome::Done)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs, cfg: &RunConfig) -> Result<Outcome> {
    require_file(&a.image)?;
    let kpath = kernel_path(&a.scoring, cfg)?;
    let ppath = a
        .projection
        .clone()
        .or_else(|| cfg.projection.clone())
        .ok_or_else(|| usage("--projection is required"))?;
    require_file(&ppath)?;
    let out_png = a.out_png.clone().or_else(|| cfg.output.png.clone());
    let out_csv = a.out_csv.clone().or_else(|| cfg.output.tiles.clone());
    let out_curve = a.out_curve.clone().or_else(|| cfg.output.curve.clone());
    for p in [&out_png, &out_csv, &out_curve].into_iter().flatten() {
        require_output(p)?;
    }
    let patch = a.patch.or(cfg.patch).unwrap_or(DEFAULT_PATCH_SIZE);
    if patch < fqpath::scoring::MIN_PATCH_SIDE {
        return Err(usage(format!(
            "--patch must be at least {}",
            fqpath::scoring::MIN_PATCH_SIDE
        )));
    }
    let threshold = a.threshold.or(cfg.threshold).unwrap_or(DEFAULT_THRESHOLD);
    if !threshold.is_finite() {
        return Err(usage("--threshold must be finite"));
    }
    let pass_ratio = a.pass_ratio.or(cfg.pass_ratio).unwrap_or(DEFAULT_PASS_RATIO);
    if !(0.0..=1.0).contains(&pass_ratio) {
        return Err(usage("--pass-ratio must lie in [0, 1]"));
    }
    let z_cap = positive("z-cap", a.z_cap.or(cfg.z_cap).unwrap_or(DEFAULT_Z_CAP))?;
    let block = a.block.or(cfg.block).unwrap_or(16);
    if block == 0 {
        return Err(usage("--block must be positive"));
    }
    let jobs = a.jobs.or(cfg.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let dt = TissueConfig::default();
    let tissue = TissueConfig {
        max_mean: a.max_mean.or(cfg.tissue.max_mean).unwrap_or(dt.max_mean),
        min_std: a.min_std.or(cfg.tissue.min_std).unwrap_or(dt.min_std),
    };
    let params = scoring_params(&a.scoring, cfg)?;
    let kernel = load_kernel(&kpath)?;
    let projection = load_projection(&ppath)?;

    let slide_id = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let scorer = SlideScorer {
        kernel: &kernel,
        params: &params,
        projection: &projection,
        tissue,
        patch_size: patch,
    };
    let mut source = open_image(&a.image)?;
    let grid = tile_and_score(source.as_mut(), &slide_id, &scorer, Execution::from_jobs(jobs))?;
    let decision = decide(&grid, threshold, pass_ratio);

    // Everything is computed before the first file is written.
    let png = out_png
        .as_ref()
        .map(|_| render_heatmap(&grid, z_cap, block).and_then(|img| encode_png(&img)))
        .transpose()?;
    let tiles = out_csv
        .as_ref()
        .map(|_| {
            let mut buf = Vec::new();
            grid.write_tiles_csv(&mut buf).map(|_| buf)
        })
        .transpose()?;
    let curve = match &out_curve {
        Some(_) if !decision.no_tissue => {
            let mut buf = Vec::new();
            write_curve_csv(&cumsum_curve(&grid, DEFAULT_CURVE_BINS)?, &mut buf)?;
            Some(buf)
        }
        Some(_) => Some(b"score,cdf\n".to_vec()),
        None => None,
    };
    for (path, bytes) in [(&out_png, png), (&out_csv, tiles), (&out_curve, curve)] {
        if let (Some(path), Some(bytes)) = (path, bytes) {
            write_atomic(path, &bytes)?;
        }
    }
    let report = json!({
        "slide_id": slide_id,
        "rows": grid.rows,
        "cols": grid.cols,
        "n_tissue_tiles": decision.n_tissue_tiles,
        "acceptance_ratio": decision.acceptance_ratio,
        "threshold": decision.threshold,
        "pass": decision.pass,
        "no_tissue": decision.no_tissue,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if a.gate && !decision.pass {
        return Ok(Outcome::GateFailed);
    }
    Ok(Outcome::Done)
}

fn parse_window(s: &str) -> Result<(i64, i64)> {
    let err = || usage(format!("window {s:?} is not lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(err)?;
    let lo = lo.trim().parse().map_err(|_| err())?;
    let hi = hi.trim().parse().map_err(|_| err())?;
    if lo >= hi {
        return Err(err());
    }
    Ok((lo, hi))
}

fn fit(a: FitProjectionArgs) -> Result<Outcome> {
    require_file(&a.profiles)?;
    require_output(&a.out)?;
    let window = parse_window(&a.window)?;
    let file = std::fs::File::open(&a.profiles)
        .with_context(|| format!("cannot open {}", a.profiles.display()))?;
    let profiles = TrainingProfiles::read_csv(file)?;
    let model: ProjectionModel = fit_projection(&profiles, window)?;
    save_projection(&model, &a.out)?;
    eprintln!(
        "projection: a* = {:.6}, b* = {:.6}, c* = {:.6}, ceiling {:.6}",
        model.a_star, model.b_star, model.c_star, model.score_ceiling
    );
    Ok(Outcome::Done)
}

fn read_table(path: &Path, key: &str, value: &str) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| anyhow!("{}: missing column {name}", path.display()))
    };
    let (k, v) = (col(key)?, col(value)?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        rows.push((
            rec.get(k).unwrap_or("").trim().to_string(),
            rec.get(v).unwrap_or("").trim().to_string(),
        ));
    }
    Ok(rows)
}

fn parse_real(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| anyhow!("{what}: not a finite number: {s:?}"))
}

fn file_name(p: &str) -> &str {
    Path::new(p).file_name().and_then(|n| n.to_str()).unwrap_or(p)
}

fn evaluate(a: EvalArgs) -> Result<Outcome> {
    require_file(&a.pred)?;
    require_file(&a.truth)?;
    if let Some(out) = &a.out {
        require_output(out)?;
    }
    let truth = read_table(&a.truth, "path", "z")?;
    let mut by_path: HashMap<&str, f64> = HashMap::new();
    let mut by_name: HashMap<&str, Option<f64>> = HashMap::new();
    for (p, z) in &truth {
        let z = parse_real(z, "z")?;
        let z = if a.signed { z } else { z.abs() };
        by_path.insert(p, z);
        by_name
            .entry(file_name(p))
            .and_modify(|e| *e = None)
            .or_insert(Some(z));
    }
    let (mut pred, mut truths) = (Vec::new(), Vec::new());
    for (p, v) in read_table(&a.pred, "path", &a.column)? {
        // Exact path first, then an unambiguous file name.
        let z = by_path
            .get(p.as_str())
            .copied()
            .or_else(|| by_name.get(file_name(&p)).copied().flatten())
            .ok_or_else(|| anyhow!("no label for {p}"))?;
        pred.push(parse_real(&v, &a.column)?);
        truths.push(z);
    }
    let samples = PairedSamples::new(pred, truths)?;
    let r = correlation_report(&samples, a.logistic)?;
    let report = json!({
        "plcc": r.plcc,
        "srcc": r.srcc,
        "krcc": r.krcc,
        "rmse": r.rmse,
        "n": r.n,
        "logistic_fitted": r.logistic_fitted,
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(a.out.as_deref(), text.as_bytes())?;
    Ok(Outcome::Done)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let err = || usage(format!("grid {s:?} is not lo:hi:step"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| err()))
        .collect::<Result<_>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(err());
    };
    threshold_grid(lo, hi, step).map_err(|e| usage(e.to_string()))
}

fn sweep(a: SweepArgs) -> Result<Outcome> {
    if !a.slides.is_dir() {
        bail!("{} is not a directory", a.slides.display());
    }
    require_file(&a.subjective)?;
    if let Some(out) = &a.out_curve {
        require_output(out)?;
    }
    let grid = parse_grid(&a.grid)?;
    let (mut scores, mut subjective) = (Vec::new(), Vec::new());
    for (id, ratio) in read_table(&a.subjective, "slide_id", "acceptance_ratio")? {
        let path = a.slides.join(format!("{id}.csv"));
        let file = std::fs::File::open(&path)
            .with_context(|| format!("no tile scores for slide {id} at {}", path.display()))?;
        let g = HeatmapGrid::read_tiles_csv(file, &id, DEFAULT_PATCH_SIZE)
            .with_context(|| format!("reading {}", path.display()))?;
        scores.push(g.scored());
        subjective.push(parse_real(&ratio, "acceptance_ratio")?);
    }
    let result = threshold_sweep(&scores, &subjective, &grid)?;
    if let Some(out) = &a.out_curve {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold", "plcc"])?;
        for (t, r) in &result.curve {
            w.write_record([t.to_string(), r.map(|v| v.to_string()).unwrap_or_default()])?;
        }
        write_atomic(out, &w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?)?;
    }
    let report = json!({
        "best_threshold": result.best_threshold,
        "best_plcc": result.best_plcc,
        "n_slides": scores.len(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Done)
}

fn parse_levels(s: &str) -> Result<Vec<f64>> {
    let err = || usage(format!("levels {s:?} are not a..b or a comma list"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: i64 = lo.trim().parse().map_err(|_| err())?;
        let hi: i64 = hi.trim().parse().map_err(|_| err())?;
        if lo > hi {
            return Err(err());
        }
        return Ok((lo..=hi).map(|v| v as f64).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(err))
        .collect()
}

fn make_ladder(a: MakeLadderArgs, cfg: &RunConfig) -> Result<Outcome> {
    let levels = parse_levels(&a.levels)?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let blur = match a.blur.as_str() {
        "psf" => BlurModel::Psf {
            model: psf_model(&a.optics, cfg)?,
            phase_per_level: 1.0,
            pixel_pitch: pixel_pitch(&a.optics, cfg)?,
        },
        "gaussian" => BlurModel::Gaussian {
            sigma_per_level: positive("sigma-per-level", a.sigma_per_level)?,
        },
        other => return Err(usage(format!("unknown blur model {other:?}; use psf or gaussian"))),
    };
    let config = LadderConfig { size: a.size, blur };
    let patches = make_blur_ladder(a.seed, a.count, &levels, &config)?;
    write_ladder(&a.out, &patches)?;
    eprintln!("wrote {} patches to {}", patches.len(), a.out.display());
    Ok(Outcome::Done)
}

const BENCH_SIZES: [usize; 6] = [64, 128, 256, 512, 1024, 2048];

fn bench(a: BenchArgs) -> Result<Outcome> {
    if !BENCH_SIZES.contains(&a.size) {
        return Err(usage(format!("--size must be one of {BENCH_SIZES:?}")));
    }
    if a.iters == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    let kernel: HvsmKernel = match &a.kernel {
        Some(p) => {
            require_file(p)?;
            load_kernel(p)?
        }
        None => synthesize_kernel(&PsfModel::default(), &KernelDesign::default())?,
    };
    let params = ScoringParams::default();
    let config = LadderConfig {
        size: a.size,
        blur: BlurModel::Gaussian { sigma_per_level: 1.0 },
    };
    let textures = make_blur_ladder(a.seed, a.iters, &[0.0], &config)?;
    let mut samples = Vec::with_capacity(a.iters);
    for t in &textures {
        let start = Instant::now();
        let s = score_patch(&t.image, &kernel, &params)?;
        samples.push(start.elapsed().as_secs_f64());
        std::hint::black_box(s);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let report = json!({
        "size": a.size,
        "iters": a.iters,
        "mean_s": mean,
        "min_s": min,
        "ns_per_pixel": mean * 1e9 / (a.size * a.size) as f64,
        "samples_s": samples,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Done)
}
