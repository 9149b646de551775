//! Slide tiling, heatmaps and slide-level decisions.

mod source;

pub use source::{open_image, MemorySource, PngSource, SyntheticSlide, TiffSource, TileSource};

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::hvsm::HvsmKernel;
use crate::image::{GrayImage, PixelBuffer};
use crate::projection::{project_score, ProjectionModel};
use crate::scoring::{ScoringParams, Workspace};

pub const DEFAULT_PATCH_SIZE: usize = 1024;
pub const DEFAULT_THRESHOLD: f64 = 1.7688;
pub const DEFAULT_PASS_RATIO: f64 = 0.5;
pub const DEFAULT_Z_CAP: f64 = 8.0;
pub const DEFAULT_CURVE_BINS: usize = 256;

/// Background rule: tissue is darker than `max_mean` and has at least
/// `min_std` of texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueConfig {
    pub max_mean: f64,
    pub min_std: f64,
}

impl Default for TissueConfig {
    fn default() -> Self {
        Self {
            max_mean: 0.92,
            min_std: 0.02,
        }
    }
}

impl TissueConfig {
    fn accepts(&self, mean: f64, std: f64) -> bool {
        mean <= self.max_mean && std >= self.min_std
    }
}

pub fn tissue_test(tile: &GrayImage, cfg: &TissueConfig) -> bool {
    let (mean, std) = stats(tile.data.iter().copied());
    cfg.accepts(mean, std)
}

fn stats<I: Iterator<Item = f64> + Clone>(values: I) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// A dedicated pool of `jobs` workers. Runs sequentially when the crate
    /// is built without the `parallel` feature.
    Parallel { jobs: usize },
}

impl Execution {
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel { jobs }
        }
    }
}

/// Per-tile scores; `NaN` marks tiles without a score.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub slide_id: String,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub raw: Vec<f64>,
    pub projected: Vec<f64>,
    pub tissue: Vec<bool>,
}

impl HeatmapGrid {
    pub fn new(slide_id: impl Into<String>, rows: usize, cols: usize, patch_size: usize) -> Self {
        let n = rows * cols;
        Self {
            slide_id: slide_id.into(),
            rows,
            cols,
            patch_size,
            raw: vec![f64::NAN; n],
            projected: vec![f64::NAN; n],
            tissue: vec![false; n],
        }
    }

    /// Builds a grid from known projected scores (`None` for background).
    pub fn from_projected(
        slide_id: impl Into<String>,
        rows: usize,
        cols: usize,
        projected: &[Option<f64>],
    ) -> Result<Self> {
        if projected.len() != rows * cols {
            return Err(Error::param("projected", "length must equal rows * cols"));
        }
        let mut g = Self::new(slide_id, rows, cols, DEFAULT_PATCH_SIZE);
        for (i, p) in projected.iter().enumerate() {
            if let Some(v) = p {
                g.tissue[i] = true;
                g.projected[i] = *v;
            }
        }
        Ok(g)
    }

    pub fn projected_at(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.projected[row * self.cols + col];
        (!v.is_nan()).then_some(v)
    }

    pub fn raw_at(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.raw[row * self.cols + col];
        (!v.is_nan()).then_some(v)
    }

    /// Projected scores of scored tissue tiles, row-major.
    pub fn scored(&self) -> Vec<f64> {
        self.projected
            .iter()
            .zip(&self.tissue)
            .filter(|(v, &t)| t && !v.is_nan())
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if self.raw.len() != n || self.projected.len() != n || self.tissue.len() != n {
            return Err(Error::Invariant("grid matrices do not match rows x cols".into()));
        }
        if let Some(i) = (0..n).find(|&i| !self.projected[i].is_nan() && !self.tissue[i]) {
            return Err(Error::Invariant(format!(
                "tile ({}, {}) has a score but no tissue",
                i / self.cols,
                i % self.cols
            )));
        }
        Ok(())
    }

    /// Writes `row, col, tissue, raw_score, projected_score`; missing scores
    /// are empty fields.
    pub fn write_tiles_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "tissue", "raw_score", "projected_score"])?;
        let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                w.write_record([
                    r.to_string(),
                    c.to_string(),
                    self.tissue[i].to_string(),
                    fmt(self.raw[i]),
                    fmt(self.projected[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tiles_csv<R: Read>(input: R, slide_id: &str, patch_size: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize, name: &str| {
                rec.get(i).map(str::trim).ok_or_else(|| Error::Parse {
                    field: name.into(),
                    message: "missing".into(),
                })
            };
            let int = |i: usize, name: &str| -> Result<usize> {
                field(i, name)?.parse().map_err(|_| Error::Parse {
                    field: name.into(),
                    message: format!("not an index: {:?}", rec.get(i).unwrap_or("")),
                })
            };
            let real = |i: usize, name: &str| -> Result<f64> {
                let s = field(i, name)?;
                if s.is_empty() {
                    return Ok(f64::NAN);
                }
                s.parse().map_err(|_| Error::Parse {
                    field: name.into(),
                    message: format!("not a number: {s:?}"),
                })
            };
            let tissue = match field(2, "tissue")? {
                "true" | "1" => true,
                "false" | "0" => false,
                other => {
                    return Err(Error::Parse {
                        field: "tissue".into(),
                        message: format!("expected true or false, got {other:?}"),
                    })
                }
            };
            entries.push((
                int(0, "row")?,
                int(1, "col")?,
                tissue,
                real(3, "raw_score")?,
                real(4, "projected_score")?,
            ));
        }
        let rows = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let cols = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        if rows * cols == 0 || entries.len() != rows * cols {
            return Err(Error::Degenerate(format!(
                "tile list for {slide_id} does not form a complete grid"
            )));
        }
        let mut g = Self::new(slide_id, rows, cols, patch_size);
        for (r, c, t, raw, p) in entries {
            let i = r * cols + c;
            g.tissue[i] = t;
            g.raw[i] = raw;
            g.projected[i] = p;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideDecision {
    pub acceptance_ratio: f64,
    pub threshold: f64,
    pub n_tissue_tiles: usize,
    pub pass: bool,
    /// Set when the slide has no scored tissue tile; the ratio is then 0.
    pub no_tissue: bool,
}

/// Everything needed to turn a tile into a score.
#[derive(Debug, Clone, Copy)]
pub struct SlideScorer<'a> {
    pub kernel: &'a HvsmKernel,
    pub params: &'a ScoringParams,
    pub projection: &'a ProjectionModel,
    pub tissue: TissueConfig,
    pub patch_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct TileResult {
    tissue: bool,
    raw: f64,
    projected: f64,
}

fn score_tile(
    ws: &mut Workspace,
    band: &[f32],
    stride: usize,
    col: usize,
    scorer: &SlideScorer,
) -> Result<TileResult> {
    let p = scorer.patch_size;
    let x0 = col * p;
    let window = (0..p).flat_map(|y| band[y * stride + x0..y * stride + x0 + p].iter());
    let (mean, std) = stats(window.map(|&v| f64::from(v)));
    if !scorer.tissue.accepts(mean, std) {
        return Ok(TileResult {
            tissue: false,
            raw: f64::NAN,
            projected: f64::NAN,
        });
    }
    let score = ws.score_band(band, stride, x0, p, p, scorer.kernel, scorer.params)?;
    Ok(TileResult {
        tissue: true,
        raw: score.raw,
        projected: project_score(scorer.projection, score.raw),
    })
}

/// Scores every full tile of `source`. Bands of one tile row are read in
/// order; tiles within a band are scored according to `execution`.
pub fn tile_and_score<S: TileSource + ?Sized>(
    source: &mut S,
    slide_id: &str,
    scorer: &SlideScorer,
    execution: Execution,
) -> Result<HeatmapGrid> {
    let p = scorer.patch_size;
    if p == 0 {
        return Err(Error::param("patch_size", "must be positive"));
    }
    scorer.params.validate()?;
    scorer.projection.validate()?;
    let (w, h) = (source.width(), source.height());
    let (rows, cols) = (h / p, w / p);
    if rows == 0 || cols == 0 {
        return Err(Error::Degenerate(format!(
            "{w}x{h} image has no full {p}x{p} tile"
        )));
    }
    let mut grid = HeatmapGrid::new(slide_id, rows, cols, p);
    let mut band = Vec::new();
    let mut runner = Runner::new(execution)?;
    for r in 0..rows {
        source.read_band(r * p, p, &mut band)?;
        let results = runner.score_row(&band, w, cols, scorer)?;
        for (c, t) in results.into_iter().enumerate() {
            let i = r * cols + c;
            grid.tissue[i] = t.tissue;
            grid.raw[i] = t.raw;
            grid.projected[i] = t.projected;
        }
    }
    Ok(grid)
}

enum Runner {
    Sequential(Workspace),
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool),
}

#[cfg(feature = "parallel")]
thread_local! {
    static WORKSPACE: std::cell::RefCell<Workspace> = std::cell::RefCell::new(Workspace::new());
}

impl Runner {
    fn new(execution: Execution) -> Result<Self> {
        match execution {
            Execution::Sequential => Ok(Runner::Sequential(Workspace::new())),
            #[cfg(feature = "parallel")]
            Execution::Parallel { jobs } => rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .thread_name(|i| format!("fqpath-tile-{i}"))
                .build()
                .map(Runner::Pool)
                .map_err(|e| Error::Invariant(format!("cannot start worker pool: {e}"))),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel { .. } => Ok(Runner::Sequential(Workspace::new())),
        }
    }

    fn score_row(
        &mut self,
        band: &[f32],
        stride: usize,
        cols: usize,
        scorer: &SlideScorer,
    ) -> Result<Vec<TileResult>> {
        match self {
            Runner::Sequential(ws) => (0..cols)
                .map(|c| score_tile(ws, band, stride, c, scorer))
                .collect(),
            #[cfg(feature = "parallel")]
            Runner::Pool(pool) => {
                use rayon::prelude::*;
                pool.install(|| {
                    (0..cols)
                        .into_par_iter()
                        .map(|c| {
                            WORKSPACE.with(|ws| {
                                score_tile(&mut ws.borrow_mut(), band, stride, c, scorer)
                            })
                        })
                        .collect()
                })
            }
        }
    }
}

/// Fraction of `scores` at or below `threshold`; 0 for an empty set.
pub fn acceptance_ratio(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s <= threshold).count() as f64 / scores.len() as f64
}

pub fn decide(grid: &HeatmapGrid, threshold: f64, pass_ratio: f64) -> SlideDecision {
    let scores = grid.scored();
    let ratio = acceptance_ratio(&scores, threshold);
    SlideDecision {
        acceptance_ratio: ratio,
        threshold,
        n_tissue_tiles: scores.len(),
        pass: !scores.is_empty() && ratio >= pass_ratio,
        no_tissue: scores.is_empty(),
    }
}

/// Empirical CDF of the projected tissue scores on `bins` evenly spaced
/// points from 0 to the largest score.
pub fn cumsum_curve(grid: &HeatmapGrid, bins: usize) -> Result<Vec<(f64, f64)>> {
    if bins < 2 {
        return Err(Error::param("bins", "need at least two bins"));
    }
    let mut scores = grid.scored();
    if scores.is_empty() {
        return Err(Error::Degenerate(format!(
            "slide {} has no scored tiles",
            grid.slide_id
        )));
    }
    scores.sort_by(f64::total_cmp);
    let max = scores[scores.len() - 1];
    let n = scores.len() as f64;
    Ok((0..bins)
        .map(|k| {
            let s = max * k as f64 / (bins - 1) as f64;
            let below = scores.partition_point(|&v| v <= s);
            (s, below as f64 / n)
        })
        .collect())
}

pub fn write_curve_csv<W: Write>(curve: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["score", "cdf"])?;
    for (s, f) in curve {
        w.write_record([s.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const NO_DATA_COLOR: [u8; 3] = [128, 128, 128];
const RAMP: [[u8; 3]; 5] = [
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// Blue (q = 0) through cyan, green and yellow to red (q = 1).
pub fn colormap(q: f64) -> [u8; 3] {
    let t = q.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8)
}

/// One `block × block` RGB square per tile; red is sharp, blue is blurred
/// past `z_cap`, gray has no score.
pub fn render_heatmap(grid: &HeatmapGrid, z_cap: f64, block: usize) -> Result<PixelBuffer> {
    if block == 0 {
        return Err(Error::param("block", "must be positive"));
    }
    if !(z_cap > 0.0) {
        return Err(Error::param("z_cap", "must be positive"));
    }
    let (w, h) = (grid.cols * block, grid.rows * block);
    let mut data = vec![0u8; w * h * 3];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let color = match grid.projected_at(r, c) {
                Some(p) => colormap(1.0 - p / z_cap),
                None => NO_DATA_COLOR,
            };
            for y in r * block..(r + 1) * block {
                for x in c * block..(c + 1) * block {
                    data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    PixelBuffer::new(w, h, 3, data)
}
