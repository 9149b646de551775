//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use fqpath::eval::{
    krcc, make_blur_ladder, plcc, srcc, threshold_grid, threshold_sweep, BlurModel, LadderConfig,
    PairedSamples,
};
use fqpath::filters::{
    design_with_report, ideal_response, DesignMethod, DerivativeFilter, DEFAULT_GRID_POINTS,
    DEFAULT_HALF_LENGTH,
};
use fqpath::hvsm::{fit_coefficients, invert_spectrum, synthesize_kernel, HvsmKernel, KernelDesign};
use fqpath::optics::{psf_spectrum, psf_value, uniform_frequencies, PsfModel, SampledSpectrum};
use fqpath::projection::{fit_projection, project_score, ProjectionModel, TrainingProfiles};
use fqpath::scoring::{score_gray, score_patch, Retention, ScoringParams};
use fqpath::wsi::{
    acceptance_ratio, decide, tile_and_score, Execution, HeatmapGrid, SlideScorer, SyntheticSlide,
    TissueConfig, DEFAULT_PASS_RATIO, DEFAULT_THRESHOLD,
};
use rand::distr::StandardUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

const MB: f64 = 1024.0 * 1024.0;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, ok: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id);
        }
    }
}

fn kernel() -> HvsmKernel {
    synthesize_kernel(&PsfModel::default(), &KernelDesign::default()).unwrap()
}

fn j1_series(x: f64) -> f64 {
    let h = 0.5 * x;
    let mut term = h;
    let mut sum = term;
    for k in 1..80 {
        let k = k as f64;
        term *= -h * h / (k * (k + 1.0));
        sum += term;
    }
    sum
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo) > 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == flo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn psf_analytics(r: &mut Report) {
    let start = Instant::now();
    let m = PsfModel::default();
    let s = m.lateral_scale();
    let mut sym = 0.0f64;
    for i in 0..40 {
        let rad = i as f64 * 0.31 / s;
        for z in [0.0, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0] {
            let v = psf_value(&m, rad, z);
            sym = sym
                .max((psf_value(&m, -rad, z) - v).abs())
                .max((psf_value(&m, rad, -z) - v).abs());
        }
    }
    let origin = psf_value(&m, 0.0, 0.0);
    let root = bisect(j1_series, 3.0, 4.5);
    let f = |v: f64| psf_value(&m, v / s, 0.0);
    let (mut a, mut b) = (3.0, 4.6);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let zero = 0.5 * (a + b);
    let secs = start.elapsed().as_secs_f64();
    let ok = sym <= 1e-12
        && (origin - 1.0).abs() <= 1e-12
        && (zero - root).abs() <= 1e-4
        && (zero - 3.8317).abs() <= 1e-4
        && secs < 5.0;
    r.line(
        1,
        ok,
        format!(
            "symmetry {sym:.1e} (<= 1e-12), I(0,0) = {origin:.15}, first zero v = {zero:.6} \
             (J1 root {root:.6}, tol 1e-4), {secs:.3} s (< 5 s)"
        ),
    );
}

/// Peak passband error on [0, 1.8] over the peak target magnitude 1.8^{2n},
/// and peak stop-band magnitude on [2.2, π] over 2^{2n}.
fn band_errors(f: &DerivativeFilter) -> (f64, f64) {
    let l = (f.taps.len() / 2) as f64;
    let (mut pass, mut stop) = (0.0f64, 0.0f64);
    for i in 0..4096 {
        let w = std::f64::consts::PI * i as f64 / 4095.0;
        let d: f64 = f.taps.iter().enumerate().map(|(j, t)| t * ((j as f64 - l) * w).cos()).sum();
        if w <= 1.8 {
            pass = pass.max((d - ideal_response(f.order, w)).abs());
        } else if w >= 2.2 {
            stop = stop.max(d.abs());
        }
    }
    let p = f.order as i32;
    (pass / 1.8f64.powi(p), stop / 2f64.powi(p))
}

fn filter_design(r: &mut Report) {
    let mut worst = Vec::new();
    let mut ok = true;
    for method in [DesignMethod::LeastSquares, DesignMethod::SignPreserving] {
        let (mut wp, mut ws) = (0.0f64, 0.0f64);
        for n in 1..=7 {
            let order = 2 * n;
            let (f, _) = design_with_report(method, order, 2.0, DEFAULT_HALF_LENGTH, DEFAULT_GRID_POINTS)
                .unwrap();
            let (p, s) = band_errors(&f);
            wp = wp.max(p);
            ws = ws.max(s);
        }
        ok &= wp <= 1e-2 && ws <= 1e-2;
        worst.push(format!("{method:?}: pass {wp:.2e}, stop {ws:.2e}"));
    }
    r.line(
        2,
        ok,
        format!(
            "orders 2..14 at cutoff 2, 4096-point DTFT, worst relative errors (tol 1e-2): {}",
            worst.join("; ")
        ),
    );
}

fn kernel_synthesis(r: &mut Report, k: &HvsmKernel) {
    let grid = uniform_frequencies(1024);
    let truth: Vec<f64> = (1..=7).map(|n| 0.3 / (1..=n).product::<usize>() as f64).collect();
    let values: Vec<f64> = grid
        .iter()
        .map(|&w| {
            truth
                .iter()
                .enumerate()
                .map(|(j, c)| c * ideal_response(2 * (j + 1), w).abs())
                .sum()
        })
        .collect();
    // With positive weights on |ideal| the signed coefficients alternate.
    let signed: Vec<f64> = truth
        .iter()
        .enumerate()
        .map(|(j, c)| if j % 2 == 0 { -c } else { *c })
        .collect();
    let spec = SampledSpectrum::new(grid, values).unwrap();
    let fit = fit_coefficients(&spec, 7, 2.0, 30.0).unwrap();
    let coef_err = fit
        .coefficients
        .iter()
        .zip(&signed)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);

    let d = KernelDesign::default();
    let inv = invert_spectrum(&psf_spectrum(&PsfModel::default(), d.z_star, d.pixel_pitch, d.spectrum_grid).unwrap())
        .unwrap();
    let real = fit_coefficients(&inv, d.order_count, d.cutoff, d.instability_cap).unwrap();
    let in_band_max = inv
        .iter()
        .filter(|&(w, _)| w <= real.band_limit)
        .map(|(_, v)| v)
        .fold(0.0, f64::max);
    let next = inv.iter().find(|&(w, _)| w > real.band_limit).unwrap();
    let maximal = next.1 > d.instability_cap || next.0 > d.cutoff;
    let ok = fit.residual <= 1e-9
        && coef_err <= 1e-9
        && d.order_count == 7
        && k.coefficients.len() == 7
        && in_band_max <= 30.0
        && maximal;
    r.line(
        3,
        ok,
        format!(
            "in-span residual {:.1e}, coefficient error {coef_err:.1e} (<= 1e-9), N = {}, \
             omega_t = {:.5} with max in-band inverse {in_band_max:.3} (cap 30)",
            fit.residual,
            k.coefficients.len(),
            real.band_limit
        ),
    );
}

fn noise(width: usize, height: usize, seed: u64) -> fqpath::image::GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height).map(|_| rng.random::<f64>()).collect();
    fqpath::image::GrayImage::new(width, height, data).unwrap()
}

fn scoring_properties(r: &mut Report, k: &HvsmKernel) {
    let p = ScoringParams::default();
    let mut transpose_exact = true;
    let mut flip = 0.0f64;
    for (w, h, seed) in [(128, 128, 1), (96, 160, 2), (200, 72, 3), (256, 256, 4)] {
        let img = noise(w, h, seed);
        let a = score_gray(&img, k, &p).unwrap();
        transpose_exact &= a == score_gray(&img.transpose(), k, &p).unwrap();
        for f in [img.flip_horizontal(), img.flip_vertical()] {
            flip = flip.max((score_gray(&f, k, &p).unwrap().raw - a.raw).abs());
        }
    }

    let levels: Vec<f64> = (0..=8).map(f64::from).collect();
    let cfg = LadderConfig {
        size: 128,
        blur: BlurModel::Gaussian {
            sigma_per_level: 0.5,
        },
    };
    let ladder = make_blur_ladder(2024, 100, &levels, &cfg).unwrap();
    let monotone = ladder
        .chunks(levels.len())
        .filter(|rung| {
            let s: Vec<f64> = rung.iter().map(|q| score_patch(&q.image, k, &p).unwrap().raw).collect();
            s.windows(2).all(|w| w[1] > w[0])
        })
        .count();

    let ret = Retention::default();
    let (p1, p2) = (ret.proportion(0.095), ret.proportion(0.3));
    let ok = transpose_exact
        && flip <= 1e-9
        && monotone >= 95
        && (p1 - 0.34).abs() <= 1e-6
        && (p2 - 0.09).abs() <= 1e-6;
    r.line(
        4,
        ok,
        format!(
            "transpose exact: {transpose_exact}, flip {flip:.1e} (<= 1e-9), strictly monotone \
             ladders {monotone}/100 (>= 95), P(0.095) = {p1:.9}, P(0.3) = {p2:.9} (tol 1e-6)"
        ),
    );
}

fn projection_round_trip(r: &mut Report) {
    let (a, b, c, ceiling) = (5.389, 0.005248, 5.301, 8.0);
    let levels: Vec<i64> = (-30..=30).collect();
    let row: Vec<f64> = levels
        .iter()
        .map(|&z| {
            let u = (z as f64 - b) / c;
            ceiling - a * (-u * u).exp()
        })
        .collect();
    let profiles = TrainingProfiles::new(vec![row; 4], levels).unwrap();
    let m = fit_projection(&profiles, (-3, 3)).unwrap();
    let rel = [(m.a_star, a), (m.b_star, b), (m.c_star, c)]
        .iter()
        .map(|(x, y)| ((x - y) / y).abs())
        .fold(0.0, f64::max);

    // The mean profile maps to |z - b*| + b*, which differs from |z| by up to
    // 2b* for z < b*.
    let (mut lin, mut abs_dev) = (0.0f64, 0.0f64);
    for i in -300..=300 {
        let z = i as f64 * 0.01;
        let got = project_score(&m, m.score_ceiling - m.gaussian(z));
        lin = lin.max((got - ((z - m.b_star).abs() + m.b_star)).abs());
        abs_dev = abs_dev.max((got - z.abs()).abs());
    }
    let ok = rel <= 1e-6 && lin <= 1e-6 && abs_dev <= 2.0 * m.b_star + 1e-6;
    r.line(
        5,
        ok,
        format!(
            "(a, b, c) recovered to {rel:.1e} relative (<= 1e-6); projected mean equals \
             |z - b*| + b* to {lin:.1e} (<= 1e-6) on [-3, 3]; deviation from |z| {abs_dev:.4} \
             (bounded by 2b* = {:.4})",
            2.0 * m.b_star
        ),
    );
}

fn kendall_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i].total_cmp(&x[j]), y[i].total_cmp(&y[j]));
            match (dx.is_eq(), dy.is_eq()) {
                (true, true) => {}
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                _ if dx == dy => conc += 1,
                _ => disc += 1,
            }
        }
    }
    (conc - disc) as f64 / (((conc + disc + tx) * (conc + disc + ty)) as f64).sqrt()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Average ranks by counting, O(n²).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            below + 0.5 * (equal - 1.0)
        })
        .collect()
}

fn correlation_harness(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut kendall, mut spearman, mut pearson_err, mut invariance) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < 500 {
        let n = rng.random_range(3..=200);
        let levels = if cases % 3 == 0 { rng.random_range(2..6) } else { 1_000_000 };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
            continue;
        }
        cases += 1;
        let s = PairedSamples::new(x.clone(), y.clone()).unwrap();
        let (k, sr, pl) = (krcc(&s).unwrap(), srcc(&s).unwrap(), plcc(&s).unwrap());
        kendall = kendall.max((k - kendall_oracle(&x, &y)).abs());
        spearman = spearman.max((sr - pearson(&average_ranks(&x), &average_ranks(&y))).abs());
        pearson_err = pearson_err.max((pl - pearson(&x, &y)).abs());

        let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + v.cbrt()).collect();
        let ty: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
        let t = PairedSamples::new(tx, ty).unwrap();
        invariance = invariance
            .max((krcc(&t).unwrap() - k).abs())
            .max((srcc(&t).unwrap() - sr).abs());
        let affine = PairedSamples::new(x.iter().map(|v| 2.5 * v + 1.0).collect(), y.clone()).unwrap();
        invariance = invariance.max((plcc(&affine).unwrap() - pl).abs());
    }
    let textbook = plcc(&PairedSamples::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0, 1.0, 4.0, 3.0, 5.0]).unwrap())
        .unwrap();
    let rho = srcc(&PairedSamples::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0, 1.0, 4.0, 3.0, 5.0]).unwrap())
        .unwrap();
    let ok = kendall <= 1e-12
        && spearman <= 1e-12
        && pearson_err <= 1e-12
        && invariance <= 1e-12
        && (textbook - 0.8).abs() <= 1e-12
        && (rho - 0.8).abs() <= 1e-12;
    r.line(
        6,
        ok,
        format!(
            "{cases} random cases: KRCC vs pairwise oracle {kendall:.1e}, SRCC vs ranked Pearson \
             {spearman:.1e}, PLCC vs direct formula {pearson_err:.1e}, transform invariance \
             {invariance:.1e} (all <= 1e-12); textbook r = rho = 0.8"
        ),
    );
}

fn end_to_end(r: &mut Report, k: &HvsmKernel) {
    let levels: Vec<f64> = (0..=8).map(f64::from).collect();
    let ladder = make_blur_ladder(7, 100, &levels, &LadderConfig::default()).unwrap();
    let p = ScoringParams::default();
    let scores: Vec<f64> = ladder.iter().map(|q| score_patch(&q.image, k, &p).unwrap().raw).collect();
    let truth: Vec<f64> = ladder.iter().map(|q| q.level.abs()).collect();
    let s = PairedSamples::new(scores, truth).unwrap();
    let (sr, pl) = (srcc(&s).unwrap(), plcc(&s).unwrap());
    r.line(
        7,
        sr >= 0.90 && pl >= 0.85,
        format!("100 textures x 9 PSF levels: SRCC {sr:.4} (>= 0.90), PLCC {pl:.4} (>= 0.85)"),
    );
}

fn performance(r: &mut Report, k: &HvsmKernel) {
    let p = ScoringParams::default();
    let cfg = LadderConfig {
        size: 1024,
        blur: BlurModel::Gaussian { sigma_per_level: 1.0 },
    };
    let patch = make_blur_ladder(3, 1, &[0.0], &cfg).unwrap().remove(0).image;
    score_patch(&patch, k, &p).unwrap();
    let runs = 5;
    let start = Instant::now();
    for _ in 0..runs {
        score_patch(&patch, k, &p).unwrap();
    }
    let patch_secs = start.elapsed().as_secs_f64() / runs as f64;

    let projection = ProjectionModel {
        a_star: 5.389,
        b_star: 0.005248,
        c_star: 5.301,
        score_ceiling: 8.0,
        clamp_floor: fqpath::projection::DEFAULT_CLAMP_FLOOR,
        fit_window: (-3, 3),
    };
    let scorer = SlideScorer {
        kernel: k,
        params: &p,
        projection: &projection,
        tissue: TissueConfig::default(),
        patch_size: 1024,
    };
    let baseline = CURRENT.load(Ordering::Relaxed);
    PEAK.store(baseline, Ordering::Relaxed);
    let start = Instant::now();
    let mut slide = SyntheticSlide::new(16384, 16384, 11);
    let grid = tile_and_score(&mut slide, "synthetic", &scorer, Execution::Parallel { jobs: 8 }).unwrap();
    let slide_secs = start.elapsed().as_secs_f64();
    let peak = (PEAK.load(Ordering::Relaxed) - baseline) as f64 / MB;
    let shape = grid.rows == 16 && grid.cols == 16 && !grid.scored().is_empty();
    let ok = patch_secs <= 0.1 && slide_secs <= 30.0 && peak <= 512.0 && shape;
    r.line(
        8,
        ok,
        format!(
            "1024x1024 patch {:.1} ms (<= 100 ms); 16384x16384 slide with 8 workers {slide_secs:.1} s \
             (<= 30 s), peak heap {peak:.0} MB (<= 512 MB), {} of 256 tiles scored",
            patch_secs * 1e3,
            grid.scored().len()
        ),
    );
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.sample(StandardUniform);
    let u2: f64 = rng.sample(StandardUniform);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn slide_gating(r: &mut Report) {
    let grid = threshold_grid(0.5, 3.0, 0.1).unwrap();
    let mut worst = 0.0f64;
    let trials = 50u64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let slides: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let center = rng.random_range(0.5..3.5);
                let spread = rng.random_range(0.3..1.5);
                (0..300).map(|_| (center + spread * normal(&mut rng)).max(0.0)).collect()
            })
            .collect();
        let planted = rng.random_range(1.0..2.5);
        let subjective: Vec<f64> = slides.iter().map(|v| acceptance_ratio(v, planted)).collect();
        let found = threshold_sweep(&slides, &subjective, &grid).unwrap().best_threshold;
        worst = worst.max((found - planted).abs());
    }

    let t = DEFAULT_THRESHOLD;
    let crafted = [
        (
            HeatmapGrid::from_projected(
                "a", 2, 4,
                &[Some(1.0), Some(3.0), Some(1.0), Some(3.0), Some(3.0), Some(1.0), Some(3.0), Some(1.0)],
            )
            .unwrap(),
            0.5, 8,
        ),
        (
            HeatmapGrid::from_projected(
                "b", 3, 3,
                &[None, Some(0.2), Some(t), Some(1.7689), None, Some(5.0), Some(0.0), Some(9.0), None],
            )
            .unwrap(),
            0.5, 6,
        ),
        (
            HeatmapGrid::from_projected("c", 1, 5, &[Some(1.5), Some(2.0), Some(2.5), Some(8.0), Some(1.77)])
                .unwrap(),
            0.2, 5,
        ),
    ];
    let exact = crafted.iter().all(|(g, ratio, n)| {
        let d = decide(g, t, DEFAULT_PASS_RATIO);
        d.acceptance_ratio == *ratio && d.n_tissue_tiles == *n && d.threshold == t
    });
    let ok = worst <= 0.1 + 1e-9 && exact;
    r.line(
        9,
        ok,
        format!(
            "planted threshold on 20 slides, {trials} seeds: worst miss {worst:.3} (<= one step 0.1); \
             3 crafted grids at 1.7688 reproduce 0.5, 0.5, 0.2 exactly: {exact}"
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    let k = kernel();
    psf_analytics(&mut r);
    filter_design(&mut r);
    kernel_synthesis(&mut r, &k);
    scoring_properties(&mut r, &k);
    projection_round_trip(&mut r);
    correlation_harness(&mut r);
    end_to_end(&mut r, &k);
    performance(&mut r, &k);
    slide_gating(&mut r);
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
