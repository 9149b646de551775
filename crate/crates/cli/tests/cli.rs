use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fqpath::eval::{make_blur_ladder, BlurModel, LadderConfig};
use fqpath::image::{write_png, PixelBuffer};
use serde_json::Value;
use tempfile::TempDir;

fn fqpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fqpath"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Shared kernel and projection, built once through the binary.
struct Fixture {
    _dir: TempDir,
    kernel: PathBuf,
    projection: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let kernel = dir.path().join("kernel.json");
        let out = fqpath(&["synth-kernel", "--out", s(&kernel)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

        // Profiles drawn from a saturating Gaussian dip.
        let mut csv = String::from("profile_id,z,raw_score\n");
        for p in 0..4 {
            for z in -30..=30 {
                let g = 5.389 * (-((z as f64 - 0.005248) / 5.301).powi(2)).exp();
                csv.push_str(&format!("{p},{z},{}\n", 8.0 - g * (1.0 + 0.001 * p as f64)));
            }
        }
        let profiles = dir.path().join("profiles.csv");
        std::fs::write(&profiles, csv).unwrap();
        let projection = dir.path().join("projection.json");
        let out = fqpath(&[
            "fit-projection",
            "--profiles",
            s(&profiles),
            "--out",
            s(&projection),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Fixture {
            _dir: dir,
            kernel,
            projection,
        }
    })
}

/// 512×512 RGB slide: textured left column of tiles, white right column.
fn write_slide(path: &Path) {
    let cfg = LadderConfig {
        size: 256,
        blur: BlurModel::Gaussian { sigma_per_level: 0.5 },
    };
    let tex = make_blur_ladder(3, 2, &[0.0], &cfg).unwrap();
    let mut data = vec![255u8; 512 * 512 * 3];
    for (t, patch) in tex.iter().enumerate() {
        for y in 0..256 {
            for x in 0..256 {
                let v = patch.image.data[(y * 256 + x) * patch.image.channels];
                let o = ((t * 256 + y) * 512 + x) * 3;
                data[o..o + 3].copy_from_slice(&[v, v, v]);
            }
        }
    }
    write_png(path, &PixelBuffer::new(512, 512, 3, data).unwrap()).unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&fqpath(&["--help"])), 0);
    assert_eq!(code(&fqpath(&["--version"])), 0);
    assert_eq!(code(&fqpath(&["heatmap", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&fqpath(&[])), 1);
    assert_eq!(code(&fqpath(&["no-such-command"])), 1);
    assert_eq!(code(&fqpath(&["bench", "--size", "many"])), 1);
    assert_eq!(code(&fqpath(&["bench", "--size", "16", "--iters", "1"])), 1);
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("l");
    assert_eq!(
        code(&fqpath(&["make-ladder", "--levels", "5..1", "--out", s(&out)])),
        1
    );
    assert_eq!(
        code(&fqpath(&["make-ladder", "--blur", "box", "--out", s(&out)])),
        1
    );
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_two_without_outputs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("scores.csv");
    let out = fqpath(&[
        "score",
        s(&dir.path().join("absent.png")),
        "--kernel",
        s(&f.kernel),
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.png"));
    assert!(!csv.exists());

    let out = fqpath(&["synth-kernel", "--config", s(&dir.path().join("none.toml")), "--out", s(&csv)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ladder_score_eval_pipeline() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let ladder = dir.path().join("ladder");
    let out = fqpath(&[
        "make-ladder",
        "--seed",
        "9",
        "--count",
        "4",
        "--levels",
        "0..4",
        "--size",
        "128",
        "--blur",
        "gaussian",
        "--out",
        s(&ladder),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ladder.join("labels.csv").is_file());

    let scores = dir.path().join("scores.csv");
    let run = |dest: &Path| {
        fqpath(&[
            "score",
            s(&ladder),
            "--kernel",
            s(&f.kernel),
            "--projection",
            s(&f.projection),
            "--out",
            s(dest),
        ])
    };
    assert_eq!(code(&run(&scores)), 0);
    let text = std::fs::read_to_string(&scores).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "path,raw_score,projected_score,n_retained,sigma95,degenerate_flag"
    );
    assert_eq!(lines.count(), 20);

    // Same inputs, same bytes.
    let again = dir.path().join("again.csv");
    assert_eq!(code(&run(&again)), 0);
    assert_eq!(std::fs::read(&scores).unwrap(), std::fs::read(&again).unwrap());

    let report = dir.path().join("report.json");
    let out = fqpath(&[
        "eval",
        "--pred",
        s(&scores),
        "--truth",
        s(&ladder.join("labels.csv")),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["n"], 20);
    // Raw scores grow with blur.
    assert!(r["srcc"].as_f64().unwrap() > 0.9, "{r}");

    let out = fqpath(&[
        "eval",
        "--pred",
        s(&scores),
        "--truth",
        s(&ladder.join("labels.csv")),
        "--logistic",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fitted = stdout_json(&out);
    assert_eq!(fitted["logistic_fitted"], true);
    assert!(fitted["plcc"].as_f64().unwrap() >= r["plcc"].as_f64().unwrap() - 1e-9);

    let out = fqpath(&[
        "eval",
        "--pred",
        s(&scores),
        "--truth",
        s(&ladder.join("labels.csv")),
        "--column",
        "no_such_column",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn heatmap_gate_and_outputs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let slide = dir.path().join("slide01.png");
    write_slide(&slide);
    let png = dir.path().join("heat.png");
    let tiles = dir.path().join("tiles.csv");
    let curve = dir.path().join("curve.csv");
    let heatmap = |threshold: &str| {
        fqpath(&[
            "heatmap",
            s(&slide),
            "--kernel",
            s(&f.kernel),
            "--projection",
            s(&f.projection),
            "--patch",
            "256",
            "--threshold",
            threshold,
            "--block",
            "4",
            "--jobs",
            "2",
            "--out-png",
            s(&png),
            "--out-csv",
            s(&tiles),
            "--out-curve",
            s(&curve),
            "--gate",
        ])
    };

    let out = heatmap("1000");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let d = stdout_json(&out);
    assert_eq!(d["slide_id"], "slide01");
    assert_eq!((d["rows"].as_u64(), d["cols"].as_u64()), (Some(2), Some(2)));
    assert_eq!(d["n_tissue_tiles"], 2);
    assert_eq!(d["acceptance_ratio"], 1.0);
    assert_eq!(d["pass"], true);
    let tile_text = std::fs::read_to_string(&tiles).unwrap();
    assert_eq!(tile_text.lines().count(), 5);
    assert!(curve.is_file());
    let img = fqpath::image::read_png(&png).unwrap();
    assert_eq!((img.width, img.height), (8, 8));

    let out = heatmap("-1");
    assert_eq!(code(&out), 3);
    let d = stdout_json(&out);
    assert_eq!(d["acceptance_ratio"], 0.0);
    assert_eq!(d["pass"], false);

    // Tile CSVs feed the sweep unchanged.
    assert_eq!(code(&heatmap("1000")), 0);
    let tiles_again = std::fs::read_to_string(&tiles).unwrap();
    assert_eq!(tile_text, tiles_again);
}

#[test]
fn failed_runs_leave_no_partial_outputs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let slide = dir.path().join("tiny.png");
    write_png(&slide, &PixelBuffer::new(32, 32, 1, vec![90; 32 * 32]).unwrap()).unwrap();
    let png = dir.path().join("heat.png");
    let tiles = dir.path().join("tiles.csv");
    let out = fqpath(&[
        "heatmap",
        s(&slide),
        "--kernel",
        s(&f.kernel),
        "--projection",
        s(&f.projection),
        "--patch",
        "64",
        "--out-png",
        s(&png),
        "--out-csv",
        s(&tiles),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!png.exists() && !tiles.exists());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);

    let out = fqpath(&[
        "heatmap",
        s(&slide),
        "--kernel",
        s(&f.kernel),
        "--projection",
        s(&f.projection),
        "--patch",
        "32",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_values_apply_and_flags_win() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let slide = dir.path().join("slide02.png");
    write_slide(&slide);
    std::fs::copy(&f.kernel, dir.path().join("k.json")).unwrap();
    std::fs::copy(&f.projection, dir.path().join("p.json")).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "kernel = \"k.json\"\nprojection = \"p.json\"\npatch = 256\nthreshold = -1.0\n\n[output]\ntiles = \"from_config.csv\"\n",
    )
    .unwrap();

    let out = fqpath(&["heatmap", s(&slide), "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let d = stdout_json(&out);
    assert_eq!(d["rows"], 2);
    assert_eq!(d["threshold"], -1.0);
    assert!(dir.path().join("from_config.csv").is_file());

    let out = fqpath(&[
        "heatmap",
        s(&slide),
        "--config",
        s(&config),
        "--threshold",
        "1000",
        "--patch",
        "128",
    ]);
    assert_eq!(code(&out), 0);
    let d = stdout_json(&out);
    assert_eq!(d["rows"], 4);
    assert_eq!(d["threshold"], 1000.0);

    std::fs::write(&config, "patchsize = 3\n").unwrap();
    assert_eq!(code(&fqpath(&["heatmap", s(&slide), "--config", s(&config)])), 1);
}

#[test]
fn sweep_reads_tile_files() {
    let dir = TempDir::new().unwrap();
    let slides = dir.path().join("slides");
    std::fs::create_dir(&slides).unwrap();
    // Slide i has tiles 1.0..=2.0 with the first i of ten below 1.5.
    let mut subjective = String::from("slide_id,acceptance_ratio\n");
    for i in 0..12 {
        let mut csv = String::from("row,col,tissue,raw_score,projected_score\n");
        let below = i % 11;
        for t in 0..10 {
            let v = if t < below { 1.0 + 0.04 * t as f64 } else { 1.6 + 0.04 * t as f64 };
            csv.push_str(&format!("0,{t},true,0.5,{v}\n"));
        }
        std::fs::write(slides.join(format!("s{i}.csv")), csv).unwrap();
        subjective.push_str(&format!("s{i},{}\n", below as f64 / 10.0));
    }
    let subj = dir.path().join("subjective.csv");
    std::fs::write(&subj, subjective).unwrap();
    let curve = dir.path().join("curve.csv");
    let out = fqpath(&[
        "sweep",
        "--slides",
        s(&slides),
        "--subjective",
        s(&subj),
        "--grid",
        "1.0:2.0:0.1",
        "--out-curve",
        s(&curve),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["n_slides"], 12);
    assert!((r["best_plcc"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{r}");
    let best = r["best_threshold"].as_f64().unwrap();
    assert!((1.4..=1.6).contains(&best), "{best}");
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 12);

    assert_eq!(
        code(&fqpath(&["sweep", "--slides", s(&slides), "--subjective", s(&subj), "--grid", "2:1:0.1"])),
        1
    );
}

#[test]
fn bench_reports_timings() {
    let f = fixture();
    let out = fqpath(&["bench", "--size", "128", "--iters", "3", "--kernel", s(&f.kernel)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["size"], 128);
    assert_eq!(r["samples_s"].as_array().unwrap().len(), 3);
    let mean = r["mean_s"].as_f64().unwrap();
    let min = r["min_s"].as_f64().unwrap();
    assert!(min > 0.0 && min <= mean);
    assert!(r["ns_per_pixel"].as_f64().unwrap() > 0.0);
}
