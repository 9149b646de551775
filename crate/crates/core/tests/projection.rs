use fqpath::projection::*;
use fqpath::Error;
use proptest::prelude::*;
use rand::distr::StandardUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: f64 = 5.389;
const B: f64 = 0.005248;
const C: f64 = 5.301;
const M: f64 = 8.0;

fn profile_value(z: f64) -> f64 {
    let u = (z - B) / C;
    M - A * (-u * u).exp()
}

// Wide enough that the mean profile reaches its ceiling M to below 1e-12.
fn saturating_levels() -> Vec<i64> {
    (-30..=30).collect()
}

fn exact_profiles(levels: &[i64], n: usize) -> TrainingProfiles {
    let row: Vec<f64> = levels.iter().map(|&z| profile_value(z as f64)).collect();
    TrainingProfiles::new(vec![row; n], levels.to_vec()).unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.sample(StandardUniform);
    let u2: f64 = rng.sample(StandardUniform);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rel(x: f64, y: f64) -> f64 {
    ((x - y) / y).abs()
}

#[test]
fn noiseless_profiles_recover_parameters() {
    let p = exact_profiles(&saturating_levels(), 4);
    let m = fit_projection(&p, (-3, 3)).unwrap();
    assert!(rel(m.a_star, A) <= 1e-6, "a {}", m.a_star);
    assert!(rel(m.b_star, B) <= 1e-6, "b {}", m.b_star);
    assert!(rel(m.c_star, C) <= 1e-6, "c {}", m.c_star);
    assert!((m.score_ceiling - M).abs() <= 1e-9);
}

#[test]
fn unsaturated_levels_bias_the_ceiling() {
    // Over -7..=8 the profile has not reached M, so the ceiling sits low and
    // the amplitude is underestimated.
    let p = exact_profiles(&TrainingProfiles::default_levels(), 4);
    let m = fit_projection(&p, (-3, 3)).unwrap();
    assert!(m.score_ceiling < M - 0.1);
    assert!(m.a_star < A * 0.95);
}

#[test]
fn projected_mean_profile_is_linear_in_depth() {
    let p = exact_profiles(&saturating_levels(), 3);
    let m = fit_projection(&p, (-3, 3)).unwrap();
    for i in -30..=30 {
        let z = i as f64 * 0.1;
        let s = m.score_ceiling - m.gaussian(z);
        let got = project_score(&m, s);
        let want = (z - m.b_star).abs() + m.b_star;
        assert!((got - want).abs() <= 1e-6, "z {z}: {got} vs {want}");
        assert!((got - z.abs()).abs() <= 2.0 * m.b_star.abs() + 1e-6);
    }
}

#[test]
fn noisy_profiles_recover_amplitude_and_width() {
    let levels = saturating_levels();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                levels
                    .iter()
                    .map(|&z| profile_value(z as f64) * (1.0 + 0.01 * normal(&mut rng)))
                    .collect()
            })
            .collect();
        let m = fit_projection(&TrainingProfiles::new(rows, levels.clone()).unwrap(), (-3, 3))
            .unwrap();
        assert!(rel(m.a_star, A) <= 0.05, "seed {seed}: a {}", m.a_star);
        assert!(rel(m.c_star, C) <= 0.05, "seed {seed}: c {}", m.c_star);
        // b is a few thousandths of a level, so it is judged in level units.
        assert!((m.b_star - B).abs() <= 0.05, "seed {seed}: b {}", m.b_star);
    }
}

#[test]
fn fit_gaussian_matches_direct_samples() {
    let pts: Vec<(f64, f64)> = (-4..=4)
        .map(|z| {
            let z = z as f64;
            (z, 2.0 * (-((z - 0.7) / 1.9f64).powi(2)).exp())
        })
        .collect();
    let (a, b, c) = fit_gaussian(&pts).unwrap();
    assert!((a - 2.0).abs() < 1e-8 && (b - 0.7).abs() < 1e-8 && (c - 1.9).abs() < 1e-8);
}

#[test]
fn single_profile_is_rejected() {
    let p = exact_profiles(&saturating_levels(), 1);
    assert!(matches!(fit_projection(&p, (-3, 3)), Err(Error::InvalidParameter { .. })));
}

#[test]
fn json_round_trip_is_bit_exact() {
    let p = exact_profiles(&saturating_levels(), 2);
    let m = fit_projection(&p, (-3, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("proj.json");
    save_projection(&m, &path).unwrap();
    let back = load_projection(&path).unwrap();
    assert_eq!(m, back);
    assert_eq!(m.a_star.to_bits(), back.a_star.to_bits());
    assert_eq!(m.b_star.to_bits(), back.b_star.to_bits());
    assert_eq!(m.c_star.to_bits(), back.c_star.to_bits());
}

#[test]
fn csv_profiles_match_in_memory_fit() {
    let levels = saturating_levels();
    let mut text = String::from("profile_id,z,raw_score\n");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rows = Vec::new();
    for id in 0..3 {
        let row: Vec<f64> = levels
            .iter()
            .map(|&z| profile_value(z as f64) + 0.01 * normal(&mut rng))
            .collect();
        // Rows are written in reverse z order; the reader sorts them.
        for (&z, s) in levels.iter().zip(&row).rev() {
            text.push_str(&format!("p{id},{z},{s:?}\n"));
        }
        rows.push(row);
    }
    let from_csv = TrainingProfiles::read_csv(text.as_bytes()).unwrap();
    let direct = TrainingProfiles::new(rows, levels).unwrap();
    assert_eq!(from_csv, direct);
}

#[test]
fn csv_with_uneven_levels_is_rejected() {
    let text = "profile_id,z,raw_score\na,0,1\na,1,2\nb,0,1\n";
    assert!(matches!(TrainingProfiles::read_csv(text.as_bytes()), Err(Error::Parse { .. })));
}

proptest! {
    #[test]
    fn projection_is_monotone_and_bounded(x in -20.0f64..20.0, dx in 0.0f64..5.0) {
        let m = ProjectionModel {
            a_star: A, b_star: B, c_star: C, score_ceiling: M,
            clamp_floor: DEFAULT_CLAMP_FLOOR, fit_window: (-3, 3),
        };
        let p0 = project_score(&m, x);
        let p1 = project_score(&m, x + dx);
        prop_assert!(p1 >= p0);
        prop_assert!(p0 >= m.b_star - 1e-12 && p0 <= m.output_cap() + 1e-12);
        prop_assert!(project_score(&m, f64::NAN).is_finite());
    }
}
