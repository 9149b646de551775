//! Inverse Gaussian projection of raw scores onto a roughly linear |z|
//! scale.
//!
//! Training fits `a·exp(-((z - b)/c)²)` to the inverted mean z-profile of a
//! set of scored focus stacks; testing inverts that Gaussian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde_json::json;

use crate::error::{Error, Result};
use crate::json;

pub const SCHEMA_VERSION: u64 = 1;
pub const DEFAULT_WINDOW: (i64, i64) = (-3, 3);
pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-9;
const MAX_ITERATIONS: usize = 200;
const STEP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionModel {
    pub a_star: f64,
    pub b_star: f64,
    pub c_star: f64,
    /// Worst (largest) mean training score.
    pub score_ceiling: f64,
    pub clamp_floor: f64,
    pub fit_window: (i64, i64),
}

impl ProjectionModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a_star, self.b_star, self.c_star, self.score_ceiling, self.clamp_floor]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invariant("projection parameters must be finite".into()));
        }
        if !(self.a_star > 0.0) {
            return Err(Error::Invariant(format!("a_star must be positive, got {}", self.a_star)));
        }
        if !(self.c_star > 0.0) {
            return Err(Error::Invariant(format!("c_star must be positive, got {}", self.c_star)));
        }
        if !(self.clamp_floor > 0.0 && self.clamp_floor < self.a_star) {
            return Err(Error::Invariant(
                "clamp_floor must lie in (0, a_star)".into(),
            ));
        }
        if self.fit_window.0 >= self.fit_window.1 {
            return Err(Error::Invariant("fit_window must be increasing".into()));
        }
        Ok(())
    }

    /// The fitted inverse-profile model at depth `z`.
    pub fn gaussian(&self, z: f64) -> f64 {
        gaussian(self.a_star, self.b_star, self.c_star, z)
    }

    /// Largest value [`project_score`] can return.
    pub fn output_cap(&self) -> f64 {
        self.c_star * (-(self.clamp_floor / self.a_star).ln()).sqrt() + self.b_star
    }
}

fn gaussian(a: f64, b: f64, c: f64, z: f64) -> f64 {
    let u = (z - b) / c;
    a * (-u * u).exp()
}

/// Scores of `profiles × z_levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingProfiles {
    scores: Vec<Vec<f64>>,
    z_levels: Vec<i64>,
}

impl TrainingProfiles {
    pub fn new(scores: Vec<Vec<f64>>, z_levels: Vec<i64>) -> Result<Self> {
        if z_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("z_levels", "must be strictly increasing"));
        }
        if let Some(i) = scores.iter().position(|r| r.len() != z_levels.len()) {
            return Err(Error::param(
                "scores",
                format!(
                    "profile {i} has {} scores for {} z levels",
                    scores[i].len(),
                    z_levels.len()
                ),
            ));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("scores", "must be finite"));
        }
        Ok(Self { scores, z_levels })
    }

    /// Default z range of the training stacks, −7..=8.
    pub fn default_levels() -> Vec<i64> {
        (-7..=8).collect()
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn z_levels(&self) -> &[i64] {
        &self.z_levels
    }

    pub fn mean_profile(&self) -> Vec<f64> {
        let n = self.scores.len() as f64;
        (0..self.z_levels.len())
            .map(|j| self.scores.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }

    /// Reads `profile_id, z, raw_score` rows. Every profile must cover the
    /// same z levels exactly once.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
                field: name.into(),
                message: "missing column".into(),
            })
        };
        let (id_col, z_col, s_col) = (col("profile_id")?, col("z")?, col("raw_score")?);
        let mut order: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec.get(id_col).unwrap_or("").trim().to_string();
            let z: i64 = parse_field(rec.get(z_col), "z")?;
            let s: f64 = parse_field(rec.get(s_col), "raw_score")?;
            if !rows.contains_key(&id) {
                order.push(id.clone());
            }
            if rows.entry(id.clone()).or_default().insert(z, s).is_some() {
                return Err(Error::Parse {
                    field: "z".into(),
                    message: format!("profile {id} lists z = {z} twice"),
                });
            }
        }
        let Some(first) = order.first() else {
            return Err(Error::Degenerate("training CSV has no rows".into()));
        };
        let z_levels: Vec<i64> = rows[first].keys().copied().collect();
        let mut scores = Vec::with_capacity(order.len());
        for id in &order {
            let r = &rows[id];
            if r.keys().copied().ne(z_levels.iter().copied()) {
                return Err(Error::Parse {
                    field: "z".into(),
                    message: format!("profile {id} does not cover the same z levels as {first}"),
                });
            }
            scores.push(r.values().copied().collect());
        }
        Self::new(scores, z_levels)
    }
}

fn parse_field<T: std::str::FromStr>(v: Option<&str>, field: &str) -> Result<T> {
    v.and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::Parse {
        field: field.into(),
        message: format!("cannot parse {:?}", v.unwrap_or("")),
    })
}

/// Calibrates the projection on the mean training profile.
pub fn fit_projection(profiles: &TrainingProfiles, window: (i64, i64)) -> Result<ProjectionModel> {
    if profiles.scores.len() < 2 {
        return Err(Error::param("profiles", "need at least two profiles"));
    }
    let levels = profiles.z_levels();
    let (lo, hi) = window;
    let (Some(&zmin), Some(&zmax)) = (levels.first(), levels.last()) else {
        return Err(Error::param("z_levels", "empty"));
    };
    if lo < zmin || hi > zmax || lo >= hi {
        return Err(Error::param(
            "window",
            format!("[{lo}, {hi}] is not inside the z range [{zmin}, {zmax}]"),
        ));
    }
    let mean = profiles.mean_profile();
    let ceiling = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let points: Vec<(f64, f64)> = levels
        .iter()
        .zip(&mean)
        .filter(|(&z, _)| z >= lo && z <= hi)
        .map(|(&z, &s)| (z as f64, ceiling - s))
        .collect();
    if points.len() < 4 {
        return Err(Error::param(
            "window",
            format!("covers {} z levels, need at least 4", points.len()),
        ));
    }
    let (a, b, c) = fit_gaussian(&points)?;
    let model = ProjectionModel {
        a_star: a,
        b_star: b,
        c_star: c,
        score_ceiling: ceiling,
        clamp_floor: DEFAULT_CLAMP_FLOOR,
        fit_window: window,
    };
    model.validate()?;
    Ok(model)
}

/// Damped Gauss–Newton (Levenberg–Marquardt) fit of `a·exp(-((z-b)/c)²)`.
pub fn fit_gaussian(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let a0 = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let weight: f64 = points.iter().map(|p| p.1.max(0.0)).sum();
    if !(a0 > 0.0) || !(weight > 0.0) {
        return Err(Error::NonConvergence {
            iterations: 0,
            residual: residual_norm(points, 0.0, 0.0, 1.0),
        });
    }
    let zbar = points.iter().map(|p| p.0 * p.1.max(0.0)).sum::<f64>() / weight;
    let var = points
        .iter()
        .map(|p| (p.0 - zbar).powi(2) * p.1.max(0.0))
        .sum::<f64>()
        / weight;
    // exp(-((z-b)/c)²) has variance c²/2.
    let mut params = Vector3::new(a0, 0.0, (2.0 * var).sqrt().max(1e-3));
    let mut lambda = 1e-3;
    let mut cost = residual_norm(points, params[0], params[1], params[2]).powi(2);

    for iter in 1..=MAX_ITERATIONS {
        let (a, b, c) = (params[0], params[1], params[2]);
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for &(z, y) in points {
            let u = (z - b) / c;
            let e = (-u * u).exp();
            let f = a * e;
            let j = Vector3::new(e, f * 2.0 * u / c, f * 2.0 * u * u / c);
            jtj += j * j.transpose();
            jtr += j * (y - f);
        }
        let mut accepted = None;
        for _ in 0..60 {
            let mut damped = jtj;
            for d in 0..3 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = params + step;
            let trial_cost = residual_norm(points, trial[0], trial[1], trial[2]).powi(2);
            if trial_cost.is_finite() && trial_cost <= cost {
                accepted = Some((trial, trial_cost, step));
                lambda = (lambda * 0.3).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let Some((trial, trial_cost, step)) = accepted else {
            // No descent direction left: converged if the gradient vanishes.
            if jtr.norm() <= 1e-12 * (1.0 + cost.sqrt()) {
                return finish(params);
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: cost.sqrt(),
            });
        };
        params = trial;
        cost = trial_cost;
        let rel = step.norm() / params.norm().max(1e-300);
        if rel <= STEP_TOLERANCE {
            return finish(params);
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual: cost.sqrt(),
    })
}

fn finish(p: Vector3<f64>) -> Result<(f64, f64, f64)> {
    // The model depends on c only through c².
    Ok((p[0], p[1], p[2].abs()))
}

fn residual_norm(points: &[(f64, f64)], a: f64, b: f64, c: f64) -> f64 {
    points
        .iter()
        .map(|&(z, y)| (y - gaussian(a, b, c, z)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Maps a raw score to the projected scale. Total: the inverted score is
/// clamped to `[clamp_floor, a_star]` before the logarithm.
pub fn project_score(model: &ProjectionModel, raw: f64) -> f64 {
    let inv = (model.score_ceiling - raw).clamp(model.clamp_floor, model.a_star);
    let inv = if inv.is_nan() { model.clamp_floor } else { inv };
    model.c_star * (-(inv / model.a_star).ln()).max(0.0).sqrt() + model.b_star
}

pub fn projection_to_json(model: &ProjectionModel) -> String {
    let v = json!({
        "schema_version": SCHEMA_VERSION,
        "a_star": model.a_star,
        "b_star": model.b_star,
        "c_star": model.c_star,
        "score_ceiling": model.score_ceiling,
        "clamp_floor": model.clamp_floor,
        "fit_window": [model.fit_window.0, model.fit_window.1],
    });
    serde_json::to_string_pretty(&v).expect("projection JSON serialization")
}

pub fn projection_from_json(text: &str) -> Result<ProjectionModel> {
    let obj = json::parse_object(text)?;
    let version = json::u64_field(&obj, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::Parse {
            field: "schema_version".into(),
            message: format!("unsupported version {version}"),
        });
    }
    let window = json::get(&obj, "fit_window")?
        .as_array()
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_i64()?, a[1].as_i64()?)))
        .ok_or_else(|| Error::Parse {
            field: "fit_window".into(),
            message: "expected a pair of integers".into(),
        })?;
    let model = ProjectionModel {
        a_star: json::f64_field(&obj, "a_star")?,
        b_star: json::f64_field(&obj, "b_star")?,
        c_star: json::f64_field(&obj, "c_star")?,
        score_ceiling: json::f64_field(&obj, "score_ceiling")?,
        clamp_floor: json::f64_field(&obj, "clamp_floor")?,
        fit_window: window,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_projection(model: &ProjectionModel, path: &Path) -> Result<()> {
    json::write_atomic(path, projection_to_json(model).as_bytes())
}

pub fn load_projection(path: &Path) -> Result<ProjectionModel> {
    projection_from_json(&fs::read_to_string(path)?)
}
