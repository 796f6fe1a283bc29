//! Accuracy/precision tables, main-sequence regression, one-way
//! repeated-measures ANOVA with sphericity corrections, and the pupil-size
//! gaze-direction analysis.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::geometry::{ScreenPoint, ViewingGeometry};
use crate::tracker::CalibrationGrid;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no fixation samples for point {0}")]
    MissingPoint(usize),
    #[error("need at least {need} trials, got {got}")]
    TooFewTrials { got: usize, need: usize },
    #[error("all amplitudes are equal; regression is degenerate")]
    DegenerateFit,
    #[error("incomplete data matrix: {0}")]
    IncompleteData(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Upper tail of the F distribution.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f.is_nan() {
        return f64::NAN;
    }
    if f == f64::INFINITY {
        return 0.0;
    }
    if f <= 0.0 {
        return 1.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Two-sided tail of Student's t.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    gamma_ur(df / 2.0, x / 2.0)
}

/// Serialize non-finite floats as strings so JSON reports round-trip.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("bad number {s}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisPair {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub point: usize,
    pub true_px: ScreenPoint<f64>,
    pub mean_px: ScreenPoint<f64>,
    pub abs_dev_px: AxisPair,
    pub abs_dev_mm: AxisPair,
    pub abs_dev_deg: AxisPair,
    pub sd_px: AxisPair,
    pub sd_mm: AxisPair,
    pub sd_deg: AxisPair,
    pub n_trials: usize,
    pub n_samples: usize,
}

fn px_to_mm_deg(v: AxisPair, geom: &ViewingGeometry<f64>) -> (AxisPair, AxisPair) {
    let mm = AxisPair { x: v.x * geom.pitch_x_mm(), y: v.y * geom.pitch_y_mm() };
    let deg = AxisPair {
        x: (mm.x / geom.eye_to_screen_mm).atan().to_degrees(),
        y: (mm.y / geom.eye_to_screen_mm).atan().to_degrees(),
    };
    (mm, deg)
}

/// Statistics of one point from its per-trial fixation samples. The SD is the
/// population SD of all samples pooled across trials.
pub fn point_stats(
    point: usize,
    trials: &[Vec<ScreenPoint<f64>>],
    truth: ScreenPoint<f64>,
    geom: &ViewingGeometry<f64>,
) -> Result<PointStats, StatsError> {
    let n = trials.iter().map(Vec::len).sum::<usize>();
    if n == 0 {
        return Err(StatsError::MissingPoint(point));
    }
    let all = || trials.iter().flatten();
    let nf = n as f64;
    let mx = all().map(|p| p.x).sum::<f64>() / nf;
    let my = all().map(|p| p.y).sum::<f64>() / nf;
    let vx = all().map(|p| (p.x - mx).powi(2)).sum::<f64>() / nf;
    let vy = all().map(|p| (p.y - my).powi(2)).sum::<f64>() / nf;
    let dev = AxisPair { x: (mx - truth.x).abs(), y: (my - truth.y).abs() };
    let sd = AxisPair { x: vx.sqrt(), y: vy.sqrt() };
    let (dev_mm, dev_deg) = px_to_mm_deg(dev, geom);
    let (sd_mm, sd_deg) = px_to_mm_deg(sd, geom);
    Ok(PointStats {
        point,
        true_px: truth,
        mean_px: ScreenPoint::new(mx, my),
        abs_dev_px: dev,
        abs_dev_mm: dev_mm,
        abs_dev_deg: dev_deg,
        sd_px: sd,
        sd_mm,
        sd_deg,
        n_trials: trials.iter().filter(|t| !t.is_empty()).count(),
        n_samples: n,
    })
}

/// `recordings[point][trial]` holds that trial's fixation samples.
pub fn accuracy_table(
    recordings: &[Vec<Vec<ScreenPoint<f64>>>],
    truth: &[ScreenPoint<f64>],
    geom: &ViewingGeometry<f64>,
) -> Result<Vec<PointStats>, StatsError> {
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| point_stats(i, recordings.get(i).map_or(&[][..], |r| &r[..]), *t, geom))
        .collect()
}

/// As [`accuracy_table`] but requires at least two trials per point.
pub fn precision_table(
    recordings: &[Vec<Vec<ScreenPoint<f64>>>],
    truth: &[ScreenPoint<f64>],
    geom: &ViewingGeometry<f64>,
) -> Result<Vec<PointStats>, StatsError> {
    let table = accuracy_table(recordings, truth, geom)?;
    if let Some(s) = table.iter().find(|s| s.n_trials < 2) {
        return Err(StatsError::TooFewTrials { got: s.n_trials, need: 2 });
    }
    Ok(table)
}

pub fn write_accuracy_csv<W: Write>(w: W, table: &[PointStats], labels: &[String]) -> Result<(), StatsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "point", "label", "planned_x_px", "planned_y_px", "measured_x_px", "measured_y_px", "dev_x_px", "dev_y_px",
        "dev_x_mm", "dev_y_mm", "dev_x_deg", "dev_y_deg", "n_samples",
    ])?;
    for s in table {
        out.write_record([
            s.point.to_string(),
            labels.get(s.point).cloned().unwrap_or_default(),
            s.true_px.x.to_string(),
            s.true_px.y.to_string(),
            s.mean_px.x.to_string(),
            s.mean_px.y.to_string(),
            s.abs_dev_px.x.to_string(),
            s.abs_dev_px.y.to_string(),
            s.abs_dev_mm.x.to_string(),
            s.abs_dev_mm.y.to_string(),
            s.abs_dev_deg.x.to_string(),
            s.abs_dev_deg.y.to_string(),
            s.n_samples.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_precision_csv<W: Write>(w: W, table: &[PointStats], labels: &[String]) -> Result<(), StatsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "point", "label", "planned_x_px", "planned_y_px", "sd_x_px", "sd_y_px", "sd_x_mm", "sd_y_mm", "sd_x_deg",
        "sd_y_deg", "n_trials", "n_samples",
    ])?;
    for s in table {
        out.write_record([
            s.point.to_string(),
            labels.get(s.point).cloned().unwrap_or_default(),
            s.true_px.x.to_string(),
            s.true_px.y.to_string(),
            s.sd_px.x.to_string(),
            s.sd_px.y.to_string(),
            s.sd_mm.x.to_string(),
            s.sd_mm.y.to_string(),
            s.sd_deg.x.to_string(),
            s.sd_deg.y.to_string(),
            s.n_trials.to_string(),
            s.n_samples.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MainSequenceFit {
    /// deg/s per deg
    pub slope: f64,
    pub intercept: f64,
    pub pv_at_10deg: f64,
    pub n: usize,
    pub r2: f64,
}

/// Ordinary least squares of peak velocity on amplitude over
/// `(amplitude_deg, peak_velocity_degps)` pairs.
pub fn fit_main_sequence(points: &[(f64, f64)]) -> Result<MainSequenceFit, StatsError> {
    let n = points.len();
    if n < 2 {
        return Err(StatsError::DegenerateFit);
    }
    let nf = n as f64;
    let ma = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mv = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx = points.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>();
    let sxy = points.iter().map(|p| (p.0 - ma) * (p.1 - mv)).sum::<f64>();
    let syy = points.iter().map(|p| (p.1 - mv).powi(2)).sum::<f64>();
    if sxx <= 0.0 {
        return Err(StatsError::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = mv - slope * ma;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(MainSequenceFit { slope, intercept, pv_at_10deg: intercept + 10.0 * slope, n, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: usize,
    pub b: usize,
    pub mean_diff: f64,
    #[serde(with = "lenient_f64")]
    pub t: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmAnovaResult {
    pub n_subjects: usize,
    pub k_conditions: usize,
    pub condition_means: Vec<f64>,
    pub ss_treatment: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
    pub df_treatment: f64,
    pub df_error: f64,
    #[serde(with = "lenient_f64")]
    pub f: f64,
    pub p_uncorrected: f64,
    pub partial_eta2: f64,
    /// Error variance is zero while treatment variance is not: F is +inf.
    pub zero_error_variance: bool,
    #[serde(with = "lenient_f64")]
    pub mauchly_w: f64,
    #[serde(with = "lenient_f64")]
    pub mauchly_chi2: f64,
    pub mauchly_df: f64,
    #[serde(with = "lenient_f64")]
    pub mauchly_p: f64,
    pub epsilon_gg: f64,
    pub epsilon_hf: f64,
    pub p_gg: f64,
    pub p_hf: f64,
    pub posthoc: Vec<PairwiseComparison>,
}

fn check_matrix(data: &[Vec<f64>]) -> Result<(usize, usize), StatsError> {
    let n = data.len();
    if n < 2 {
        return Err(StatsError::IncompleteData(format!("{n} subjects, need at least 2")));
    }
    let k = data[0].len();
    if k < 2 {
        return Err(StatsError::IncompleteData(format!("{k} conditions, need at least 2")));
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != k {
            return Err(StatsError::IncompleteData(format!("subject {i} has {} values, expected {k}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::IncompleteData(format!("subject {i} has a non-finite value")));
        }
    }
    Ok((n, k))
}

/// Orthonormal Helmert contrasts, `(k-1) x k`.
fn helmert(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k - 1, k, |r, c| {
        let m = (r + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        if c <= r {
            1.0 / norm
        } else if c == r + 1 {
            -m / norm
        } else {
            0.0
        }
    })
}

struct Sphericity {
    w: f64,
    chi2: f64,
    df: f64,
    p: f64,
    gg: f64,
    hf: f64,
}

fn sphericity(data: &[Vec<f64>], n: usize, k: usize) -> Sphericity {
    let p = k - 1;
    let pf = p as f64;
    let nf = n as f64;
    let x = DMatrix::from_fn(n, k, |i, j| data[i][j]);
    let means = x.row_mean();
    let centered = DMatrix::from_fn(n, k, |i, j| x[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / (nf - 1.0);
    let c = helmert(k);
    let t = &c * cov * c.transpose();
    let tr = t.trace();
    let tr2 = (&t * &t).trace();

    let gg = if tr > 0.0 && tr2 > 0.0 { (tr * tr / (pf * tr2)).clamp(1.0 / pf, 1.0) } else { 1.0 };
    let hf_den = pf * (nf - 1.0 - pf * gg);
    let hf = if hf_den > 0.0 { ((nf * pf * gg - 2.0) / hf_den).clamp(gg, 1.0) } else { 1.0 };

    if p == 1 {
        return Sphericity { w: 1.0, chi2: 0.0, df: 0.0, p: 1.0, gg: 1.0, hf: 1.0 };
    }
    let df = pf * (pf + 1.0) / 2.0 - 1.0;
    if !(tr > 0.0) {
        return Sphericity { w: f64::NAN, chi2: f64::NAN, df, p: f64::NAN, gg, hf };
    }
    let w = (t.determinant() / (tr / pf).powi(p as i32)).clamp(0.0, 1.0);
    let d = 1.0 - (2.0 * pf * pf + pf + 2.0) / (6.0 * pf * (nf - 1.0));
    let chi2 = -(nf - 1.0) * d * w.ln();
    Sphericity { w, chi2, df, p: chi2_sf(chi2, df), gg, hf }
}

/// One-way within-subjects ANOVA on an `n subjects x k conditions` matrix.
pub fn rm_anova(data: &[Vec<f64>]) -> Result<RmAnovaResult, StatsError> {
    let (n, k) = check_matrix(data)?;
    let (nf, kf) = (n as f64, k as f64);
    let grand = data.iter().flatten().sum::<f64>() / (nf * kf);
    let col_means: Vec<f64> = (0..k).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let row_means: Vec<f64> = data.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let ss_treatment = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_subjects = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    // Residuals directly, which keeps subject offsets from leaking into the error term.
    let ss_error = data
        .iter()
        .zip(&row_means)
        .flat_map(|(r, rm)| r.iter().zip(&col_means).map(move |(v, cm)| (v - rm - cm + grand).powi(2)))
        .sum::<f64>();
    let df_treatment = kf - 1.0;
    let df_error = (nf - 1.0) * (kf - 1.0);

    // Differences below rounding noise of the data count as exact zeros.
    let scale = data.iter().flatten().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let tiny = scale * 1e-24;
    let (ss_t, ss_e) = (if ss_treatment <= tiny { 0.0 } else { ss_treatment }, if ss_error <= tiny { 0.0 } else { ss_error });
    let (f, zero_error_variance) = match (ss_t > 0.0, ss_e > 0.0) {
        (_, true) => ((ss_t / df_treatment) / (ss_e / df_error), false),
        (true, false) => (f64::INFINITY, true),
        (false, false) => (0.0, false),
    };
    let partial_eta2 = if ss_t + ss_e > 0.0 { ss_t / (ss_t + ss_e) } else { 0.0 };
    let sph = sphericity(data, n, k);
    Ok(RmAnovaResult {
        n_subjects: n,
        k_conditions: k,
        condition_means: col_means,
        ss_treatment,
        ss_subjects,
        ss_error,
        df_treatment,
        df_error,
        f,
        p_uncorrected: f_sf(f, df_treatment, df_error),
        partial_eta2,
        zero_error_variance,
        mauchly_w: sph.w,
        mauchly_chi2: sph.chi2,
        mauchly_df: sph.df,
        mauchly_p: sph.p,
        epsilon_gg: sph.gg,
        epsilon_hf: sph.hf,
        p_gg: f_sf(f, df_treatment * sph.gg, df_error * sph.gg),
        p_hf: f_sf(f, df_treatment * sph.hf, df_error * sph.hf),
        posthoc: bonferroni_pairwise(data)?,
    })
}

/// Paired t-test for every condition pair, Bonferroni-adjusted.
pub fn bonferroni_pairwise(data: &[Vec<f64>]) -> Result<Vec<PairwiseComparison>, StatsError> {
    let (n, k) = check_matrix(data)?;
    let nf = n as f64;
    let m = (k * (k - 1) / 2) as f64;
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let d: Vec<f64> = data.iter().map(|r| r[a] - r[b]).collect();
            let mean = d.iter().sum::<f64>() / nf;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let scale = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let t = if var.sqrt() <= scale * 1e-12 {
                if mean.abs() <= scale * 1e-12 { 0.0 } else { f64::INFINITY.copysign(mean) }
            } else {
                mean / (var / nf).sqrt()
            };
            let df = nf - 1.0;
            let p_raw = t_two_sided(t, df);
            out.push(PairwiseComparison { a, b, mean_diff: mean, t, df, p_raw, p_adjusted: (p_raw * m).min(1.0) });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionBias {
    pub labels: Vec<String>,
    pub trials: (usize, usize),
    pub group_means: Vec<f64>,
    pub grand_mean: f64,
    pub percent_deviation: Vec<f64>,
    pub anova: RmAnovaResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PupilBias {
    pub horizontal: DirectionBias,
    pub vertical: DirectionBias,
}

fn direction_bias(
    pupil: &[Vec<f64>],
    range: (usize, usize),
    group_of: fn(usize) -> Option<usize>,
    labels: [&str; 3],
) -> Result<DirectionBias, StatsError> {
    let rows: Vec<Vec<f64>> = pupil[range.0..range.1]
        .iter()
        .map(|trial| {
            let mut sum = [0.0; 3];
            let mut cnt = [0usize; 3];
            for (i, v) in trial.iter().enumerate().take(9) {
                if let Some(g) = group_of(i) {
                    sum[g] += v;
                    cnt[g] += 1;
                }
            }
            (0..3).map(|g| sum[g] / cnt[g] as f64).collect()
        })
        .collect();
    let anova = rm_anova(&rows)?;
    let group_means = anova.condition_means.clone();
    let grand_mean = group_means.iter().sum::<f64>() / 3.0;
    Ok(DirectionBias {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        trials: (range.0 + 1, range.1),
        percent_deviation: group_means.iter().map(|m| 100.0 * (m - grand_mean) / grand_mean).collect(),
        group_means,
        grand_mean,
        anova,
    })
}

/// `pupil[trial][point]` is the mean fixation pupil size at each of the 13
/// grid points. The first half of the trials feeds the vertical analysis, the
/// second half the horizontal one. Groups are built from the outer nine
/// points; each group has three points, so the mean of the group means is the
/// grand mean of the nine.
pub fn pupil_direction_bias(pupil: &[Vec<f64>]) -> Result<PupilBias, StatsError> {
    let n = pupil.len();
    if n < 4 {
        return Err(StatsError::TooFewTrials { got: n, need: 4 });
    }
    for (i, t) in pupil.iter().enumerate() {
        if t.len() < 9 {
            return Err(StatsError::IncompleteData(format!("trial {i} has {} points, need 9", t.len())));
        }
    }
    let half = n / 2;
    Ok(PupilBias {
        vertical: direction_bias(pupil, (0, half), CalibrationGrid::row, ["up", "middle", "down"])?,
        horizontal: direction_bias(pupil, (half, n), CalibrationGrid::column, ["left", "middle", "right"])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn geom() -> ViewingGeometry<f64> {
        ViewingGeometry::default()
    }

    #[test]
    fn f_tail_matches_reference_quantiles() {
        // (F, d1, d2, upper tail) from an independent implementation.
        let table = [
            (12.0, 1.0, 2.0, 7.41799002274485392e-02),
            (0.015, 2.0, 394.0, 9.85112502138612123e-01),
            (0.115, 1.993, 74423.569, 8.90728906573822754e-01),
            (3.5, 2.0, 38.0, 4.02578496877199488e-02),
            (1.0, 1.0, 1.0, 5.00000000000000111e-01),
            (5.0, 3.0, 10.0, 2.26139227510962840e-02),
            (0.5, 4.0, 100.0, 7.35770903820060940e-01),
            (2.2, 2.5, 47.5, 1.10590931620494409e-01),
            (10.0, 2.0, 18.0, 1.20060507935859867e-03),
            (25.0, 1.0, 49.0, 7.73611644628905516e-06),
            (0.01, 1.0, 98.0, 9.20548611541441852e-01),
            (7.3, 2.0, 98.0, 1.10840014437971288e-03),
        ];
        for (f, a, b, p) in table {
            let got = f_sf(f, a, b);
            assert!((got - p).abs() <= 1e-8 * p.max(1e-3), "F({a},{b})={f}: {got} vs {p}");
        }
    }

    #[test]
    fn t_and_chi2_tails() {
        for (t, df, p) in [
            (3.4641016151377544, 2.0, 7.41799002274485392e-02),
            (2.0, 10.0, 7.33880347707403929e-02),
            (5.0, 49.0, 7.73611644628905685e-06),
            (0.3, 19.0, 7.67434660339263441e-01),
            (10.0, 3.0, 2.12839905841414939e-03),
        ] {
            assert_relative_eq!(t_two_sided(t, df), p, max_relative = 1e-8);
        }
        for (x, df, p) in [
            (1.0, 2.0, 6.06530659712633424e-01),
            (5.99, 2.0, 5.00366270865862869e-02),
            (0.5, 5.0, 9.92123293232629599e-01),
            (12.0, 9.0, 2.13309305083416528e-01),
            (30.0, 20.0, 6.98536606994098613e-02),
        ] {
            assert_relative_eq!(chi2_sf(x, df), p, max_relative = 1e-8);
        }
    }

    #[test]
    fn hand_case() {
        let r = rm_anova(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert_relative_eq!(r.ss_treatment, 6.0, epsilon = 1e-12);
        assert_relative_eq!(r.ss_subjects, 9.0, epsilon = 1e-12);
        assert_relative_eq!(r.ss_error, 1.0, epsilon = 1e-12);
        assert_eq!((r.df_treatment, r.df_error), (1.0, 2.0));
        assert_relative_eq!(r.f, 12.0, epsilon = 1e-12);
        assert_relative_eq!(r.partial_eta2, 6.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(r.p_uncorrected, 7.41799002274485392e-02, max_relative = 1e-9);
        assert_eq!((r.epsilon_gg, r.epsilon_hf, r.mauchly_p), (1.0, 1.0, 1.0));
        // k = 2: paired t equals sqrt(F).
        assert_eq!(r.posthoc.len(), 1);
        assert_relative_eq!(r.posthoc[0].t.abs(), 12f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(r.posthoc[0].p_adjusted, r.p_uncorrected, max_relative = 1e-9);
    }

    #[test]
    fn zero_treatment_variance() {
        let r = rm_anova(&[vec![10.0; 3], vec![20.0; 3], vec![30.0; 3]]).unwrap();
        assert_eq!((r.ss_treatment, r.f, r.partial_eta2, r.p_uncorrected), (0.0, 0.0, 0.0, 1.0));
        assert!(!r.zero_error_variance);
    }

    #[test]
    fn zero_error_variance_is_flagged() {
        let r = rm_anova(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0]]).unwrap();
        assert!(r.zero_error_variance);
        assert_eq!(r.f, f64::INFINITY);
        assert_eq!(r.p_uncorrected, 0.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: RmAnovaResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.f, f64::INFINITY);
    }

    #[test]
    fn sphericity_matches_independent_oracle() {
        let x = [
            [45.0, 50.0, 55.0],
            [42.0, 42.0, 45.0],
            [36.0, 41.0, 43.0],
            [39.0, 35.0, 40.0],
            [51.0, 55.0, 59.0],
            [44.0, 49.0, 56.0],
        ];
        let data: Vec<Vec<f64>> = x.iter().map(|r| r.to_vec()).collect();
        let r = rm_anova(&data).unwrap();
        // Eigenvalues of the double-centred covariance, computed elsewhere.
        assert_relative_eq!(r.ss_treatment, 143.44444444444423, max_relative = 1e-10);
        assert_relative_eq!(r.ss_subjects, 658.2777777777778, max_relative = 1e-10);
        assert_relative_eq!(r.ss_error, 57.222222222222285, max_relative = 1e-10);
        assert_relative_eq!(r.f, 12.53398058252424, max_relative = 1e-10);
        assert_relative_eq!(r.p_uncorrected, 0.0018855906470255548, max_relative = 1e-8);
        assert_relative_eq!(r.mauchly_w, 0.43353379206334014, max_relative = 1e-9);
        assert_relative_eq!(r.mauchly_p, 0.18795154886081947, max_relative = 1e-8);
        assert_relative_eq!(r.epsilon_gg, 0.6383795545243163, max_relative = 1e-9);
        assert_relative_eq!(r.epsilon_hf, 0.7601649772445159, max_relative = 1e-9);
        assert_relative_eq!(r.p_gg, 0.00898521528478086, max_relative = 1e-8);
        assert_relative_eq!(r.p_hf, 0.005284457777114261, max_relative = 1e-8);
        let raw: Vec<f64> = r.posthoc.iter().map(|c| c.p_raw).collect();
        for (got, want) in raw.iter().zip([0.16140644025856532, 0.010155708575652787, 0.0017639807039955934]) {
            assert_relative_eq!(*got, want, max_relative = 1e-8);
        }
        for c in &r.posthoc {
            assert_relative_eq!(c.p_adjusted, (3.0 * c.p_raw).min(1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_columns_give_unit_p() {
        let c = bonferroni_pairwise(&[vec![1.0, 1.0], vec![5.0, 5.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!((c[0].t, c[0].p_adjusted), (0.0, 1.0));
    }

    #[test]
    fn incomplete_data() {
        assert!(matches!(rm_anova(&[vec![1.0, 2.0]]), Err(StatsError::IncompleteData(_))));
        assert!(matches!(rm_anova(&[vec![1.0, 2.0], vec![1.0]]), Err(StatsError::IncompleteData(_))));
        assert!(matches!(rm_anova(&[vec![1.0], vec![1.0]]), Err(StatsError::IncompleteData(_))));
        assert!(matches!(rm_anova(&[vec![1.0, f64::NAN], vec![1.0, 2.0]]), Err(StatsError::IncompleteData(_))));
    }

    #[test]
    fn main_sequence_exact_line() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (4.0 + 0.5 * i as f64, 20.0 * (4.0 + 0.5 * i as f64) + 100.0)).collect();
        let f = fit_main_sequence(&pts).unwrap();
        assert_relative_eq!(f.slope, 20.0, epsilon = 1e-9);
        assert_relative_eq!(f.intercept, 100.0, epsilon = 1e-9);
        assert_relative_eq!(f.pv_at_10deg, 300.0, epsilon = 1e-9);
        assert_relative_eq!(f.r2, 1.0, epsilon = 1e-12);
        assert!(matches!(fit_main_sequence(&[(5.0, 1.0), (5.0, 2.0)]), Err(StatsError::DegenerateFit)));
    }

    #[test]
    fn main_sequence_of_analytic_profile() {
        use crate::motion::{peak_velocity_of_move, MotionProfile};
        let p = MotionProfile::<f64>::default();
        let pts: Vec<(f64, f64)> =
            (40..=125).map(|s| (s as f64 * 0.1125, peak_velocity_of_move(s as f64 * 0.1125, &p))).collect();
        let f = fit_main_sequence(&pts).unwrap();
        // Least-squares line through sqrt(9000 A) on [4.5, 14.1], evaluated at 10 deg.
        let oracle = 297.045621778703;
        assert!((f.pv_at_10deg - oracle).abs() / oracle < 0.05, "{}", f.pv_at_10deg);
    }

    fn ring(trials: usize, per_trial: usize, f: impl Fn(usize, usize) -> ScreenPoint<f64>) -> Vec<Vec<ScreenPoint<f64>>> {
        (0..trials).map(|t| (0..per_trial).map(|i| f(t, i)).collect()).collect()
    }

    #[test]
    fn conversion_oracle() {
        let truth = ScreenPoint::new(960.0, 540.0);
        let rec = vec![ring(2, 10, |_, _| ScreenPoint::new(970.0, 540.0))];
        let t = accuracy_table(&rec, &[truth], &geom()).unwrap();
        assert_relative_eq!(t[0].abs_dev_px.x, 10.0, epsilon = 1e-12);
        assert_relative_eq!(t[0].abs_dev_mm.x, 2.7675, epsilon = 1e-9);
        assert!((t[0].abs_dev_deg.x - 0.171).abs() < 5e-4);
        assert_eq!(t[0].abs_dev_px.y, 0.0);
        // 38.5 px on X is about 0.66 deg.
        let rec = vec![ring(1, 5, |_, _| ScreenPoint::new(998.5, 540.0))];
        let t = accuracy_table(&rec, &[truth], &geom()).unwrap();
        assert!((t[0].abs_dev_deg.x - 0.66).abs() < 0.005, "{}", t[0].abs_dev_deg.x);
    }

    #[test]
    fn precision_pooled_population_sd() {
        let truth = ScreenPoint::new(100.0, 100.0);
        let rec = vec![ring(4, 50, |_, i| ScreenPoint::new(if i % 2 == 0 { 101.0 } else { 99.0 }, 100.0))];
        let t = precision_table(&rec, &[truth], &geom()).unwrap();
        assert_relative_eq!(t[0].sd_px.x, 1.0, epsilon = 1e-12);
        assert_eq!(t[0].sd_px.y, 0.0);
        let same = vec![ring(3, 20, |_, _| ScreenPoint::new(50.0, 60.0))];
        assert_eq!(precision_table(&same, &[truth], &geom()).unwrap()[0].sd_px, AxisPair::default());
    }

    #[test]
    fn table_errors() {
        let truth = [ScreenPoint::new(1.0, 1.0), ScreenPoint::new(2.0, 2.0)];
        let rec = vec![ring(3, 2, |_, _| ScreenPoint::new(1.0, 1.0))];
        assert!(matches!(accuracy_table(&rec, &truth, &geom()), Err(StatsError::MissingPoint(1))));
        let rec = vec![ring(1, 2, |_, _| ScreenPoint::new(1.0, 1.0))];
        assert!(matches!(precision_table(&rec, &truth[..1], &geom()), Err(StatsError::TooFewTrials { .. })));
    }

    #[test]
    fn csv_tables_have_expected_columns() {
        let truth = ScreenPoint::new(960.0, 540.0);
        let rec = vec![ring(2, 3, |_, i| ScreenPoint::new(960.0 + i as f64, 541.0))];
        let t = precision_table(&rec, &[truth], &geom()).unwrap();
        let mut buf = Vec::new();
        write_accuracy_csv(&mut buf, &t, &["center".into()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("point,label,planned_x_px,planned_y_px,measured_x_px"));
        assert!(s.lines().nth(1).unwrap().starts_with("0,center,960,540,961,541,1,1,"));
        let mut buf = Vec::new();
        write_precision_csv(&mut buf, &t, &["center".into()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    fn bias_input(trials: usize, values: [f64; 9]) -> Vec<Vec<f64>> {
        (0..trials)
            .map(|t| {
                let mut row: Vec<f64> = values.iter().map(|v| v + 0.01 * ((t * 7 + 3) % 11) as f64).collect();
                row.extend([1000.0; 4]);
                row
            })
            .collect()
    }

    #[test]
    fn bias_groups_and_split() {
        // Order: center, top, bottom, left, right, top_left, top_right, bottom_left, bottom_right.
        let vals = [1000.0, 990.0, 1010.0, 1030.0, 970.0, 1020.0, 960.0, 1040.0, 980.0];
        let b = pupil_direction_bias(&bias_input(100, vals)).unwrap();
        assert_eq!(b.vertical.trials, (1, 50));
        assert_eq!(b.horizontal.trials, (51, 100));
        let h = &b.horizontal.group_means;
        assert!(h[0] > h[1] && h[1] > h[2]);
        let v = &b.vertical.group_means;
        assert!(v[2] > v[1] && v[2] > v[0]);
        let total: f64 = b.horizontal.percent_deviation.iter().sum();
        assert!(total.abs() < 1e-9);
        assert_relative_eq!(b.horizontal.percent_deviation[0], 100.0 * 30.0 / 1000.0, max_relative = 1e-3);
        assert!(matches!(pupil_direction_bias(&bias_input(3, vals)), Err(StatsError::TooFewTrials { .. })));
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..12, 2usize..6).prop_flat_map(|(n, k)| prop::collection::vec(prop::collection::vec(-100.0..100.0f64, k), n))
    }

    proptest! {
        #[test]
        fn subject_offsets_are_absorbed(data in matrix(), offsets in prop::collection::vec(-1e3..1e3f64, 12)) {
            let shifted: Vec<Vec<f64>> = data.iter().zip(&offsets).map(|(r, o)| r.iter().map(|v| v + o).collect()).collect();
            let a = rm_anova(&data).unwrap();
            let b = rm_anova(&shifted).unwrap();
            prop_assert!((a.f - b.f).abs() <= 1e-9 * a.f.max(1.0));
            prop_assert!((a.p_uncorrected - b.p_uncorrected).abs() <= 1e-9);
            prop_assert!((a.partial_eta2 - b.partial_eta2).abs() <= 1e-9);
        }

        #[test]
        fn permuting_conditions_keeps_f(data in matrix(), seed in any::<u64>()) {
            let k = data[0].len();
            let mut perm: Vec<usize> = (0..k).collect();
            let mut s = seed;
            for i in (1..k).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let permuted: Vec<Vec<f64>> = data.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let a = rm_anova(&data).unwrap();
            let b = rm_anova(&permuted).unwrap();
            prop_assert!((a.f - b.f).abs() <= 1e-9 * a.f.max(1.0));
            prop_assert!((a.epsilon_gg - b.epsilon_gg).abs() <= 1e-9);
        }

        #[test]
        fn epsilon_and_result_bounds(data in matrix()) {
            let r = rm_anova(&data).unwrap();
            let p = (r.k_conditions - 1) as f64;
            prop_assert!(r.epsilon_gg >= 1.0 / p - 1e-12 && r.epsilon_gg <= 1.0);
            prop_assert!(r.epsilon_hf >= r.epsilon_gg && r.epsilon_hf <= 1.0);
            prop_assert!(r.f >= 0.0);
            prop_assert!((0.0..=1.0).contains(&r.partial_eta2));
            for c in &r.posthoc {
                prop_assert!(c.p_adjusted <= 1.0 && c.p_adjusted >= c.p_raw);
            }
        }

        #[test]
        fn linear_fit_recovers_line(slope in -50.0..50.0f64, icpt in -500.0..500.0f64, n in 2usize..40) {
            let pts: Vec<(f64, f64)> = (0..n).map(|i| { let a = 1.0 + i as f64 * 0.37; (a, slope * a + icpt) }).collect();
            let f = fit_main_sequence(&pts).unwrap();
            prop_assert!((f.slope - slope).abs() < 1e-9);
            prop_assert!((f.intercept - icpt).abs() < 1e-9);
        }
    }
}
