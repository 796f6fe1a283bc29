//! P-CR tracking chain: pupil and glint detection, 13-point calibration and
//! the 1 kHz sample stream.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{gaze_to_screen_point_unbounded, screen_angle_deg, GazeDirection, ScreenPoint, ViewingGeometry};
use crate::motion::Timeline;
use crate::optics::{
    project_features, render_frame_into, CameraModel, EyeModel, GrayImage, OpticsError, PixelNoise, SceneCondition,
};

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("no pupil found")]
    NoPupil,
    #[error("no corneal reflection found")]
    NoCr,
    #[error("calibration failed at point {point}: residual {residual_deg} deg")]
    CalibrationFailed { point: usize, residual_deg: f64 },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error("invalid tracker configuration: {0}")]
    Invalid(String),
    #[error("log parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Largest acceptable calibration residual, degrees.
pub const CALIBRATION_TOLERANCE_DEG: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub x_px: f64,
    pub y_px: f64,
    pub pupil: f64,
}

/// One 1 kHz output record; `reading` is `None` while track is lost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_ms: i64,
    pub reading: Option<Reading>,
}

impl Sample {
    pub fn is_valid(&self) -> bool {
        self.reading.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    #[default]
    Analytic,
    Raster,
}

impl std::str::FromStr for TrackingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "raster" => Ok(Self::Raster),
            other => Err(format!("unknown mode '{other}' (expected analytic or raster)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    #[default]
    Area,
    Diameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Not part of the serialized form; experiments set it from their own `mode`.
    #[serde(skip)]
    pub mode: TrackingMode,
    pub size_mode: SizeMode,
    /// Dark-pixel threshold; `None` uses the midpoint of pupil and iris grays.
    pub pupil_threshold: Option<u8>,
    pub cr_threshold: u8,
    pub cr_dilate_px: u32,
    pub min_pupil_area_px: u32,
    /// System units per thresholded pixel.
    pub pupil_size_scale: f64,
    /// Standard deviation of additive sensor noise, gray levels.
    pub pixel_noise_sigma: f64,
    pub grid_inset_x: f64,
    pub grid_inset_y: f64,
    /// Frames averaged per calibration point.
    pub calibration_frames: u32,
    pub calibration_model: CalibrationModel,
}

/// Polynomial family of the calibration map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationModel {
    /// 1, u, v, uv, u^2, v^2.
    #[default]
    Quadratic,
    /// Full bivariate cubic (adds u^2 v, u v^2, u^3, v^3).
    Cubic,
}

impl CalibrationModel {
    pub fn n_terms(&self) -> usize {
        match self {
            Self::Quadratic => 6,
            Self::Cubic => 10,
        }
    }
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mode: TrackingMode::Analytic,
            size_mode: SizeMode::Area,
            pupil_threshold: None,
            cr_threshold: 200,
            cr_dilate_px: 2,
            min_pupil_area_px: 20,
            pupil_size_scale: 1.0,
            pixel_noise_sigma: 2.0,
            grid_inset_x: 0.06,
            grid_inset_y: 0.085,
            calibration_frames: 25,
            calibration_model: CalibrationModel::Quadratic,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let inset_ok = |f: f64| (0.0..0.5).contains(&f);
        if !inset_ok(self.grid_inset_x) || !inset_ok(self.grid_inset_y) {
            return Err(TrackerError::Invalid("grid insets must lie in [0, 0.5)".into()));
        }
        if !(self.pupil_size_scale > 0.0) || !(self.pixel_noise_sigma >= 0.0) {
            return Err(TrackerError::Invalid("pupil_size_scale > 0 and pixel_noise_sigma >= 0 required".into()));
        }
        if self.calibration_frames == 0 {
            return Err(TrackerError::Invalid("calibration_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn detector(&self, eye: &EyeModel<f64>) -> PupilDetector {
        PupilDetector {
            threshold: self.pupil_threshold.unwrap_or_else(|| eye.mid_threshold()),
            cr_threshold: self.cr_threshold,
            cr_dilate_px: self.cr_dilate_px,
            min_area_px: self.min_pupil_area_px,
            mode: self.size_mode,
            scale: self.pupil_size_scale,
        }
    }
}

/// The 13 calibration targets, in the usual order: center, top, bottom,
/// left, right, then the four corners and the four inner diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub inset_x: f64,
    pub inset_y: f64,
    pub points: Vec<ScreenPoint<f64>>,
}

pub const GRID_LABELS: [&str; 13] = [
    "center",
    "top",
    "bottom",
    "left",
    "right",
    "top_left",
    "top_right",
    "bottom_left",
    "bottom_right",
    "inner_top_left",
    "inner_top_right",
    "inner_bottom_left",
    "inner_bottom_right",
];

impl CalibrationGrid {
    pub fn new(geom: &ViewingGeometry<f64>, inset_x: f64, inset_y: f64) -> Self {
        let w = geom.screen_w_px as f64;
        let h = geom.screen_h_px as f64;
        let c = geom.screen_center_px;
        let (l, r) = (w * inset_x, w * (1.0 - inset_x));
        let (t, b) = (h * inset_y, h * (1.0 - inset_y));
        let (ix, iy) = ((c.x - l) / 2.0, (c.y - t) / 2.0);
        let p = ScreenPoint::new;
        let points = vec![
            p(c.x, c.y),
            p(c.x, t),
            p(c.x, b),
            p(l, c.y),
            p(r, c.y),
            p(l, t),
            p(r, t),
            p(l, b),
            p(r, b),
            p(c.x - ix, c.y - iy),
            p(c.x + ix, c.y - iy),
            p(c.x - ix, c.y + iy),
            p(c.x + ix, c.y + iy),
        ];
        Self { inset_x, inset_y, points }
    }

    pub fn from_config(geom: &ViewingGeometry<f64>, cfg: &TrackerConfig) -> Self {
        Self::new(geom, cfg.grid_inset_x, cfg.grid_inset_y)
    }

    /// Column of each outer point (0 left, 1 middle, 2 right); `None` for inner points.
    pub fn column(i: usize) -> Option<usize> {
        match i {
            0..=2 => Some(1),
            3 | 5 | 7 => Some(0),
            4 | 6 | 8 => Some(2),
            _ => None,
        }
    }

    /// Row of each outer point (0 up, 1 middle, 2 down); `None` for inner points.
    pub fn row(i: usize) -> Option<usize> {
        match i {
            0 | 3 | 4 => Some(1),
            1 | 5 | 6 => Some(0),
            2 | 7 | 8 => Some(2),
            _ => None,
        }
    }
}

/// Per-axis polynomial mapping from the P-CR vector (image px) to screen px.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub model: CalibrationModel,
    /// Centering and scale applied to the P-CR vector before the polynomial.
    pub offset: (f64, f64),
    pub scale: f64,
    /// Coefficients of 1, u, v, uv, u^2, v^2 (then u^2 v, u v^2, u^3, v^3) for screen x and y.
    pub coef_x: Vec<f64>,
    pub coef_y: Vec<f64>,
    pub residuals_deg: Vec<f64>,
}

fn poly_terms(u: f64, v: f64) -> [f64; 10] {
    [1.0, u, v, u * v, u * u, v * v, u * u * v, u * v * v, u * u * u, v * v * v]
}

impl CalibrationMap {
    pub fn apply(&self, pcr: (f64, f64)) -> ScreenPoint<f64> {
        let u = (pcr.0 - self.offset.0) / self.scale;
        let v = (pcr.1 - self.offset.1) / self.scale;
        let t = poly_terms(u, v);
        let dot = |c: &[f64]| c.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
        ScreenPoint::new(dot(&self.coef_x), dot(&self.coef_y))
    }

    pub fn max_residual_deg(&self) -> f64 {
        self.residuals_deg.iter().copied().fold(0.0, f64::max)
    }
}

/// Least-squares fit of the quadratic map. `observed[i]` is `None` when the
/// tracker lost the eye at grid point `i`.
pub fn calibrate(
    observed: &[Option<(f64, f64)>],
    grid: &CalibrationGrid,
    geom: &ViewingGeometry<f64>,
) -> Result<CalibrationMap, TrackerError> {
    calibrate_with(observed, grid, geom, CalibrationModel::Quadratic)
}

pub fn calibrate_with(
    observed: &[Option<(f64, f64)>],
    grid: &CalibrationGrid,
    geom: &ViewingGeometry<f64>,
    model: CalibrationModel,
) -> Result<CalibrationMap, TrackerError> {
    if observed.len() != grid.points.len() {
        return Err(TrackerError::Invalid(format!(
            "{} observations for {} grid points",
            observed.len(),
            grid.points.len()
        )));
    }
    let mut obs = Vec::with_capacity(observed.len());
    for (i, o) in observed.iter().enumerate() {
        match o {
            Some(v) if v.0.is_finite() && v.1.is_finite() => obs.push(*v),
            _ => return Err(TrackerError::CalibrationFailed { point: i, residual_deg: f64::INFINITY }),
        }
    }
    let n = obs.len() as f64;
    let offset = (obs.iter().map(|o| o.0).sum::<f64>() / n, obs.iter().map(|o| o.1).sum::<f64>() / n);
    let scale = obs
        .iter()
        .map(|o| (o.0 - offset.0).abs().max((o.1 - offset.1).abs()))
        .fold(0.0, f64::max)
        .max(1e-12);
    let k = model.n_terms();
    let a = DMatrix::from_fn(obs.len(), k, |r, c| {
        poly_terms((obs[r].0 - offset.0) / scale, (obs[r].1 - offset.1) / scale)[c]
    });
    let svd = a.svd(true, true);
    let solve = |rhs: DVector<f64>| -> Result<Vec<f64>, TrackerError> {
        let sol = svd
            .solve(&rhs, 1e-12)
            .map_err(|e| TrackerError::Invalid(format!("calibration solve: {e}")))?;
        Ok(sol.as_slice().to_vec())
    };
    let coef_x = solve(DVector::from_iterator(obs.len(), grid.points.iter().map(|p| p.x)))?;
    let coef_y = solve(DVector::from_iterator(obs.len(), grid.points.iter().map(|p| p.y)))?;
    let mut map = CalibrationMap { model, offset, scale, coef_x, coef_y, residuals_deg: Vec::new() };
    map.residuals_deg = obs.iter().zip(&grid.points).map(|(o, p)| screen_angle_deg(map.apply(*o), *p, geom)).collect();
    for (i, r) in map.residuals_deg.iter().enumerate() {
        if !(*r <= CALIBRATION_TOLERANCE_DEG) {
            return Err(TrackerError::CalibrationFailed { point: i, residual_deg: *r });
        }
    }
    Ok(map)
}

/// Dark-blob detector with glint exclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct PupilDetector {
    pub threshold: u8,
    pub cr_threshold: u8,
    pub cr_dilate_px: u32,
    pub min_area_px: u32,
    pub mode: SizeMode,
    pub scale: f64,
}

impl PupilDetector {
    pub fn new(threshold: u8, mode: SizeMode) -> Self {
        Self { threshold, cr_threshold: 200, cr_dilate_px: 2, min_area_px: 20, mode, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PupilMeasurement {
    pub center: (f64, f64),
    /// Thresholded pixel count, including filled glint pixels.
    pub area_px: f64,
    /// Area or equivalent diameter in system units.
    pub size: f64,
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PixelBox {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl PixelBox {
    fn grow(self, by: i64, img: &GrayImage) -> Self {
        Self {
            x0: (self.x0 - by).max(0),
            y0: (self.y0 - by).max(0),
            x1: (self.x1 + by).min(img.width as i64 - 1),
            y1: (self.y1 + by).min(img.height as i64 - 1),
        }
    }

    fn include(this: Option<Self>, x: i64, y: i64) -> Option<Self> {
        Some(match this {
            None => Self { x0: x, y0: y, x1: x, y1: y },
            Some(b) => Self { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x), y1: b.y1.max(y) },
        })
    }
}

/// Sparse probe grid used to find blobs before the full-resolution pass.
/// Any blob wider than `COARSE_STRIDE * sqrt(2)` contains a probe.
const COARSE_STRIDE: usize = 3;

fn coarse_box(img: &GrayImage, hit: impl Fn(u8) -> bool) -> Option<PixelBox> {
    let w = img.width as usize;
    let mut found = None;
    for y in (COARSE_STRIDE / 2..img.height as usize).step_by(COARSE_STRIDE) {
        let row = &img.data[y * w..(y + 1) * w];
        for x in (COARSE_STRIDE / 2..w).step_by(COARSE_STRIDE) {
            if hit(row[x]) {
                found = PixelBox::include(found, x as i64, y as i64);
            }
        }
    }
    found.map(|b| b.grow(COARSE_STRIDE as i64, img))
}

/// Exact box of the pixels matching `hit`, searched inside the coarse box and
/// falling back to a full scan when the probes miss a tiny blob.
fn blob_box(img: &GrayImage, hit: impl Fn(u8) -> bool + Copy) -> Option<PixelBox> {
    let full = PixelBox { x0: 0, y0: 0, x1: img.width as i64 - 1, y1: img.height as i64 - 1 };
    let search = coarse_box(img, hit).unwrap_or(full);
    let scan = |b: PixelBox| {
        let w = img.width as usize;
        let mut found = None;
        for y in b.y0..=b.y1 {
            let row = &img.data[y as usize * w..(y as usize + 1) * w];
            for x in b.x0..=b.x1 {
                if hit(row[x as usize]) {
                    found = PixelBox::include(found, x, y);
                }
            }
        }
        found
    };
    let exact = scan(search)?;
    // A blob touching the coarse box edge may extend beyond it.
    let touches = exact.x0 == search.x0 && search.x0 > 0
        || exact.y0 == search.y0 && search.y0 > 0
        || exact.x1 == search.x1 && search.x1 < full.x1
        || exact.y1 == search.y1 && search.y1 < full.y1;
    if touches {
        scan(full)
    } else {
        Some(exact)
    }
}

/// Dilated bright blob, over its bounding box.
struct GlintMask {
    area: PixelBox,
    w: i64,
    cells: Vec<bool>,
}

impl GlintMask {
    fn build(img: &GrayImage, threshold: u8, dilate: u32) -> Option<Self> {
        let bright = blob_box(img, |v| v >= threshold)?;
        let d = dilate as i64;
        let area = bright.grow(d, img);
        let w = area.x1 - area.x0 + 1;
        let h = area.y1 - area.y0 + 1;
        let mut cells = vec![false; (w * h) as usize];
        for y in bright.y0..=bright.y1 {
            for x in bright.x0..=bright.x1 {
                if img.get(x as u32, y as u32) >= threshold {
                    for yy in (y - d).max(area.y0)..=(y + d).min(area.y1) {
                        for xx in (x - d).max(area.x0)..=(x + d).min(area.x1) {
                            cells[((yy - area.y0) * w + (xx - area.x0)) as usize] = true;
                        }
                    }
                }
            }
        }
        Some(Self { area, w, cells })
    }

    #[inline]
    fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.area.x0
            && y >= self.area.y0
            && x <= self.area.x1
            && y <= self.area.y1
            && self.cells[((y - self.area.y0) * self.w + (x - self.area.x0)) as usize]
    }
}

impl PupilDetector {
    pub fn detect(&self, img: &GrayImage) -> Result<PupilMeasurement, TrackerError> {
        let thr = self.threshold;
        let dark_box = blob_box(img, |v| v <= thr).ok_or(TrackerError::NoPupil)?;
        let (mut n, mut sx, mut sy) = (0u64, 0u64, 0u64);
        let w = img.width as usize;
        for y in dark_box.y0..=dark_box.y1 {
            let row = &img.data[y as usize * w..(y as usize + 1) * w];
            let (mut rn, mut rx) = (0u64, 0u64);
            for x in dark_box.x0..=dark_box.x1 {
                if row[x as usize] <= thr {
                    rn += 1;
                    rx += x as u64;
                }
            }
            n += rn;
            sx += rx;
            sy += rn * y as u64;
        }
        let (mut n, mut sx, mut sy) = (n as f64, sx as f64 + 0.5 * n as f64, sy as f64 + 0.5 * n as f64);
        // Glint pixels count as pupil when the dark mask surrounds them along a row or column.
        if let Some(g) = GlintMask::build(img, self.cr_threshold, self.cr_dilate_px) {
            let dark = |x: i64, y: i64| {
                x >= 0 && y >= 0 && x < img.width as i64 && y < img.height as i64 && img.get(x as u32, y as u32) <= thr
            };
            for y in g.area.y0..=g.area.y1 {
                for x in g.area.x0..=g.area.x1 {
                    if !g.contains(x, y) || dark(x, y) {
                        continue;
                    }
                    let walk = |dx: i64, dy: i64| {
                        let (mut cx, mut cy) = (x, y);
                        while g.contains(cx, cy) {
                            cx += dx;
                            cy += dy;
                        }
                        dark(cx, cy)
                    };
                    if (walk(-1, 0) && walk(1, 0)) || (walk(0, -1) && walk(0, 1)) {
                        n += 1.0;
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                    }
                }
            }
        }
        if n < self.min_area_px.max(1) as f64 {
            return Err(TrackerError::NoPupil);
        }
        let size = match self.mode {
            SizeMode::Area => n * self.scale,
            SizeMode::Diameter => 2.0 * (n / std::f64::consts::PI).sqrt() * self.scale,
        };
        Ok(PupilMeasurement { center: (sx / n, sy / n), area_px: n, size })
    }
}

/// Center of mass of dark pixels, with the default glint exclusion.
pub fn detect_pupil_centroid(img: &GrayImage, threshold: u8, mode: SizeMode) -> Result<PupilMeasurement, TrackerError> {
    PupilDetector::new(threshold, mode).detect(img)
}

/// Glint center: the blob of pixels at or above `threshold_high`, located to
/// sub-pixel precision by intensity weighting above the local background
/// (brightest pixel of the ring around the blob, so a glint straddling the
/// pupil edge does not pick up the iris as signal).
pub fn detect_cr(img: &GrayImage, threshold_high: u8) -> Result<(f64, f64), TrackerError> {
    let blob = blob_box(img, |v| v >= threshold_high).ok_or(TrackerError::NoCr)?;
    let area = blob.grow(2, img);
    let mut ring = Vec::with_capacity(((area.x1 - area.x0 + area.y1 - area.y0 + 2) * 2) as usize);
    for y in area.y0..=area.y1 {
        for x in area.x0..=area.x1 {
            if x == area.x0 || x == area.x1 || y == area.y0 || y == area.y1 {
                ring.push(img.get(x as u32, y as u32));
            }
        }
    }
    let background = ring.iter().copied().max().unwrap_or(0) as f64;
    let (mut wsum, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for y in area.y0 + 1..area.y1 {
        for x in area.x0 + 1..area.x1 {
            let wt = (img.get(x as u32, y as u32) as f64 - background).max(0.0);
            wsum += wt;
            sx += wt * (x as f64 + 0.5);
            sy += wt * (y as f64 + 0.5);
        }
    }
    if wsum == 0.0 {
        return Err(TrackerError::NoCr);
    }
    Ok((sx / wsum, sy / wsum))
}

/// P-CR vector and pupil size for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub pcr: (f64, f64),
    pub pupil_size: f64,
}

/// Turns gaze directions into P-CR measurements, reusing a frame buffer.
pub struct FeatureExtractor<'a> {
    eye: &'a EyeModel<f64>,
    cam: &'a CameraModel<f64>,
    cfg: &'a TrackerConfig,
    detector: PupilDetector,
    frame: GrayImage,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(eye: &'a EyeModel<f64>, cam: &'a CameraModel<f64>, cfg: &'a TrackerConfig) -> Self {
        Self {
            eye,
            cam,
            cfg,
            detector: cfg.detector(eye),
            frame: GrayImage::new(cam.image_w_px, cam.image_h_px, 0),
        }
    }

    pub fn measure(
        &mut self,
        gaze: &GazeDirection<f64>,
        scene: &SceneCondition,
        rng: &mut dyn RngCore,
    ) -> Result<Measurement, TrackerError> {
        match self.cfg.mode {
            TrackingMode::Analytic => {
                let f = project_features(gaze, self.eye, self.cam);
                if !f.valid {
                    return Err(TrackerError::NoPupil);
                }
                let size = match self.cfg.size_mode {
                    SizeMode::Area => f.pupil_area_px2,
                    SizeMode::Diameter => 2.0 * (f.pupil_area_px2 / std::f64::consts::PI).sqrt(),
                } * self.cfg.pupil_size_scale;
                Ok(Measurement { pcr: f.pcr(), pupil_size: size })
            }
            TrackingMode::Raster => {
                let noise = (self.cfg.pixel_noise_sigma > 0.0)
                    .then(|| PixelNoise { rng, sigma_gray: self.cfg.pixel_noise_sigma });
                render_frame_into(&mut self.frame, gaze, self.eye, self.cam, scene, noise)?;
                let cr = detect_cr(&self.frame, self.cfg.cr_threshold)?;
                let p = self.detector.detect(&self.frame)?;
                Ok(Measurement { pcr: (p.center.0 - cr.0, p.center.1 - cr.1), pupil_size: p.size })
            }
        }
    }

    /// Last rendered frame (raster mode).
    pub fn frame(&self) -> &GrayImage {
        &self.frame
    }
}

/// Average P-CR vector over `cfg.calibration_frames` frames per grid point,
/// with the eye fixating each point; feeds [`calibrate`].
pub fn observe_grid(
    gazes: &[GazeDirection<f64>],
    eye: &EyeModel<f64>,
    cam: &CameraModel<f64>,
    scene: &SceneCondition,
    cfg: &TrackerConfig,
    rng: &mut dyn RngCore,
) -> Vec<Option<(f64, f64)>> {
    let mut fx = FeatureExtractor::new(eye, cam, cfg);
    let frames = match cfg.mode {
        TrackingMode::Analytic => 1,
        TrackingMode::Raster => cfg.calibration_frames,
    };
    gazes
        .iter()
        .map(|g| {
            let mut acc = (0.0, 0.0);
            for _ in 0..frames {
                let m = fx.measure(g, scene, rng).ok()?;
                acc.0 += m.pcr.0;
                acc.1 += m.pcr.1;
            }
            Some((acc.0 / frames as f64, acc.1 / frames as f64))
        })
        .collect()
}

/// Gaze directions that look exactly at each grid point.
pub fn grid_gazes(grid: &CalibrationGrid, geom: &ViewingGeometry<f64>) -> Vec<GazeDirection<f64>> {
    grid.points.iter().map(|p| crate::geometry::screen_point_to_gaze(*p, geom)).collect()
}

/// Calibrated tracker producing screen-space readings.
pub struct Tracker<'a> {
    pub extractor: FeatureExtractor<'a>,
    pub map: &'a CalibrationMap,
}

impl<'a> Tracker<'a> {
    pub fn new(
        eye: &'a EyeModel<f64>,
        cam: &'a CameraModel<f64>,
        cfg: &'a TrackerConfig,
        map: &'a CalibrationMap,
    ) -> Self {
        Self { extractor: FeatureExtractor::new(eye, cam, cfg), map }
    }

    pub fn read(&mut self, gaze: &GazeDirection<f64>, scene: &SceneCondition, rng: &mut dyn RngCore) -> Option<Reading> {
        let m = self.extractor.measure(gaze, scene, rng).ok()?;
        let p = self.map.apply(m.pcr);
        Some(Reading { x_px: p.x, y_px: p.y, pupil: m.pupil_size })
    }
}

/// Sample the timeline every millisecond from 0 through its end.
#[allow(clippy::too_many_arguments)]
pub fn run_tracker(
    timeline: &Timeline<f64>,
    eye: &EyeModel<f64>,
    cam: &CameraModel<f64>,
    scene: &SceneCondition,
    map: &CalibrationMap,
    cfg: &TrackerConfig,
    t0_ms: i64,
    rng: &mut dyn RngCore,
) -> Vec<Sample> {
    if timeline.is_empty() {
        return Vec::new();
    }
    let mut tracker = Tracker::new(eye, cam, cfg, map);
    let n = (timeline.duration_s() * 1000.0 + 1e-9).floor() as i64;
    (0..=n)
        .map(|i| {
            let g = timeline.gaze(i as f64 / 1000.0);
            Sample { t_ms: t0_ms + i, reading: tracker.read(&g, scene, rng) }
        })
        .collect()
}

/// Ground-truth screen position of a gaze (for tests and reports).
pub fn true_screen_point(g: &GazeDirection<f64>, geom: &ViewingGeometry<f64>) -> ScreenPoint<f64> {
    gaze_to_screen_point_unbounded(g, geom).unwrap_or(ScreenPoint::new(f64::NAN, f64::NAN))
}

/// Line of an ASC-like sample log.
#[derive(Debug, Clone, PartialEq)]
pub enum LogLine {
    Sample(Sample),
    Msg { t_ms: i64, text: String },
}

pub fn write_sample_line<W: Write>(w: &mut W, s: &Sample) -> std::io::Result<()> {
    match s.reading {
        Some(r) => writeln!(w, "{}\t{}\t{}\t{}", s.t_ms, r.x_px, r.y_px, r.pupil),
        None => writeln!(w, "{}\t.\t.\t0", s.t_ms),
    }
}

pub fn write_msg_line<W: Write>(w: &mut W, t_ms: i64, text: &str) -> std::io::Result<()> {
    writeln!(w, "MSG\t{t_ms}\t{text}")
}

pub fn write_log<W: Write>(w: &mut W, lines: &[LogLine]) -> std::io::Result<()> {
    for l in lines {
        match l {
            LogLine::Sample(s) => write_sample_line(w, s)?,
            LogLine::Msg { t_ms, text } => write_msg_line(w, *t_ms, text)?,
        }
    }
    Ok(())
}

pub fn parse_log_line(line: &str, lineno: usize) -> Result<Option<LogLine>, TrackerError> {
    let err = |msg: &str| TrackerError::Parse { line: lineno, msg: msg.to_string() };
    let line = line.trim_end_matches(['\r', '\n']);
    if line.is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields[0] == "MSG" {
        let t_ms = fields.get(1).ok_or_else(|| err("MSG without time"))?.parse().map_err(|_| err("bad MSG time"))?;
        let text = fields.get(2..).map(|f| f.join("\t")).unwrap_or_default();
        return Ok(Some(LogLine::Msg { t_ms, text }));
    }
    if fields.len() != 4 {
        return Err(err("expected 4 tab-separated fields"));
    }
    let t_ms = fields[0].parse().map_err(|_| err("bad time"))?;
    if fields[1] == "." {
        return Ok(Some(LogLine::Sample(Sample { t_ms, reading: None })));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
    Ok(Some(LogLine::Sample(Sample {
        t_ms,
        reading: Some(Reading { x_px: num(fields[1])?, y_px: num(fields[2])?, pupil: num(fields[3])? }),
    })))
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogLine>, TrackerError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        if let Some(l) = parse_log_line(&line?, i + 1)? {
            out.push(l);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{GimbalState, MotionProfile};
    use crate::optics::{project_cr, project_pupil};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> ViewingGeometry<f64> {
        ViewingGeometry::default()
    }

    fn gaze(y: f64, p: f64) -> GazeDirection<f64> {
        GazeDirection::from_degrees(y, p).unwrap()
    }

    fn disk_image(cx: f64, cy: f64, r: f64) -> GrayImage {
        let mut img = GrayImage::new(200, 200, 120);
        for y in 0..200 {
            for x in 0..200 {
                if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                    img.set(x, y, 10);
                }
            }
        }
        img
    }

    #[test]
    fn grid_matches_reported_corner() {
        let g = CalibrationGrid::from_config(&geom(), &TrackerConfig::default());
        assert_eq!(g.points.len(), 13);
        assert!((g.points[5].x - 115.2).abs() < 1e-9 && (g.points[5].y - 91.8).abs() < 1e-9);
        for p in &g.points {
            assert!(geom().contains_px(*p));
            // Four-fold symmetry about the center.
            let mirror = ScreenPoint::new(1920.0 - p.x, 1080.0 - p.y);
            assert!(g.points.iter().any(|q| (q.x - mirror.x).abs() < 1e-9 && (q.y - mirror.y).abs() < 1e-9));
        }
    }

    #[test]
    fn uniform_bright_image_has_no_pupil() {
        let img = GrayImage::new(64, 64, 200);
        assert!(matches!(detect_pupil_centroid(&img, 65, SizeMode::Area), Err(TrackerError::NoPupil)));
    }

    #[test]
    fn disk_centroid_and_area() {
        let img = disk_image(100.0, 100.0, 50.0);
        let m = detect_pupil_centroid(&img, 65, SizeMode::Area).unwrap();
        assert!((m.center.0 - 100.0).abs() < 0.1 && (m.center.1 - 100.0).abs() < 0.1);
        let area = std::f64::consts::PI * 2500.0;
        assert!((m.size - area).abs() / area < 0.02);
        let d = detect_pupil_centroid(&img, 65, SizeMode::Diameter).unwrap();
        assert!((d.size - 100.0).abs() < 1.0);
    }

    #[test]
    fn glint_inside_disk_is_filled() {
        let mut img = disk_image(100.0, 100.0, 30.0);
        for y in 108..112 {
            for x in 110..114 {
                img.set(x, y, 255);
            }
        }
        let with = detect_pupil_centroid(&img, 65, SizeMode::Area).unwrap();
        let clean = detect_pupil_centroid(&disk_image(100.0, 100.0, 30.0), 65, SizeMode::Area).unwrap();
        assert!((with.center.0 - clean.center.0).abs() < 1e-9);
        assert_eq!(with.area_px, clean.area_px);
    }

    #[test]
    fn cr_blob_position() {
        let mut img = GrayImage::new(50, 50, 10);
        for (x, y) in [(20, 30), (21, 30), (20, 31), (21, 31)] {
            img.set(x, y, 255);
        }
        let c = detect_cr(&img, 200).unwrap();
        assert!((c.0 - 21.0).abs() < 0.1 && (c.1 - 31.0).abs() < 0.1);
        assert!(matches!(detect_cr(&GrayImage::new(50, 50, 10), 200), Err(TrackerError::NoCr)));
    }

    #[test]
    fn subpixel_glint_position() {
        // Anti-aliased saturated disks at sub-pixel offsets, over a dark and a mid-gray base.
        for base in [10u8, 120] {
            for (dx, dy) in [(0.0, 0.0), (0.25, 0.0), (0.5, 0.4), (-0.3, 0.15)] {
                let (cx, cy) = (20.0 + dx, 20.0 + dy);
                let mut img = GrayImage::new(40, 40, base);
                for y in 0..40 {
                    for x in 0..40 {
                        let mut hits = 0;
                        for k in 0..256 {
                            let sx = x as f64 + (k % 16) as f64 / 16.0 + 1.0 / 32.0;
                            let sy = y as f64 + (k / 16) as f64 / 16.0 + 1.0 / 32.0;
                            if (sx - cx).hypot(sy - cy) <= 2.5 {
                                hits += 1;
                            }
                        }
                        let c = hits as f64 / 256.0;
                        img.set(x, y, (base as f64 * (1.0 - c) + 255.0 * c).round() as u8);
                    }
                }
                let d = detect_cr(&img, 200).unwrap();
                assert!((d.0 - cx).abs() < 0.1 && (d.1 - cy).abs() < 0.1, "{d:?} vs ({cx},{cy})");
            }
        }
    }

    #[test]
    fn rendered_features_match_analytic() {
        let eye = EyeModel::default();
        let cam = CameraModel::default();
        let det = TrackerConfig::default().detector(&eye);
        for (y, p) in [(0.0, 0.0), (12.0, 6.0), (-14.0, -7.0), (8.0, -6.5)] {
            let g = gaze(y, p);
            let img = crate::optics::render_frame(&g, &eye, &cam, &SceneCondition::dark(), None).unwrap();
            let ap = project_pupil(&g, &eye, &cam).unwrap();
            let acr = project_cr(&g, &eye, &cam).unwrap();
            let m = det.detect(&img).unwrap();
            assert!((m.center.0 - ap.center.0).hypot(m.center.1 - ap.center.1) < 0.2, "pupil at ({y},{p})");
            let cr = detect_cr(&img, 200).unwrap();
            // A glint straddling the pupil edge sees two backgrounds.
            assert!((cr.0 - acr.0).hypot(cr.1 - acr.1) < 0.25, "cr at ({y},{p}): {cr:?} vs {acr:?}");
        }
    }

    #[test]
    fn threshold_robust_centroid() {
        let eye = EyeModel::default();
        let cam = CameraModel::default();
        let g = gaze(5.0, 3.0);
        let img = crate::optics::render_frame(&g, &eye, &cam, &SceneCondition::light(), None).unwrap();
        let a = detect_pupil_centroid(&img, 40, SizeMode::Area).unwrap();
        let b = detect_pupil_centroid(&img, 90, SizeMode::Area).unwrap();
        assert!((a.center.0 - b.center.0).hypot(a.center.1 - b.center.1) < 0.2);
    }

    #[test]
    fn cr_is_brightness_blind() {
        let eye = EyeModel::default();
        let cam = CameraModel::default();
        let g = gaze(-3.0, 4.0);
        let centers: Vec<_> = SceneCondition::standard_set()
            .iter()
            .map(|s| detect_cr(&crate::optics::render_frame(&g, &eye, &cam, s, None).unwrap(), 200).unwrap())
            .collect();
        assert_eq!(centers[0], centers[1]);
        assert_eq!(centers[1], centers[2]);
    }

    #[test]
    fn affine_observations_fit_exactly() {
        let grid = CalibrationGrid::from_config(&geom(), &TrackerConfig::default());
        let obs: Vec<_> = grid.points.iter().map(|p| Some((0.02 * p.x - 0.003 * p.y + 1.0, 0.001 * p.x + 0.04 * p.y - 7.0))).collect();
        let map = calibrate(&obs, &grid, &geom()).unwrap();
        assert!(map.max_residual_deg() <= 1e-6);
    }

    #[test]
    fn invalid_observation_fails_calibration() {
        let grid = CalibrationGrid::from_config(&geom(), &TrackerConfig::default());
        let mut obs: Vec<_> = grid.points.iter().map(|p| Some((p.x, p.y))).collect();
        obs[4] = None;
        assert!(matches!(calibrate(&obs, &grid, &geom()), Err(TrackerError::CalibrationFailed { point: 4, .. })));
    }

    #[test]
    fn default_optics_calibrate_within_tolerance() {
        let cfg = TrackerConfig::default();
        let grid = CalibrationGrid::from_config(&geom(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = observe_grid(&grid_gazes(&grid, &geom()), &EyeModel::default(), &CameraModel::default(), &SceneCondition::dark(), &cfg, &mut rng);
        // Six terms cannot absorb the cubic terms of a flat screen; a full cubic can.
        let quad = calibrate(&obs, &grid, &geom()).unwrap();
        assert!(quad.max_residual_deg() <= 0.25, "{:?}", quad.residuals_deg);
        let cross = calibrate_with(&obs, &grid, &geom(), CalibrationModel::Cubic).unwrap();
        assert!(cross.max_residual_deg() <= 0.1, "{:?}", cross.residuals_deg);
    }

    fn calibrated(cfg: &TrackerConfig) -> CalibrationMap {
        let grid = CalibrationGrid::from_config(&geom(), cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = observe_grid(&grid_gazes(&grid, &geom()), &EyeModel::default(), &CameraModel::default(), &SceneCondition::dark(), cfg, &mut rng);
        calibrate_with(&obs, &grid, &geom(), cfg.calibration_model).unwrap()
    }

    #[test]
    fn dwell_stays_on_target_and_modes_agree() {
        let profile = MotionProfile::default();
        let target = GimbalState::new(60, -30).unwrap();
        let tl = Timeline::build(GimbalState::default(), [(target, target, 300.0, Some(0))], &profile);
        let eye = EyeModel::default();
        let cam = CameraModel::default();
        let analytic_cfg = TrackerConfig::default();
        let raster_cfg = TrackerConfig { mode: TrackingMode::Raster, ..TrackerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = run_tracker(&tl, &eye, &cam, &SceneCondition::medium(), &calibrated(&analytic_cfg), &analytic_cfg, 0, &mut rng);
        let r = run_tracker(&tl, &eye, &cam, &SceneCondition::medium(), &calibrated(&raster_cfg), &raster_cfg, 0, &mut rng);
        assert_eq!(a.len(), r.len());
        assert!(a.windows(2).all(|w| w[1].t_ms == w[0].t_ms + 1));

        let truth = true_screen_point(&target.gaze(), &geom());
        let dwell_start = (tl.segments[0].move_end_s() * 1000.0).ceil() as usize;
        for run in [&a, &r] {
            let dwell: Vec<Reading> = run[dwell_start..].iter().map(|s| s.reading.unwrap()).collect();
            let n = dwell.len() as f64;
            let mean = ScreenPoint::new(dwell.iter().map(|p| p.x_px).sum::<f64>() / n, dwell.iter().map(|p| p.y_px).sum::<f64>() / n);
            assert!(screen_angle_deg(mean, truth, &geom()) < 0.5);
            let near = dwell.iter().filter(|p| screen_angle_deg(ScreenPoint::new(p.x_px, p.y_px), mean, &geom()) < 0.05).count();
            assert!(near >= 290, "{near}");
        }

        let sq: f64 = a
            .iter()
            .zip(&r)
            .map(|(x, y)| {
                let (p, q) = (x.reading.unwrap(), y.reading.unwrap());
                screen_angle_deg(ScreenPoint::new(p.x_px, p.y_px), ScreenPoint::new(q.x_px, q.y_px), &geom()).powi(2)
            })
            .sum();
        let rms = (sq / a.len() as f64).sqrt();
        assert!(rms < 0.1, "rms {rms}");
    }

    #[test]
    fn empty_timeline_gives_no_samples() {
        let cfg = TrackerConfig::default();
        let tl = Timeline::<f64>::build(GimbalState::default(), [], &MotionProfile::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = run_tracker(&tl, &EyeModel::default(), &CameraModel::default(), &SceneCondition::dark(), &calibrated(&cfg), &cfg, 0, &mut rng);
        assert!(s.is_empty());
    }

    #[test]
    fn analytic_stream_is_brightness_blind() {
        let cfg = TrackerConfig::default();
        let map = calibrated(&cfg);
        let profile = MotionProfile::default();
        let tl = Timeline::build(
            GimbalState::default(),
            [(GimbalState::new(80, 20).unwrap(), GimbalState::new(80, 20).unwrap(), 300.0, None)],
            &profile,
        );
        let runs: Vec<Vec<Sample>> = SceneCondition::standard_set()
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                run_tracker(&tl, &EyeModel::default(), &CameraModel::default(), s, &map, &cfg, 0, &mut rng)
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[1], runs[2]);
    }

    #[test]
    fn log_round_trip_is_lossless() {
        let lines = vec![
            LogLine::Msg { t_ms: 0, text: "TRIAL 1 condition=dark".into() },
            LogLine::Sample(Sample { t_ms: 0, reading: Some(Reading { x_px: 960.123456789012, y_px: 1.0 / 3.0, pupil: 2888.94 }) }),
            LogLine::Sample(Sample { t_ms: 1, reading: None }),
        ];
        let mut buf = Vec::new();
        write_log(&mut buf, &lines).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("MSG\t0\tTRIAL 1 condition=dark\n0\t960.123456789012\t"));
        assert_eq!(read_log(&buf[..]).unwrap(), lines);
    }
}
