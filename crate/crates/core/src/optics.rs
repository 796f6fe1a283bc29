//! Virtual IR camera looking at the artificial eye.
//!
//! The pupil is a circular aperture of depth `iris_thickness_mm` centered on
//! the line of sight at the eyeball surface. Seen from the camera at an angle
//! `alpha` to the line of sight, the visible aperture is the overlap of the
//! front and back openings, whose width across the tilt is
//! `d cos(alpha) - t sin(alpha)`. The corneal reflection is the glint of the
//! IR LED on a convex spherical cornea.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GazeDirection, Vec3};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpticsError {
    #[error("pupil aperture fully occluded by the iris (alpha = {alpha_deg:.1} deg)")]
    PupilOccluded { alpha_deg: f64 },
    #[error("corneal reflection left the corneal cap")]
    CrLost,
    #[error("feature behind the camera")]
    BehindCamera,
    #[error("invalid optics model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EyeModel<T> {
    pub eyeball_radius_mm: T,
    pub pupil_diameter_mm: T,
    pub iris_thickness_mm: T,
    pub iris_diameter_mm: T,
    pub cornea_radius_mm: T,
    /// Distance of the corneal sphere center in front of the rotation center.
    pub cornea_center_offset_mm: T,
    pub pupil_gray: u8,
    pub iris_gray: u8,
    pub sclera_gray: u8,
    /// Rotation center in the world frame (nominally the origin).
    pub center_mm: Vec3<T>,
}

impl<T: Scalar> Default for EyeModel<T> {
    fn default() -> Self {
        Self {
            eyeball_radius_mm: T::lit(12.0),
            pupil_diameter_mm: T::lit(5.0),
            iris_thickness_mm: T::lit(0.05),
            iris_diameter_mm: T::lit(12.0),
            cornea_radius_mm: T::lit(7.8),
            cornea_center_offset_mm: T::lit(5.7),
            pupil_gray: 10,
            iris_gray: 120,
            sclera_gray: 190,
            center_mm: Vec3::zero(),
        }
    }
}

impl<T: Scalar> EyeModel<T> {
    pub fn validate(&self) -> Result<(), OpticsError> {
        let pos = [self.eyeball_radius_mm, self.pupil_diameter_mm, self.iris_diameter_mm, self.cornea_radius_mm];
        if pos.iter().any(|v| !(*v > T::zero())) {
            return Err(OpticsError::Invalid("eye dimensions must be positive".into()));
        }
        if self.iris_thickness_mm < T::zero() {
            return Err(OpticsError::Invalid("iris thickness must be non-negative".into()));
        }
        if self.pupil_gray >= self.iris_gray {
            return Err(OpticsError::Invalid("pupil must be darker than the iris".into()));
        }
        Ok(())
    }

    /// Gray level halfway between pupil and iris.
    pub fn mid_threshold(&self) -> u8 {
        ((self.pupil_gray as u16 + self.iris_gray as u16) / 2) as u8
    }

    /// Half-angle (radians, about the corneal center) of the corneal cap that
    /// protrudes from the eyeball sphere.
    pub fn corneal_cap_half_angle(&self) -> T {
        let r_eye = self.eyeball_radius_mm;
        let c = self.cornea_center_offset_mm;
        let r = self.cornea_radius_mm;
        let cos = (r_eye * r_eye - c * c - r * r) / (T::two() * c * r);
        cos.max(-T::one()).min(T::one()).acos()
    }

    fn pupil_plane_center(&self, g: Vec3<T>) -> Vec3<T> {
        self.center_mm + g * self.eyeball_radius_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel<T> {
    pub position_mm: Vec3<T>,
    /// Point on the optical axis.
    pub look_at_mm: Vec3<T>,
    pub focal_px: T,
    pub image_w_px: u32,
    pub image_h_px: u32,
    pub ir_led_position_mm: Vec3<T>,
    /// Radius of the saturated glint disk.
    pub glint_radius_px: T,
    /// Fraction of the display background gray that leaks into the IR image.
    pub ambient_gain: T,
}

impl<T: Scalar> Default for CameraModel<T> {
    fn default() -> Self {
        let position = Vec3::new(T::lit(-72.0), T::lit(-60.0), T::lit(530.0));
        Self {
            position_mm: position,
            look_at_mm: Vec3::new(T::zero(), T::zero(), T::lit(12.0)),
            focal_px: T::lit(5600.0),
            image_w_px: 160,
            image_h_px: 128,
            ir_led_position_mm: position,
            glint_radius_px: T::lit(2.5),
            ambient_gain: T::zero(),
        }
    }
}

/// Orthonormal camera frame: image x (right), image y (down), optical axis.
#[derive(Debug, Clone, Copy)]
struct CameraFrame<T> {
    right: Vec3<T>,
    down: Vec3<T>,
    forward: Vec3<T>,
}

impl<T: Scalar> CameraModel<T> {
    pub fn validate(&self) -> Result<(), OpticsError> {
        if !(self.focal_px > T::zero()) || self.image_w_px == 0 || self.image_h_px == 0 {
            return Err(OpticsError::Invalid("camera needs positive focal length and image size".into()));
        }
        if self.frame().is_none() {
            return Err(OpticsError::Invalid("degenerate optical axis".into()));
        }
        Ok(())
    }

    fn frame(&self) -> Option<CameraFrame<T>> {
        let forward = (self.look_at_mm - self.position_mm).normalized()?;
        let up = Vec3::new(T::zero(), T::one(), T::zero());
        let right = forward.cross(up).normalized()?;
        let down = forward.cross(right);
        Some(CameraFrame { right, down, forward })
    }

    /// Principal point (image center).
    pub fn principal_point(&self) -> (T, T) {
        (T::lit(self.image_w_px as f64) * T::half(), T::lit(self.image_h_px as f64) * T::half())
    }

    /// Pinhole projection to continuous image coordinates (pixel `(i, j)`
    /// covers `[i, i+1) x [j, j+1)`).
    pub fn project(&self, p: Vec3<T>) -> Result<(T, T), OpticsError> {
        let f = self.frame().ok_or_else(|| OpticsError::Invalid("degenerate optical axis".into()))?;
        let v = p - self.position_mm;
        let depth = v.dot(f.forward);
        if !(depth > T::zero()) {
            return Err(OpticsError::BehindCamera);
        }
        let (cx, cy) = self.principal_point();
        Ok((cx + self.focal_px * v.dot(f.right) / depth, cy + self.focal_px * v.dot(f.down) / depth))
    }

    fn depth(&self, p: Vec3<T>) -> T {
        self.frame().map(|f| (p - self.position_mm).dot(f.forward)).unwrap_or_else(T::zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Brightness {
    Dark,
    Medium,
    Light,
}

impl Brightness {
    pub fn name(&self) -> &'static str {
        match self {
            Brightness::Dark => "dark",
            Brightness::Medium => "medium",
            Brightness::Light => "light",
        }
    }
}

impl std::fmt::Display for Brightness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Brightness {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dark" => Ok(Brightness::Dark),
            "medium" => Ok(Brightness::Medium),
            "light" => Ok(Brightness::Light),
            other => Err(format!("unknown brightness condition '{other}'")),
        }
    }
}

/// Display brightness condition: background and target gray levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCondition {
    pub name: Brightness,
    pub background_gray: u8,
    pub target_gray: u8,
}

impl SceneCondition {
    pub fn dark() -> Self {
        Self { name: Brightness::Dark, background_gray: 30, target_gray: 158 }
    }

    pub fn medium() -> Self {
        Self { name: Brightness::Medium, background_gray: 128, target_gray: 12 }
    }

    pub fn light() -> Self {
        Self { name: Brightness::Light, background_gray: 220, target_gray: 18 }
    }

    pub fn standard_set() -> Vec<Self> {
        vec![Self::dark(), Self::medium(), Self::light()]
    }

    /// Michelson contrast between target and background.
    pub fn michelson_contrast(&self) -> f64 {
        let t = self.target_gray as f64;
        let b = self.background_gray as f64;
        if t + b == 0.0 {
            0.0
        } else {
            (t - b).abs() / (t + b)
        }
    }
}

/// Apparent pupil ellipse in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilProjection<T> {
    pub center: (T, T),
    pub major_px: T,
    pub minor_px: T,
    /// Angle of the major axis against the image x axis, radians.
    pub orientation: T,
    pub area_px2: T,
    /// Angle between line of sight and the direction to the camera, radians.
    pub alpha: T,
}

/// Everything the tracker can observe in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedFeatures<T> {
    pub pupil_center_img: (T, T),
    pub pupil_major_px: T,
    pub pupil_minor_px: T,
    pub pupil_orientation: T,
    pub pupil_area_px2: T,
    pub cr_center_img: (T, T),
    pub valid: bool,
}

impl<T: Scalar> ProjectedFeatures<T> {
    pub fn invalid() -> Self {
        Self {
            pupil_center_img: (T::zero(), T::zero()),
            pupil_major_px: T::zero(),
            pupil_minor_px: T::zero(),
            pupil_orientation: T::zero(),
            pupil_area_px2: T::zero(),
            cr_center_img: (T::zero(), T::zero()),
            valid: false,
        }
    }

    /// Pupil-minus-CR vector in image pixels.
    pub fn pcr(&self) -> (T, T) {
        (self.pupil_center_img.0 - self.cr_center_img.0, self.pupil_center_img.1 - self.cr_center_img.1)
    }
}

/// Width of the visible aperture (mm) across the tilt direction.
pub fn tube_aperture_minor_mm<T: Scalar>(diameter: T, thickness: T, alpha: T) -> T {
    (diameter * alpha.cos() - thickness * alpha.sin()).max(T::zero())
}

pub fn project_pupil<T: Scalar>(
    gaze: &GazeDirection<T>,
    eye: &EyeModel<T>,
    cam: &CameraModel<T>,
) -> Result<PupilProjection<T>, OpticsError> {
    let g = gaze.unit_vector();
    let front = eye.pupil_plane_center(g);
    // Centroid of the visible aperture: halfway down the tube.
    let centroid = front - g * (eye.iris_thickness_mm * T::half());
    let to_cam = (cam.position_mm - centroid).normalized().ok_or(OpticsError::BehindCamera)?;
    let cos_a = g.dot(to_cam).max(-T::one()).min(T::one());
    let alpha = cos_a.acos();
    let minor_mm = tube_aperture_minor_mm(eye.pupil_diameter_mm, eye.iris_thickness_mm, alpha);
    if cos_a <= T::zero() || minor_mm <= T::zero() {
        return Err(OpticsError::PupilOccluded { alpha_deg: alpha.to_degrees().as_f64() });
    }
    let center = cam.project(centroid)?;
    let mag = cam.focal_px / cam.depth(centroid);
    let major_px = eye.pupil_diameter_mm * mag;
    let minor_px = minor_mm * mag;

    // The ellipse is compressed along the image of the tilt direction.
    let tilt = g - to_cam * cos_a;
    let orientation = match tilt.normalized() {
        Some(t) if tilt.norm() > T::lit(1e-9) => {
            let tip = cam.project(centroid + t * T::lit(0.1))?;
            let minor_dir = (tip.1 - center.1).atan2(tip.0 - center.0);
            wrap_half_turn(minor_dir + T::FRAC_PI_2())
        }
        _ => T::zero(),
    };
    let area_px2 = T::PI() * major_px * minor_px * T::lit(0.25);
    Ok(PupilProjection { center, major_px, minor_px, orientation, area_px2, alpha })
}

fn wrap_half_turn<T: Scalar>(mut a: T) -> T {
    let pi = T::PI();
    while a > T::FRAC_PI_2() {
        a = a - pi;
    }
    while a <= -T::FRAC_PI_2() {
        a = a + pi;
    }
    a
}

/// 3D glint point on the corneal sphere that reflects the LED into the camera.
pub fn corneal_glint_point<T: Scalar>(
    gaze: &GazeDirection<T>,
    eye: &EyeModel<T>,
    cam: &CameraModel<T>,
) -> Result<Vec3<T>, OpticsError> {
    let g = gaze.unit_vector();
    let s = eye.center_mm + g * eye.cornea_center_offset_mm;
    let r = eye.cornea_radius_mm;
    let bisector = |q: Vec3<T>| -> Option<Vec3<T>> {
        let a = (cam.ir_led_position_mm - q).normalized()?;
        let b = (cam.position_mm - q).normalized()?;
        (a + b).normalized()
    };
    let mut n = bisector(s).ok_or(OpticsError::CrLost)?;
    for _ in 0..50 {
        let next = bisector(s + n * r).ok_or(OpticsError::CrLost)?;
        let delta = (next - n).norm();
        n = next;
        if delta < T::lit(1e-13) {
            break;
        }
    }
    if n.angle_to(g) > eye.corneal_cap_half_angle() {
        return Err(OpticsError::CrLost);
    }
    Ok(s + n * r)
}

/// Image position of the corneal reflection.
pub fn project_cr<T: Scalar>(
    gaze: &GazeDirection<T>,
    eye: &EyeModel<T>,
    cam: &CameraModel<T>,
) -> Result<(T, T), OpticsError> {
    cam.project(corneal_glint_point(gaze, eye, cam)?)
}

/// Analytic features; `valid = false` when either feature is lost.
pub fn project_features<T: Scalar>(
    gaze: &GazeDirection<T>,
    eye: &EyeModel<T>,
    cam: &CameraModel<T>,
) -> ProjectedFeatures<T> {
    match (project_pupil(gaze, eye, cam), project_cr(gaze, eye, cam)) {
        (Ok(p), Ok(cr)) => ProjectedFeatures {
            pupil_center_img: p.center,
            pupil_major_px: p.major_px,
            pupil_minor_px: p.minor_px,
            pupil_orientation: p.orientation,
            pupil_area_px2: p.area_px2,
            cr_center_img: cr,
            valid: true,
        },
        _ => ProjectedFeatures::invalid(),
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, fill: u8) -> Self {
        Self { width, height, data: vec![fill; width as usize * height as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Option<Self> {
        // Header: magic, width, height, maxval, each whitespace-separated.
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return None;
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).ok()?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return None;
        }
        let width: u32 = fields[1].parse().ok()?;
        let height: u32 = fields[2].parse().ok()?;
        let data = bytes.get(i + 1..)?.to_vec();
        (data.len() == width as usize * height as usize).then_some(Self { width, height, data })
    }
}

/// Filled ellipse in image coordinates.
#[derive(Debug, Clone, Copy)]
struct EllipseShape {
    cx: f64,
    cy: f64,
    // Implicit form A dx^2 + B dx dy + C dy^2 <= 1.
    qa: f64,
    qb: f64,
    qc: f64,
    /// Half extents of the bounding box.
    hx: f64,
    hy: f64,
}

/// Column ranges of one pixel row: `[outer.0, inner.0)` and `[inner.1, outer.1)`
/// are partially covered, `[inner.0, inner.1)` fully covered.
#[derive(Debug, Clone, Copy)]
struct RowSpan {
    outer: (i64, i64),
    inner: (i64, i64),
}

impl EllipseShape {
    fn new(center: (f64, f64), major: f64, minor: f64, orientation: f64) -> Self {
        let a = (major * 0.5).max(1e-9);
        let b = (minor * 0.5).max(1e-9);
        let (s, c) = orientation.sin_cos();
        let (ia, ib) = (1.0 / (a * a), 1.0 / (b * b));
        let qa = c * c * ia + s * s * ib;
        let qb = 2.0 * c * s * (ia - ib);
        let qc = s * s * ia + c * c * ib;
        let det = 4.0 * qa * qc - qb * qb;
        Self { cx: center.0, cy: center.1, qa, qb, qc, hx: (4.0 * qc / det).sqrt(), hy: (4.0 * qa / det).sqrt() }
    }

    fn circle(center: (f64, f64), radius: f64) -> Self {
        Self::new(center, 2.0 * radius, 2.0 * radius, 0.0)
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        self.qa * dx * dx + self.qb * dx * dy + self.qc * dy * dy <= 1.0
    }

    /// Horizontal chord at offset `dy` from the center, as absolute x.
    fn chord(&self, dy: f64) -> Option<(f64, f64)> {
        let bq = self.qb * dy;
        let disc = bq * bq - 4.0 * self.qa * (self.qc * dy * dy - 1.0);
        if disc < 0.0 {
            return None;
        }
        let r = disc.sqrt();
        Some((self.cx + (-bq - r) / (2.0 * self.qa), self.cx + (-bq + r) / (2.0 * self.qa)))
    }

    /// Coverage spans of pixel row `py` (covering `[py, py+1)`).
    fn row_span(&self, py: i64) -> Option<RowSpan> {
        let (y0, y1) = (py as f64 - self.cy, py as f64 + 1.0 - self.cy);
        if y1 < -self.hy || y0 > self.hy {
            return None;
        }
        let top = self.chord(y0);
        let bottom = self.chord(y1);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in [top, bottom].into_iter().flatten() {
            lo = lo.min(c.0);
            hi = hi.max(c.1);
        }
        // Leftmost/rightmost points of the ellipse when they fall inside the row.
        let ey = -self.qb * self.hx / (2.0 * self.qc);
        if (y0..=y1).contains(&-ey) {
            lo = lo.min(self.cx - self.hx);
        }
        if (y0..=y1).contains(&ey) {
            hi = hi.max(self.cx + self.hx);
        }
        if lo > hi {
            // Row only grazes the top or bottom tip.
            let tip = if y1 < 0.0 { self.chord(-self.hy) } else { self.chord(self.hy) };
            let x = tip.map(|c| 0.5 * (c.0 + c.1)).unwrap_or(self.cx);
            lo = x;
            hi = x;
        }
        let outer = (lo.floor() as i64, hi.floor() as i64 + 1);
        let inner = match (top, bottom) {
            (Some(t), Some(b)) => {
                let (l, r) = (t.0.max(b.0).ceil() as i64, t.1.min(b.1).floor() as i64);
                if l < r {
                    (l, r)
                } else {
                    (outer.0, outer.0)
                }
            }
            _ => (outer.0, outer.0),
        };
        Some(RowSpan { outer, inner })
    }

    /// Fraction of pixel `(px, py)` inside, by 4x4 supersampling.
    fn coverage(&self, px: f64, py: f64) -> f64 {
        const N: usize = 4;
        let mut hits = 0;
        for sy in 0..N {
            for sx in 0..N {
                if self.contains(px + (sx as f64 + 0.5) / N as f64, py + (sy as f64 + 0.5) / N as f64) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (N * N) as f64
    }

    /// Composite `gray` over the image with anti-aliased edges.
    fn paint(&self, img: &mut GrayImage, gray: u8) {
        let (w, h) = (img.width as i64, img.height as i64);
        let y_start = ((self.cy - self.hy).floor() as i64).max(0);
        let y_end = ((self.cy + self.hy).floor() as i64 + 1).min(h);
        for py in y_start..y_end {
            let Some(span) = self.row_span(py) else { continue };
            let row = &mut img.data[(py * w) as usize..((py + 1) * w) as usize];
            let clip = |x: i64| x.clamp(0, w);
            let (o0, o1) = (clip(span.outer.0), clip(span.outer.1));
            let (i0, i1) = (clip(span.inner.0).max(o0), clip(span.inner.1).min(o1));
            let (i0, i1) = if i0 < i1 { (i0, i1) } else { (o1, o1) };
            for px in (o0..i0).chain(i1..o1) {
                let c = self.coverage(px as f64, py as f64);
                if c > 0.0 {
                    let v = &mut row[px as usize];
                    *v = (*v as f64 * (1.0 - c) + gray as f64 * c + 0.5) as u8;
                }
            }
            row[i0 as usize..i1 as usize].fill(gray);
        }
    }
}

/// Per-frame pixel noise: Gaussian-like with standard deviation `sigma_gray`.
pub struct PixelNoise<'a> {
    pub rng: &'a mut dyn RngCore,
    pub sigma_gray: f64,
}

/// Rasterize the eye as seen by the IR camera.
pub fn render_frame<T: Scalar>(
    gaze: &GazeDirection<T>,
    eye: &EyeModel<T>,
    cam: &CameraModel<T>,
    scene: &SceneCondition,
    noise: Option<PixelNoise<'_>>,
) -> Result<GrayImage, OpticsError> {
    let mut img = GrayImage::new(cam.image_w_px, cam.image_h_px, 0);
    render_frame_into(&mut img, gaze, eye, cam, scene, noise)?;
    Ok(img)
}

/// Same as [`render_frame`], reusing `img`'s buffer.
pub fn render_frame_into<T: Scalar>(
    img: &mut GrayImage,
    gaze: &GazeDirection<T>,
    eye: &EyeModel<T>,
    cam: &CameraModel<T>,
    scene: &SceneCondition,
    noise: Option<PixelNoise<'_>>,
) -> Result<(), OpticsError> {
    let pupil = project_pupil(gaze, eye, cam)?;
    let cr = project_cr(gaze, eye, cam)?;
    let (w, h) = (cam.image_w_px, cam.image_h_px);
    if img.width != w || img.height != h {
        *img = GrayImage::new(w, h, 0);
    }

    // Iris: the front opening plane, foreshortened but not tube-narrowed.
    let g = gaze.unit_vector();
    let front = eye.pupil_plane_center(g);
    let iris_center = cam.project(front)?;
    let mag = cam.focal_px / cam.depth(front);
    let iris_major = (eye.iris_diameter_mm * mag).as_f64();
    let iris = EllipseShape::new(
        (iris_center.0.as_f64(), iris_center.1.as_f64()),
        iris_major,
        iris_major * pupil.alpha.cos().as_f64(),
        pupil.orientation.as_f64(),
    );
    let pupil_shape = EllipseShape::new(
        (pupil.center.0.as_f64(), pupil.center.1.as_f64()),
        pupil.major_px.as_f64(),
        pupil.minor_px.as_f64(),
        pupil.orientation.as_f64(),
    );
    let glint = EllipseShape::circle((cr.0.as_f64(), cr.1.as_f64()), cam.glint_radius_px.as_f64().max(0.1));

    let ambient = (eye.sclera_gray as f64 + cam.ambient_gain.as_f64() * scene.background_gray as f64).min(255.0);
    img.data.fill((ambient + 0.5) as u8);
    iris.paint(img, eye.iris_gray);
    pupil_shape.paint(img, eye.pupil_gray);
    glint.paint(img, 255);

    if let Some(n) = noise.filter(|n| n.sigma_gray > 0.0) {
        NOISE_TABLE.with(|cell| {
            let mut cached = cell.borrow_mut();
            if cached.as_ref().map(|t| t.sigma != n.sigma_gray).unwrap_or(true) {
                *cached = Some(NoiseTable::new(n.sigma_gray));
            }
            let table = &cached.as_ref().expect("noise table").values;
            let mut fast = rand::rngs::SmallRng::seed_from_u64(n.rng.next_u64());
            for chunk in img.data.chunks_mut(4) {
                let r: u64 = fast.gen();
                for (k, v) in chunk.iter_mut().enumerate() {
                    let offset = table[((r >> (16 * k)) & 0xffff) as usize];
                    *v = (*v as i16 + offset).clamp(0, 255) as u8;
                }
            }
        });
    }
    Ok(())
}

/// 65536 integer noise offsets whose empirical distribution is an Irwin-Hall
/// (sum of four uniforms) approximation of a Gaussian with deviation `sigma`.
/// Indexing it with uniform 16-bit draws gives integer-valued sensor noise;
/// adding an integer offset to an integer gray equals rounding after adding.
struct NoiseTable {
    sigma: f64,
    values: Vec<i16>,
}

impl NoiseTable {
    fn new(sigma: f64) -> Self {
        let mut rng = rand::rngs::SmallRng::seed_from_u64(0x5eed_0f_0015e);
        let scale = sigma / (4.0 / 12.0_f64).sqrt();
        let values = (0..65536)
            .map(|_| {
                let s: f64 = (0..4).map(|_| rng.gen::<f64>()).sum::<f64>() - 2.0;
                (s * scale).round().clamp(-255.0, 255.0) as i16
            })
            .collect();
        Self { sigma, values }
    }
}

thread_local! {
    static NOISE_TABLE: std::cell::RefCell<Option<NoiseTable>> = const { std::cell::RefCell::new(None) };
}
