//! Unit conversions and ray geometry: micro-steps, pulse rates, visual angle,
//! gaze/screen intersection and the laser-mirror reflection.
//!
//! World frame used everywhere in this crate: origin at the eye's rotation
//! center, `x` to the right, `y` up, `z` from the eye towards the screen.
//! Screen pixels grow to the right and downwards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Eye rotation per stepper micro-step (16x micro-stepping), in degrees.
pub const MICROSTEP_DEG: f64 = 0.1125;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("gaze ray hits the screen plane outside the panel at ({x_px:.1}, {y_px:.1}) px")]
    OutOfScreen { x_px: f64, y_px: f64 },
    #[error("reflected laser misses the canvas; would land at ({x_mm:.1}, {y_mm:.1}) mm")]
    OffCanvas { x_mm: f64, y_mm: f64 },
    #[error("ray does not intersect the target plane")]
    NoIntersection,
    #[error("gaze ({yaw_deg:.3}, {pitch_deg:.3}) deg outside the trackable +-45 deg range")]
    GazeOutOfRange { yaw_deg: f64, pitch_deg: f64 },
    #[error("invalid geometry: {0}")]
    Invalid(String),
}

/// Micro-steps to degrees of eye rotation.
#[inline]
pub fn steps_to_deg<T: Scalar>(microsteps: i64) -> T {
    T::lit(microsteps as f64) * T::lit(MICROSTEP_DEG)
}

/// Continuous degrees to (fractional) micro-steps.
#[inline]
pub fn deg_to_steps<T: Scalar>(deg: T) -> T {
    deg / T::lit(MICROSTEP_DEG)
}

/// Stepper pulse rate (pulses per second) to angular velocity in deg/s.
#[inline]
pub fn pps_to_degps<T: Scalar>(pps: T) -> T {
    pps * T::lit(MICROSTEP_DEG)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    /// Unit vector, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        (n > T::zero()).then(|| self * (T::one() / n))
    }

    /// Angle between two non-zero vectors, in radians, numerically stable near 0 and pi.
    pub fn angle_to(self, o: Self) -> T {
        self.cross(o).norm().atan2(self.dot(o))
    }
}

impl<T: Scalar> std::ops::Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> std::ops::Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> std::ops::Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Scalar> std::ops::Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// A point in screen pixel coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScreenPoint<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> ScreenPoint<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Eye/monitor arrangement of the desk setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewingGeometry<T> {
    pub eye_to_screen_mm: T,
    pub screen_w_mm: T,
    pub screen_h_mm: T,
    pub screen_w_px: u32,
    pub screen_h_px: u32,
    /// Pixel hit by the neutral gaze.
    pub screen_center_px: ScreenPoint<T>,
}

impl<T: Scalar> Default for ViewingGeometry<T> {
    fn default() -> Self {
        Self {
            eye_to_screen_mm: T::lit(927.0),
            screen_w_mm: T::lit(531.36),
            screen_h_mm: T::lit(298.89),
            screen_w_px: 1920,
            screen_h_px: 1080,
            screen_center_px: ScreenPoint::new(T::lit(960.0), T::lit(540.0)),
        }
    }
}

impl<T: Scalar> ViewingGeometry<T> {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = [self.eye_to_screen_mm, self.screen_w_mm, self.screen_h_mm];
        if positive.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(GeometryError::Invalid("lengths must be positive".into()));
        }
        if self.screen_w_px == 0 || self.screen_h_px == 0 {
            return Err(GeometryError::Invalid("screen resolution must be non-zero".into()));
        }
        Ok(())
    }

    /// Horizontal pixel pitch in mm.
    pub fn pitch_x_mm(&self) -> T {
        self.screen_w_mm / T::lit(self.screen_w_px as f64)
    }

    /// Vertical pixel pitch in mm.
    pub fn pitch_y_mm(&self) -> T {
        self.screen_h_mm / T::lit(self.screen_h_px as f64)
    }

    /// Millimetre offsets from the neutral point (x right, y up) to pixels.
    pub fn mm_to_px(&self, x_mm: T, y_mm: T) -> ScreenPoint<T> {
        ScreenPoint::new(
            self.screen_center_px.x + x_mm / self.pitch_x_mm(),
            self.screen_center_px.y - y_mm / self.pitch_y_mm(),
        )
    }

    /// Pixels to millimetre offsets from the neutral point (x right, y up).
    pub fn px_to_mm(&self, p: ScreenPoint<T>) -> (T, T) {
        (
            (p.x - self.screen_center_px.x) * self.pitch_x_mm(),
            (self.screen_center_px.y - p.y) * self.pitch_y_mm(),
        )
    }

    pub fn contains_px(&self, p: ScreenPoint<T>) -> bool {
        let eps = T::lit(1e-9);
        p.x >= -eps
            && p.y >= -eps
            && p.x <= T::lit(self.screen_w_px as f64) + eps
            && p.y <= T::lit(self.screen_h_px as f64) + eps
    }
}

/// Eye orientation as Fick angles: yaw about the vertical axis first, then
/// pitch about the rotated horizontal axis. Positive yaw looks right,
/// positive pitch looks up. Stored in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeDirection<T> {
    yaw: T,
    pitch: T,
}

impl<T: Scalar> GazeDirection<T> {
    pub const LIMIT_DEG: f64 = 45.0;

    /// Checked constructor; both angles must lie strictly inside +-45 deg.
    pub fn from_degrees(yaw_deg: T, pitch_deg: T) -> Result<Self, GeometryError> {
        let lim = T::lit(Self::LIMIT_DEG);
        if !(yaw_deg.abs() < lim && pitch_deg.abs() < lim) {
            return Err(GeometryError::GazeOutOfRange {
                yaw_deg: yaw_deg.as_f64(),
                pitch_deg: pitch_deg.as_f64(),
            });
        }
        Ok(Self::from_degrees_unchecked(yaw_deg, pitch_deg))
    }

    pub fn from_degrees_unchecked(yaw_deg: T, pitch_deg: T) -> Self {
        Self { yaw: yaw_deg.to_radians(), pitch: pitch_deg.to_radians() }
    }

    pub fn neutral() -> Self {
        Self { yaw: T::zero(), pitch: T::zero() }
    }

    pub fn yaw_rad(&self) -> T {
        self.yaw
    }

    pub fn pitch_rad(&self) -> T {
        self.pitch
    }

    pub fn yaw_deg(&self) -> T {
        self.yaw.to_degrees()
    }

    pub fn pitch_deg(&self) -> T {
        self.pitch.to_degrees()
    }

    /// Unit line-of-sight vector in the world frame.
    pub fn unit_vector(&self) -> Vec3<T> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vec3::new(sy * cp, sp, cy * cp)
    }

    /// Inverse of [`unit_vector`](Self::unit_vector) for any non-zero direction.
    pub fn from_vector(v: Vec3<T>) -> Self {
        let n = v.norm();
        let pitch = (v.y / n).max(-T::one()).min(T::one()).asin();
        let yaw = v.x.atan2(v.z);
        Self { yaw, pitch }
    }

    /// Angle between two gaze directions, in degrees.
    pub fn angle_to_deg(&self, other: &Self) -> T {
        self.unit_vector().angle_to(other.unit_vector()).to_degrees()
    }
}

/// Signed pixel offset about the neutral point to visual angle in degrees.
pub fn px_offset_to_deg<T: Scalar>(offset_px: T, geom: &ViewingGeometry<T>) -> T {
    (offset_px * geom.pitch_x_mm() / geom.eye_to_screen_mm).atan().to_degrees()
}

/// Inverse of [`px_offset_to_deg`].
pub fn deg_to_px_offset<T: Scalar>(deg: T, geom: &ViewingGeometry<T>) -> T {
    deg.to_radians().tan() * geom.eye_to_screen_mm / geom.pitch_x_mm()
}

/// Screen point hit by the gaze ray. Points on the panel border count as inside.
pub fn gaze_to_screen_point<T: Scalar>(
    g: &GazeDirection<T>,
    geom: &ViewingGeometry<T>,
) -> Result<ScreenPoint<T>, GeometryError> {
    let p = gaze_to_screen_point_unbounded(g, geom)?;
    if geom.contains_px(p) {
        Ok(p)
    } else {
        Err(GeometryError::OutOfScreen { x_px: p.x.as_f64(), y_px: p.y.as_f64() })
    }
}

/// Intersection with the (infinite) screen plane, in pixels.
pub fn gaze_to_screen_point_unbounded<T: Scalar>(
    g: &GazeDirection<T>,
    geom: &ViewingGeometry<T>,
) -> Result<ScreenPoint<T>, GeometryError> {
    let d = g.unit_vector();
    if !(d.z > T::zero()) {
        return Err(GeometryError::NoIntersection);
    }
    let s = geom.eye_to_screen_mm / d.z;
    Ok(geom.mm_to_px(d.x * s, d.y * s))
}

/// Gaze direction that looks at the given screen pixel. Off-panel points are
/// accepted; the result may then leave the trackable range.
pub fn screen_point_to_gaze<T: Scalar>(p: ScreenPoint<T>, geom: &ViewingGeometry<T>) -> GazeDirection<T> {
    let (x, y) = geom.px_to_mm(p);
    GazeDirection::from_vector(Vec3::new(x, y, geom.eye_to_screen_mm))
}

/// Angular distance in degrees, about the eye, between two screen pixels.
pub fn screen_angle_deg<T: Scalar>(a: ScreenPoint<T>, b: ScreenPoint<T>, geom: &ViewingGeometry<T>) -> T {
    screen_point_to_gaze(a, geom).angle_to_deg(&screen_point_to_gaze(b, geom))
}

/// Canvas with a laser diode at its center, facing the mirror-equipped eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaserRig<T> {
    pub canvas_distance_mm: T,
    pub canvas_w_mm: T,
    pub canvas_h_mm: T,
}

impl<T: Scalar> Default for LaserRig<T> {
    fn default() -> Self {
        Self {
            canvas_distance_mm: T::lit(700.0),
            canvas_w_mm: T::lit(679.0),
            canvas_h_mm: T::lit(498.0),
        }
    }
}

impl<T: Scalar> LaserRig<T> {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if [self.canvas_distance_mm, self.canvas_w_mm, self.canvas_h_mm]
            .iter()
            .all(|v| *v > T::zero() && v.is_finite())
        {
            Ok(())
        } else {
            Err(GeometryError::Invalid("canvas dimensions must be positive".into()))
        }
    }
}

/// Laser spot on the canvas, relative to the laser origin (x right, y up).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CanvasPoint<T> {
    pub x_mm: T,
    pub y_mm: T,
}

/// Direction of the laser after specular reflection on a mirror whose normal
/// is the line of sight. The incident beam travels from the canvas towards the eye.
pub fn reflected_direction<T: Scalar>(g: &GazeDirection<T>) -> Vec3<T> {
    let n = g.unit_vector();
    let incident = Vec3::new(T::zero(), T::zero(), -T::one());
    incident - n * (T::two() * incident.dot(n))
}

/// Angle in degrees between the reflected beam and the beam back to the laser.
pub fn reflection_angle_deg<T: Scalar>(g: &GazeDirection<T>) -> T {
    let back = Vec3::new(T::zero(), T::zero(), T::one());
    reflected_direction(g).angle_to(back).to_degrees()
}

/// Where the reflected beam meets the canvas plane, ignoring the canvas extent.
pub fn laser_spot_unbounded<T: Scalar>(
    g: &GazeDirection<T>,
    rig: &LaserRig<T>,
) -> Result<CanvasPoint<T>, GeometryError> {
    let r = reflected_direction(g);
    if !(r.z > T::zero()) {
        return Err(GeometryError::NoIntersection);
    }
    let s = rig.canvas_distance_mm / r.z;
    Ok(CanvasPoint { x_mm: r.x * s, y_mm: r.y * s })
}

/// Laser spot on the canvas, or `OffCanvas` carrying the would-be position.
pub fn laser_spot<T: Scalar>(g: &GazeDirection<T>, rig: &LaserRig<T>) -> Result<CanvasPoint<T>, GeometryError> {
    let p = laser_spot_unbounded(g, rig)?;
    let eps = T::lit(1e-9);
    let inside = p.x_mm.abs() <= rig.canvas_w_mm * T::half() + eps
        && p.y_mm.abs() <= rig.canvas_h_mm * T::half() + eps;
    if inside {
        Ok(p)
    } else {
        Err(GeometryError::OffCanvas { x_mm: p.x_mm.as_f64(), y_mm: p.y_mm.as_f64() })
    }
}
