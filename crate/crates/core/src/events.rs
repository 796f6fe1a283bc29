//! Saccade and fixation parsing of 1 kHz sample streams.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{screen_point_to_gaze, ScreenPoint, Vec3, ViewingGeometry};
use crate::tracker::Sample;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("stream of {got} samples is shorter than the {need}-sample velocity filter")]
    TooShort { got: usize, need: usize },
    #[error("invalid detector configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Taps of the symmetric velocity filter.
pub const FILTER_TAPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub velocity_threshold_degps: f64,
    pub acceleration_threshold_degps2: f64,
    pub min_amplitude_deg: f64,
    /// Retained amplitude window of the exclusion step.
    pub amplitude_window_deg: (f64, f64),
    /// Saccades closer than this are treated as fragments of one movement.
    pub split_gap_ms: i64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            velocity_threshold_degps: 30.0,
            acceleration_threshold_degps2: 8000.0,
            min_amplitude_deg: 0.1,
            amplitude_window_deg: (4.0, 14.6),
            split_gap_ms: 40,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), EventError> {
        if !(self.velocity_threshold_degps > 0.0 && self.acceleration_threshold_degps2 > 0.0) {
            return Err(EventError::Invalid("thresholds must be positive".into()));
        }
        if !(self.min_amplitude_deg >= 0.0) || !(self.amplitude_window_deg.0 <= self.amplitude_window_deg.1) {
            return Err(EventError::Invalid("amplitude limits out of order".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaccadeEvent {
    pub t_start_ms: i64,
    pub t_end_ms: i64,
    pub start_px: ScreenPoint<f64>,
    pub end_px: ScreenPoint<f64>,
    pub amplitude_deg: f64,
    pub peak_velocity_degps: f64,
    pub mean_pupil_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub t_start_ms: i64,
    pub t_end_ms: i64,
    pub mean_px: ScreenPoint<f64>,
    pub mean_pupil_size: f64,
}

fn unit_gaze(s: &Sample, geom: &ViewingGeometry<f64>) -> Option<Vec3<f64>> {
    s.reading.map(|r| screen_point_to_gaze(ScreenPoint::new(r.x_px, r.y_px), geom).unit_vector())
}

/// Angular speed (deg/s) per sample from the 5-tap differentiating filter
/// `(x[n+1] - x[n-1] + x[n+2] - x[n-2]) / (6 dt)` on 3D gaze vectors.
/// Samples within two of an edge or of an invalid sample get `None`.
pub fn velocity_series(
    samples: &[Sample],
    geom: &ViewingGeometry<f64>,
    _cfg: &DetectorConfig,
) -> Result<Vec<Option<f64>>, EventError> {
    if samples.len() < FILTER_TAPS {
        return Err(EventError::TooShort { got: samples.len(), need: FILTER_TAPS });
    }
    let dirs: Vec<Option<Vec3<f64>>> = samples.iter().map(|s| unit_gaze(s, geom)).collect();
    let dt = 0.001;
    let mut out = vec![None; samples.len()];
    for n in 2..samples.len() - 2 {
        if let (Some(a), Some(b), Some(c), Some(d), Some(_)) = (dirs[n - 2], dirs[n - 1], dirs[n + 1], dirs[n + 2], dirs[n]) {
            let v = (c - b + d - a) * (1.0 / (6.0 * dt));
            out[n] = Some(v.norm().to_degrees());
        }
    }
    Ok(out)
}

/// Central difference of the speed series, deg/s^2.
pub fn acceleration_series(speed: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = vec![None; speed.len()];
    for n in 1..speed.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (speed[n - 1], speed[n + 1]) {
            out[n] = Some((b - a) / 0.002);
        }
    }
    out
}

/// Saccades are maximal runs of valid samples whose speed or acceleration
/// exceeds its threshold, kept when their amplitude reaches
/// `min_amplitude_deg`. All other valid samples form fixations, split at
/// saccades and at invalid samples.
pub fn detect_saccades(
    samples: &[Sample],
    geom: &ViewingGeometry<f64>,
    cfg: &DetectorConfig,
) -> Result<(Vec<SaccadeEvent>, Vec<Fixation>), EventError> {
    let speed = velocity_series(samples, geom, cfg)?;
    let accel = acceleration_series(&speed);
    let moving: Vec<bool> = (0..samples.len())
        .map(|i| {
            samples[i].is_valid()
                && (speed[i].is_some_and(|v| v > cfg.velocity_threshold_degps)
                    || accel[i].is_some_and(|a| a.abs() > cfg.acceleration_threshold_degps2))
        })
        .collect();

    let mut in_saccade = vec![false; samples.len()];
    let mut saccades = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if !moving[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < samples.len() && moving[i] {
            i += 1;
        }
        let end = i - 1;
        let (a, b) = (samples[start].reading.expect("valid"), samples[end].reading.expect("valid"));
        let (pa, pb) = (ScreenPoint::new(a.x_px, a.y_px), ScreenPoint::new(b.x_px, b.y_px));
        let amplitude = screen_point_to_gaze(pa, geom).angle_to_deg(&screen_point_to_gaze(pb, geom));
        if amplitude < cfg.min_amplitude_deg {
            continue;
        }
        let span = &samples[start..=end];
        let peak = speed[start..=end].iter().flatten().copied().fold(0.0, f64::max);
        let pupil = span.iter().map(|s| s.reading.expect("valid").pupil).sum::<f64>() / span.len() as f64;
        in_saccade[start..=end].iter_mut().for_each(|f| *f = true);
        saccades.push(SaccadeEvent {
            t_start_ms: samples[start].t_ms,
            t_end_ms: samples[end].t_ms,
            start_px: pa,
            end_px: pb,
            amplitude_deg: amplitude,
            peak_velocity_degps: peak,
            mean_pupil_size: pupil,
        });
    }

    let mut fixations = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if in_saccade[i] || !samples[i].is_valid() {
            i += 1;
            continue;
        }
        let start = i;
        let (mut sx, mut sy, mut sp) = (0.0, 0.0, 0.0);
        while i < samples.len() && !in_saccade[i] && samples[i].is_valid() {
            let r = samples[i].reading.expect("valid");
            sx += r.x_px;
            sy += r.y_px;
            sp += r.pupil;
            i += 1;
        }
        let n = (i - start) as f64;
        fixations.push(Fixation {
            t_start_ms: samples[start].t_ms,
            t_end_ms: samples[i - 1].t_ms,
            mean_px: ScreenPoint::new(sx / n, sy / n),
            mean_pupil_size: sp / n,
        });
    }
    Ok((saccades, fixations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Retained,
    OutOfRange,
    SplitFragment,
}

impl EventStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Retained => "retained",
            Self::OutOfRange => "out_of_range",
            Self::SplitFragment => "split_fragment",
        }
    }
}

/// Apply the amplitude window and the split-fragment rule. Two saccades less
/// than `split_gap_ms` apart with no fixation between them (the tracker lost
/// the eye mid-movement) are both fragments of one movement.
pub fn filter_valid_saccades(
    events: &[SaccadeEvent],
    fixations: &[Fixation],
    lo_deg: f64,
    hi_deg: f64,
    split_gap_ms: i64,
) -> (Vec<SaccadeEvent>, Vec<(SaccadeEvent, EventStatus)>) {
    let statuses = classify_saccades(events, fixations, lo_deg, hi_deg, split_gap_ms);
    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    for (e, s) in events.iter().zip(statuses) {
        if s == EventStatus::Retained {
            retained.push(*e);
        } else {
            excluded.push((*e, s));
        }
    }
    (retained, excluded)
}

/// Status of each event, in order. `fixations` are the dwells returned
/// alongside `events` by [`detect_saccades`].
pub fn classify_saccades(
    events: &[SaccadeEvent],
    fixations: &[Fixation],
    lo_deg: f64,
    hi_deg: f64,
    split_gap_ms: i64,
) -> Vec<EventStatus> {
    let dwell_between = |a: i64, b: i64| fixations.iter().any(|f| f.t_start_ms > a && f.t_end_ms < b);
    let mut split = vec![false; events.len()];
    for i in 1..events.len() {
        let (a, b) = (events[i - 1].t_end_ms, events[i].t_start_ms);
        if b - a < split_gap_ms && !dwell_between(a, b) {
            split[i - 1] = true;
            split[i] = true;
        }
    }
    events
        .iter()
        .zip(split)
        .map(|(e, s)| {
            if s {
                EventStatus::SplitFragment
            } else if (lo_deg..=hi_deg).contains(&e.amplitude_deg) {
                EventStatus::Retained
            } else {
                EventStatus::OutOfRange
            }
        })
        .collect()
}

/// Row of the events CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub trial: u32,
    pub participant: u32,
    pub condition: String,
    pub t_start_ms: i64,
    pub t_end_ms: i64,
    pub amplitude_deg: f64,
    pub peak_velocity_degps: f64,
    pub mean_pupil_size: f64,
    pub status: EventStatus,
}

pub const EVENTS_HEADER: [&str; 9] = [
    "trial",
    "participant",
    "condition",
    "t_start_ms",
    "t_end_ms",
    "amplitude_deg",
    "peak_velocity_degps",
    "mean_pupil_size",
    "status",
];

pub fn write_events_csv<W: Write>(w: W, records: &[EventRecord]) -> Result<(), EventError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EVENTS_HEADER)?;
    for r in records {
        out.write_record([
            r.trial.to_string(),
            r.participant.to_string(),
            r.condition.clone(),
            r.t_start_ms.to_string(),
            r.t_end_ms.to_string(),
            r.amplitude_deg.to_string(),
            r.peak_velocity_degps.to_string(),
            r.mean_pupil_size.to_string(),
            r.status.as_str().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(r: R) -> Result<Vec<EventRecord>, EventError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(EVENTS_HEADER.iter().copied()) {
        return Err(EventError::Invalid(format!("unexpected events header: {:?}", header)));
    }
    rdr.deserialize().map(|r| r.map_err(EventError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{gaze_to_screen_point_unbounded, px_offset_to_deg, GazeDirection};
    use crate::motion::{plan_move, GimbalState, MotionProfile};
    use crate::tracker::Reading;

    fn geom() -> ViewingGeometry<f64> {
        ViewingGeometry::default()
    }

    fn stream(points: impl IntoIterator<Item = (f64, f64)>) -> Vec<Sample> {
        points
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| Sample { t_ms: i as i64, reading: Some(Reading { x_px: x, y_px: y, pupil: 2000.0 }) })
            .collect()
    }

    /// Noiseless stream of a gimbal move with fixations before and after.
    fn move_stream(from: GimbalState, to: GimbalState, before_ms: usize, after_ms: usize) -> Vec<Sample> {
        let t = plan_move::<f64>(from, to, &MotionProfile::default());
        let dur_ms = (t.duration_s() * 1000.0).ceil() as usize;
        let total = before_ms + dur_ms + after_ms;
        stream((0..total).map(|i| {
            let ts = (i as f64 - before_ms as f64).max(0.0) / 1000.0;
            let g = t.gaze(ts);
            let p = gaze_to_screen_point_unbounded(&g, &geom()).unwrap();
            (p.x, p.y)
        }))
    }

    #[test]
    fn too_short_stream() {
        let s = stream([(960.0, 540.0); 4]);
        assert!(matches!(velocity_series(&s, &geom(), &DetectorConfig::default()), Err(EventError::TooShort { .. })));
    }

    #[test]
    fn constant_position_has_zero_speed() {
        let s = stream([(500.0, 300.0); 50]);
        let v = velocity_series(&s, &geom(), &DetectorConfig::default()).unwrap();
        assert!(v[..2].iter().all(Option::is_none) && v[48..].iter().all(Option::is_none));
        assert!(v[2..48].iter().all(|x| *x == Some(0.0)));
    }

    #[test]
    fn ramp_speed_near_center() {
        let s = stream((0..200).map(|i| (900.0 + i as f64, 540.0)));
        let v = velocity_series(&s, &geom(), &DetectorConfig::default()).unwrap();
        let expect = px_offset_to_deg(1.0, &geom()) * 1000.0;
        assert!((expect - 17.1).abs() < 0.05);
        for x in v[2..198].iter().flatten() {
            assert!((x - expect).abs() / expect < 0.005, "{x} vs {expect}");
        }
    }

    #[test]
    fn ten_degree_peak_within_filter_attenuation() {
        let s = move_stream(GimbalState::new(-44, 0).unwrap(), GimbalState::new(45, 0).unwrap(), 100, 100);
        let v = velocity_series(&s, &geom(), &DetectorConfig::default()).unwrap();
        let peak = v.iter().flatten().copied().fold(0.0, f64::max);
        let expect = (9000.0f64 * 89.0 * 0.1125).sqrt();
        assert!((peak - expect).abs() / expect < 0.05, "{peak} vs {expect}");
    }

    #[test]
    fn pure_fixation() {
        let s = stream([(960.0, 540.0); 300]);
        let (sac, fix) = detect_saccades(&s, &geom(), &DetectorConfig::default()).unwrap();
        assert!(sac.is_empty());
        assert_eq!(fix.len(), 1);
        assert_eq!((fix[0].t_start_ms, fix[0].t_end_ms), (0, 299));
    }

    #[test]
    fn single_ten_degree_saccade() {
        let s = move_stream(GimbalState::new(-44, 0).unwrap(), GimbalState::new(45, 0).unwrap(), 300, 300);
        let (sac, fix) = detect_saccades(&s, &geom(), &DetectorConfig::default()).unwrap();
        assert_eq!(sac.len(), 1);
        assert_eq!(fix.len(), 2);
        assert!((sac[0].amplitude_deg - 89.0 * 0.1125).abs() < 0.3, "{}", sac[0].amplitude_deg);
        assert!(sac[0].peak_velocity_degps >= sac[0].amplitude_deg / ((sac[0].t_end_ms - sac[0].t_start_ms) as f64 / 1000.0));
        // Partition: saccade and fixations tile the stream.
        assert_eq!(fix[0].t_end_ms + 1, sac[0].t_start_ms);
        assert_eq!(sac[0].t_end_ms + 1, fix[1].t_start_ms);
        assert_eq!(fix[1].t_end_ms, s.len() as i64 - 1);
    }

    #[test]
    fn slow_motion_is_not_a_saccade() {
        // 100 pps = 11.25 deg/s sustained.
        let deg_per_ms = 100.0 * 0.1125 / 1000.0;
        let s = stream((0..600).map(|i| {
            let g = GazeDirection::from_degrees(-3.0 + deg_per_ms * i as f64, 0.0).unwrap();
            let p = gaze_to_screen_point_unbounded(&g, &geom()).unwrap();
            (p.x, p.y)
        }));
        let (sac, _) = detect_saccades(&s, &geom(), &DetectorConfig::default()).unwrap();
        assert!(sac.is_empty());
    }

    #[test]
    fn thousand_pps_is_detected() {
        // 1000 pps (112.5 deg/s) clears the default thresholds.
        let deg_per_ms = 1000.0 * 0.1125 / 1000.0;
        let s = stream((0..400).map(|i| {
            let t = (i as f64 - 100.0).clamp(0.0, 200.0);
            let g = GazeDirection::from_degrees(-10.0 + deg_per_ms * t, 0.0).unwrap();
            let p = gaze_to_screen_point_unbounded(&g, &geom()).unwrap();
            (p.x, p.y)
        }));
        let (sac, _) = detect_saccades(&s, &geom(), &DetectorConfig::default()).unwrap();
        assert_eq!(sac.len(), 1);
    }

    #[test]
    fn invalid_samples_split_fixations() {
        let mut s = stream([(960.0, 540.0); 100]);
        s[50].reading = None;
        let (sac, fix) = detect_saccades(&s, &geom(), &DetectorConfig::default()).unwrap();
        assert!(sac.is_empty());
        assert_eq!(fix.len(), 2);
        assert_eq!(fix[0].t_end_ms, 49);
        assert_eq!(fix[1].t_start_ms, 51);
    }

    fn event(t0: i64, t1: i64, amp: f64) -> SaccadeEvent {
        SaccadeEvent {
            t_start_ms: t0,
            t_end_ms: t1,
            start_px: ScreenPoint::new(0.0, 0.0),
            end_px: ScreenPoint::new(0.0, 0.0),
            amplitude_deg: amp,
            peak_velocity_degps: 300.0,
            mean_pupil_size: 1.0,
        }
    }

    #[test]
    fn exclusion_rules() {
        let events = [event(0, 40, 3.9), event(400, 450, 10.0), event(800, 830, 6.0), event(850, 870, 5.0), event(1300, 1350, 14.7)];
        let (kept, dropped) = filter_valid_saccades(&events, &[], 4.0, 14.6, 40);
        assert_eq!(kept, vec![events[1]]);
        let reasons: Vec<_> = dropped.iter().map(|d| d.1).collect();
        assert_eq!(
            reasons,
            vec![EventStatus::OutOfRange, EventStatus::SplitFragment, EventStatus::SplitFragment, EventStatus::OutOfRange]
        );
        assert_eq!(kept.len() + dropped.len(), events.len());
        // Boundaries are inclusive.
        let (kept, _) = filter_valid_saccades(&[event(0, 10, 4.0), event(500, 510, 14.6)], &[], 4.0, 14.6, 40);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn close_events_with_a_dwell_between_are_not_split() {
        let events = [event(0, 50, 10.0), event(53, 56, 0.15)];
        let dwell = Fixation { t_start_ms: 52, t_end_ms: 52, mean_px: ScreenPoint::new(0.0, 0.0), mean_pupil_size: 1.0 };
        let with = classify_saccades(&events, &[dwell], 4.0, 14.6, 40);
        assert_eq!(with, vec![EventStatus::Retained, EventStatus::OutOfRange]);
        let without = classify_saccades(&events, &[], 4.0, 14.6, 40);
        assert_eq!(without, vec![EventStatus::SplitFragment; 2]);
    }

    #[test]
    fn events_csv_round_trip() {
        let recs = vec![
            EventRecord {
                trial: 3,
                participant: 7,
                condition: "dark".into(),
                t_start_ms: 1200,
                t_end_ms: 1250,
                amplitude_deg: 9.876543210123,
                peak_velocity_degps: 297.1,
                mean_pupil_size: 2345.5,
                status: EventStatus::Retained,
            },
            EventRecord {
                trial: 4,
                participant: 7,
                condition: "light".into(),
                t_start_ms: 1600,
                t_end_ms: 1690,
                amplitude_deg: 22.0,
                peak_velocity_degps: 360.0,
                mean_pupil_size: 2300.0,
                status: EventStatus::OutOfRange,
            },
        ];
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("trial,participant,condition,t_start_ms,t_end_ms,amplitude_deg,peak_velocity_degps,mean_pupil_size,status\n"));
        assert_eq!(read_events_csv(&buf[..]).unwrap(), recs);
    }
}
