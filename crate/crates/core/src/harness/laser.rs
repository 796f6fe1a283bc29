use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{positioned, ExperimentConfig, HarnessError, PatternSpec};
use crate::geometry::{laser_spot, laser_spot_unbounded, reflection_angle_deg, CanvasPoint, GazeDirection, LaserRig, Vec3};
use crate::motion::{GimbalState, Timeline};

/// Positioning session of laser runs.
const LASER_SESSION: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserVertex {
    pub index: usize,
    pub label: String,
    pub commanded: GimbalState,
    pub actual: GimbalState,
    pub planned: CanvasPoint<f64>,
    pub simulated: CanvasPoint<f64>,
    /// Angle between the actual line of sight and the neutral axis.
    pub gaze_angle_deg: f64,
    /// Angle of the simulated spot seen from the eye, off the laser axis.
    pub spot_angle_deg: f64,
    pub reflection_angle_deg: f64,
    pub on_canvas: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserExport {
    pub pattern: String,
    pub rig: LaserRig<f64>,
    pub vertices: Vec<LaserVertex>,
    /// Simulated spot path, sampled every 2 ms along the moves.
    pub path: Vec<CanvasPoint<f64>>,
}

fn spot(g: &GazeDirection<f64>, rig: &LaserRig<f64>) -> Result<CanvasPoint<f64>, HarnessError> {
    Ok(laser_spot_unbounded(g, rig)?)
}

/// Laser spots of every vertex (planned from commanded positions, simulated
/// from positions with gimbal error) and the spot path between them.
pub fn export_laser_pattern(pattern: &PatternSpec, rig: &LaserRig<f64>, cfg: &ExperimentConfig) -> Result<LaserExport, HarnessError> {
    pattern.validate()?;
    rig.validate()?;
    let start = positioned(pattern.start, cfg, LASER_SESSION, &[u64::MAX]);
    let actual: Vec<GimbalState> =
        pattern.points.iter().enumerate().map(|(i, p)| positioned(p.state, cfg, LASER_SESSION, &[i as u64])).collect();
    let mut vertices = Vec::with_capacity(actual.len());
    for (i, (p, a)) in pattern.points.iter().zip(&actual).enumerate() {
        let g = a.gaze::<f64>();
        let simulated = spot(&g, rig)?;
        let ray = Vec3::new(simulated.x_mm, simulated.y_mm, rig.canvas_distance_mm);
        vertices.push(LaserVertex {
            index: i,
            label: p.label.clone(),
            commanded: p.state,
            actual: *a,
            planned: spot(&p.state.gaze(), rig)?,
            simulated,
            gaze_angle_deg: g.unit_vector().angle_to(Vec3::new(0.0, 0.0, 1.0)).to_degrees(),
            spot_angle_deg: ray.angle_to(Vec3::new(0.0, 0.0, 1.0)).to_degrees(),
            reflection_angle_deg: reflection_angle_deg(&g),
            on_canvas: laser_spot(&g, rig).is_ok(),
        });
    }
    let timeline = Timeline::build(
        start,
        pattern.points.iter().zip(&actual).map(|(p, a)| (*a, p.state, 0.0, None)),
        &cfg.motion,
    );
    let n = (timeline.duration_s() / 0.002).ceil() as usize;
    let path = (0..=n)
        .map(|i| spot(&timeline.gaze((i as f64 * 0.002).min(timeline.duration_s())), rig))
        .collect::<Result<_, _>>()?;
    Ok(LaserExport { pattern: pattern.name.to_string(), rig: rig.clone(), vertices, path })
}

impl LaserExport {
    /// Planned (red rings) versus simulated (blue dots) spots over the
    /// simulated path, on a canvas-scaled frame in millimetres. Off-canvas
    /// vertices are crossed out.
    pub fn to_svg(&self) -> String {
        let (hw, hh) = (self.rig.canvas_w_mm / 2.0, self.rig.canvas_h_mm / 2.0);
        let mut ext = (hw, hh);
        for v in &self.vertices {
            for p in [v.planned, v.simulated] {
                ext.0 = ext.0.max(p.x_mm.abs());
                ext.1 = ext.1.max(p.y_mm.abs());
            }
        }
        let pad = 20.0;
        let (w, h) = (2.0 * ext.0 + 2.0 * pad, 2.0 * ext.1 + 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}" width="{:.0}mm" height="{:.0}mm">"#,
            -ext.0 - pad,
            -ext.1 - pad,
            w,
            h,
            w,
            h
        );
        let _ = writeln!(s, "<title>{} laser pattern</title>", self.pattern);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#111" stroke="#888" stroke-width="1"/>"##,
            -hw,
            -hh,
            self.rig.canvas_w_mm,
            self.rig.canvas_h_mm
        );
        let pts: Vec<String> = self.path.iter().map(|p| format!("{:.3},{:.3}", p.x_mm, -p.y_mm)).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#3c6" stroke-width="0.8" stroke-opacity="0.7"/>"##,
            pts.join(" ")
        );
        for v in &self.vertices {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.3}" cy="{:.3}" r="4" fill="none" stroke="#e33" stroke-width="1"/>"##,
                v.planned.x_mm, -v.planned.y_mm
            );
            let _ = writeln!(s, r##"<circle cx="{:.3}" cy="{:.3}" r="1.5" fill="#39f"/>"##, v.simulated.x_mm, -v.simulated.y_mm);
            if !v.on_canvas {
                let (x, y) = (v.simulated.x_mm, -v.simulated.y_mm);
                let _ = writeln!(
                    s,
                    r##"<path d="M{} {}L{} {}M{} {}L{} {}" stroke="#fc0" stroke-width="1.2"/>"##,
                    x - 6.0,
                    y - 6.0,
                    x + 6.0,
                    y + 6.0,
                    x - 6.0,
                    y + 6.0,
                    x + 6.0,
                    y - 6.0
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "index",
            "label",
            "x_steps",
            "y_steps",
            "planned_x_mm",
            "planned_y_mm",
            "spot_x_mm",
            "spot_y_mm",
            "gaze_angle_deg",
            "spot_angle_deg",
            "reflection_angle_deg",
            "on_canvas",
        ])?;
        for v in &self.vertices {
            out.write_record([
                v.index.to_string(),
                v.label.clone(),
                v.actual.x_steps.to_string(),
                v.actual.y_steps.to_string(),
                v.planned.x_mm.to_string(),
                v.planned.y_mm.to_string(),
                v.simulated.x_mm.to_string(),
                v.simulated.y_mm.to_string(),
                v.gaze_angle_deg.to_string(),
                v.spot_angle_deg.to_string(),
                v.reflection_angle_deg.to_string(),
                v.on_canvas.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
