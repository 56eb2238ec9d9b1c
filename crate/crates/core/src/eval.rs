//! Accuracy metrics against ground truth and their aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{pixel_to_ray, project_point, rotation_angle_between, Intrinsics, PoseLocal, ViewParams};
use crate::pnp::WorldPose;
use crate::polygon::{clip_convex, intersection_area_many, iou, Polygon};
use crate::{par, Error, Result, ViewId};

/// Rays within this much of horizontal (world z component) never reach the
/// ground plane.
pub const HORIZON_EPS: f64 = 1e-4;
/// Half side of the square, centered below the camera, that bounds every
/// footprint.
pub const HORIZON_BOX_M: f64 = 10_000.0;
pub const BOUNDARY_SAMPLES: usize = 64;

/// Absolute focal length error.
pub fn fle(pred_f: f64, true_f: f64) -> f64 {
    (pred_f - true_f).abs()
}

/// Rotation error in degrees and center error in meters.
pub fn ape(pred: &WorldPose, truth: &WorldPose) -> (f64, f64) {
    (rotation_angle_between(&pred.rotation, &truth.rotation).to_degrees(), (pred.center - truth.center).norm())
}

/// Camera with world pose, as evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldCamera {
    pub intrinsics: Intrinsics,
    pub pose: WorldPose,
}

impl WorldCamera {
    fn view(&self) -> ViewParams {
        ViewParams { intrinsics: self.intrinsics, pose: PoseLocal { rotation: self.pose.rotation, center: self.pose.center } }
    }
}

/// About `samples` points along the image border, clockwise on screen from
/// the top-left corner. Every corner is included and each side gets a share
/// proportional to its length.
pub fn image_boundary(intr: &Intrinsics, samples: usize) -> Vec<Vector2<f64>> {
    let (w, h) = (intr.width as f64, intr.height as f64);
    let corners = [Vector2::new(0.0, 0.0), Vector2::new(w, 0.0), Vector2::new(w, h), Vector2::new(0.0, h)];
    let perimeter = 2.0 * (w + h);
    let mut out = Vec::with_capacity(samples + 4);
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        let n = ((samples as f64 * (b - a).norm() / perimeter).round() as usize).max(1);
        out.extend((0..n).map(|i| a + (b - a) * (i as f64 / n as f64)));
    }
    out
}

/// Ground-plane (z = 0) region seen by a camera: the image border cast onto
/// the plane, cut at the horizon and bounded by the horizon box. Empty when
/// the camera sees no ground.
pub fn footprint(cam: &WorldCamera) -> Result<Polygon> {
    let c = cam.pose.center;
    if !(c.z > 0.0) {
        return Err(Error::InvalidInput("camera must be above the ground plane".into()));
    }
    let view = cam.view();
    // border pixels beyond the fold of a strong radial distortion have no
    // preimage and are skipped
    let dirs: Vec<Vector3<f64>> = image_boundary(&cam.intrinsics, BOUNDARY_SAMPLES)
        .iter()
        .filter_map(|px| pixel_to_ray(&view, px).ok().map(|r| r.dir))
        .collect();
    if dirs.len() < 3 {
        return Ok(Polygon::default());
    }
    // keep the part of the viewing cone that points below the horizon
    let mut below = Vec::new();
    let keep = |d: &Vector3<f64>| -d.z - HORIZON_EPS;
    for i in 0..dirs.len() {
        let cur = dirs[i];
        let prev = dirs[(i + dirs.len() - 1) % dirs.len()];
        let (kc, kp) = (keep(&cur), keep(&prev));
        if kc >= 0.0 {
            if kp < 0.0 {
                below.push(prev + (cur - prev) * (kp / (kp - kc)));
            }
            below.push(cur);
        } else if kp >= 0.0 {
            below.push(prev + (cur - prev) * (kp / (kp - kc)));
        }
    }
    let ground: Vec<Vector2<f64>> = below
        .iter()
        .map(|d| {
            let s = c.z / -d.z;
            Vector2::new(c.x + s * d.x, c.y + s * d.y)
        })
        .collect();
    let half = Vector2::new(HORIZON_BOX_M, HORIZON_BOX_M);
    let nadir = c.xy();
    let bbox = Polygon::rectangle(nadir - half, nadir + half);
    Ok(Polygon::new(clip_convex(&Polygon::new(ground).vertices, &bbox.vertices)))
}

/// Ground-plane IoU of both footprints restricted to the template.
pub fn iou_part(pred: &WorldCamera, truth: &WorldCamera, template: &Polygon) -> Result<Option<f64>> {
    let (fp, ft) = (footprint(pred)?, footprint(truth)?);
    let inter = intersection_area_many(&[&fp, &ft, template]);
    let union = intersection_area_many(&[&fp, template]) + intersection_area_many(&[&ft, template]) - inter;
    Ok((union > 0.0).then(|| (inter / union).clamp(0.0, 1.0)))
}

/// Image-space IoU of the true footprint drawn with predicted and with true
/// parameters.
pub fn iou_whole(pred: &WorldCamera, truth: &WorldCamera) -> Result<Option<f64>> {
    let ft = footprint(truth)?;
    let (pv, tv) = (pred.view(), truth.view());
    let mut a = Vec::new();
    let mut b = Vec::new();
    for x in &ft.vertices {
        let world = Vector3::new(x.x, x.y, 0.0);
        if let (Ok(p), Ok(t)) = (project_point(&pv, &world), project_point(&tv, &world)) {
            a.push(p);
            b.push(t);
        }
    }
    Ok(iou(&Polygon::new(a), &Polygon::new(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: ViewId,
    pub fle_px: f64,
    pub ape_rot_deg: f64,
    pub ape_trans_m: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou_part: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou_whole: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub stage: String,
    pub views: Vec<ViewMetrics>,
    /// Views present in the ground truth but missing from the prediction.
    pub missing: Vec<ViewId>,
}

/// Metrics for every predicted view that has ground truth, in id order.
pub fn evaluate(
    scene: &str,
    stage: &str,
    pred: &BTreeMap<ViewId, WorldCamera>,
    truth: &BTreeMap<ViewId, WorldCamera>,
    expected: &[ViewId],
    template: Option<&Polygon>,
    parallel: bool,
) -> Result<MetricReport> {
    let ids: Vec<&ViewId> = pred.keys().collect();
    let views = par::map(parallel, &ids, |id| -> Result<ViewMetrics> {
        let p = &pred[*id];
        let t = truth.get(*id).ok_or_else(|| Error::UnknownView((*id).clone()))?;
        let (rot, trans) = ape(&p.pose, &t.pose);
        Ok(ViewMetrics {
            view_id: (*id).clone(),
            fle_px: fle(p.intrinsics.f, t.intrinsics.f),
            ape_rot_deg: rot,
            ape_trans_m: trans,
            iou_part: template.map(|tpl| iou_part(p, t, tpl)).transpose()?.flatten(),
            iou_whole: iou_whole(p, t)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let missing = expected.iter().filter(|v| !pred.contains_key(*v)).cloned().collect();
    Ok(MetricReport { scene: scene.into(), stage: stage.into(), views, missing })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median; the mean of the middle pair for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        Some(Aggregate { mean: mean(values)?, median: median(values)?, count: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scene: String,
    pub stage: String,
    pub registered: usize,
    pub missing: usize,
    pub fle_px: Option<Aggregate>,
    pub ape_rot_deg: Option<Aggregate>,
    pub ape_trans_m: Option<Aggregate>,
    pub iou_part: Option<Aggregate>,
    pub iou_whole: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<TableRow>,
}

fn row<'a>(scene: &str, stage: &str, reports: impl Iterator<Item = &'a MetricReport> + Clone) -> TableRow {
    let views: Vec<&ViewMetrics> = reports.clone().flat_map(|r| &r.views).collect();
    let col = |f: fn(&ViewMetrics) -> Option<f64>| Aggregate::of(&views.iter().filter_map(|v| f(v)).collect::<Vec<_>>());
    TableRow {
        scene: scene.into(),
        stage: stage.into(),
        registered: views.len(),
        missing: reports.map(|r| r.missing.len()).sum(),
        fle_px: col(|v| Some(v.fle_px)),
        ape_rot_deg: col(|v| Some(v.ape_rot_deg)),
        ape_trans_m: col(|v| Some(v.ape_trans_m)),
        iou_part: col(|v| v.iou_part),
        iou_whole: col(|v| v.iou_whole),
    }
}

/// Mean and median of every metric per scene and stage, followed by one
/// `all` row per stage.
pub fn summarize(reports: &[MetricReport]) -> Result<MetricTable> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("nothing to summarize".into()));
    }
    let mut rows: Vec<TableRow> = reports.iter().map(|r| row(&r.scene, &r.stage, std::iter::once(r))).collect();
    let mut stages: Vec<&str> = Vec::new();
    for r in reports {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    for stage in stages {
        rows.push(row("all", stage, reports.iter().filter(|r| r.stage == stage)));
    }
    Ok(MetricTable { rows })
}

impl MetricTable {
    pub fn row(&self, scene: &str, stage: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.scene == scene && r.stage == stage)
    }

    /// Plain-text table: one line per row, mean / median per metric.
    pub fn to_text(&self) -> String {
        let cell = |a: &Option<Aggregate>, digits: usize| match a {
            Some(a) => format!("{:.d$} / {:.d$}", a.mean, a.median, d = digits),
            None => "-".to_string(),
        };
        let mut s = format!(
            "{:<10} {:<8} {:>5} {:>19} {:>19} {:>19} {:>17} {:>17}\n",
            "scene", "stage", "views", "FLE px", "APE_rot deg", "APE_trans m", "IoU_part", "IoU_whole"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:>5} {:>19} {:>19} {:>19} {:>17} {:>17}",
                r.scene,
                r.stage,
                r.registered,
                cell(&r.fle_px, 3),
                cell(&r.ape_rot_deg, 4),
                cell(&r.ape_trans_m, 4),
                cell(&r.iou_part, 4),
                cell(&r.iou_whole, 4)
            );
        }
        s
    }
}
