//! Planar polygons: area, ear-clipping triangulation and intersection area
//! by clipping triangle pairs.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Simple polygon, stored counter-clockwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Vector2<f64>>,
}

pub type Triangle = [Vector2<f64>; 3];

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

pub fn signed_area(pts: &[Vector2<f64>]) -> f64 {
    let n = pts.len();
    (0..n).map(|i| pts[i].perp(&pts[(i + 1) % n])).sum::<f64>() / 2.0
}

impl Polygon {
    /// Builds a polygon, reorienting it counter-clockwise and dropping
    /// repeated and collinear vertices.
    pub fn new(mut vertices: Vec<Vector2<f64>>) -> Self {
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Polygon { vertices: clean(vertices) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::InvalidInput("polygon has a non-finite vertex".into()));
        }
        Ok(())
    }

    pub fn rectangle(min: Vector2<f64>, max: Vector2<f64>) -> Self {
        Polygon::new(vec![min, Vector2::new(max.x, min.y), max, Vector2::new(min.x, max.y)])
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn triangulate(&self) -> Vec<Triangle> {
        ear_clip(&self.vertices)
    }

    /// Part of the polygon inside a convex counter-clockwise polygon.
    /// Exact for convex subjects; a concave subject may gain zero-area
    /// bridges along the clip boundary.
    pub fn clip_convex(&self, clip: &Polygon) -> Polygon {
        Polygon::new(clip_convex(&self.vertices, &clip.vertices))
    }
}

fn clean(mut v: Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    let scale = v.iter().fold(0.0f64, |m, p| m.max(p.x.abs()).max(p.y.abs())).max(1e-300);
    let tol = 1e-14 * scale;
    loop {
        let n = v.len();
        if n < 3 {
            return Vec::new();
        }
        let drop = (0..n).find(|&i| {
            let (p, c, nx) = (&v[(i + n - 1) % n], &v[i], &v[(i + 1) % n]);
            (c - p).norm() <= tol || cross(p, c, nx).abs() <= tol * (nx - p).norm()
        });
        match drop {
            Some(i) => {
                v.remove(i);
            }
            None => return v,
        }
    }
}

/// Triangulation of a counter-clockwise simple polygon by ear clipping.
pub fn ear_clip(poly: &[Vector2<f64>]) -> Vec<Triangle> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::with_capacity(poly.len().saturating_sub(2));
    while idx.len() > 3 {
        let n = idx.len();
        let ear = (0..n).find(|&i| {
            let (a, b, c) = (&poly[idx[(i + n - 1) % n]], &poly[idx[i]], &poly[idx[(i + 1) % n]]);
            if cross(a, b, c) <= 0.0 {
                return false;
            }
            idx.iter().all(|&k| {
                let p = &poly[k];
                std::ptr::eq(p, a) || std::ptr::eq(p, b) || std::ptr::eq(p, c) || !in_triangle(p, a, b, c)
            })
        });
        // numerically stuck: take the most convex corner
        let i = ear.unwrap_or_else(|| {
            (0..n)
                .max_by(|&i, &j| {
                    let c = |k: usize| cross(&poly[idx[(k + n - 1) % n]], &poly[idx[k]], &poly[idx[(k + 1) % n]]);
                    c(i).total_cmp(&c(j))
                })
                .expect("non-empty")
        });
        out.push([poly[idx[(i + n - 1) % n]], poly[idx[i]], poly[idx[(i + 1) % n]]]);
        idx.remove(i);
    }
    if idx.len() == 3 {
        out.push([poly[idx[0]], poly[idx[1]], poly[idx[2]]]);
    }
    out
}

fn in_triangle(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> bool {
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Sutherland-Hodgman clipping of `subject` by a convex counter-clockwise
/// polygon.
pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out = subject.to_vec();
    let m = clip.len();
    for e in 0..m {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[e], clip[(e + 1) % m]);
        let input = std::mem::take(&mut out);
        let side = |p: &Vector2<f64>| cross(&a, &b, p);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    out
}

fn triangle_area(t: &Triangle) -> f64 {
    cross(&t[0], &t[1], &t[2]).abs() / 2.0
}

/// Area of the intersection of two simple polygons.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    intersection_area_many(&[a, b])
}

/// Area of the common part of any number of simple polygons.
pub fn intersection_area_many(polys: &[&Polygon]) -> f64 {
    if polys.is_empty() || polys.iter().any(|p| p.is_empty()) {
        return 0.0;
    }
    let tris: Vec<Vec<Triangle>> = polys.iter().map(|p| p.triangulate()).collect();
    let mut total = 0.0;
    let mut stack: Vec<(usize, Vec<Vector2<f64>>)> = tris[0].iter().map(|t| (1, t.to_vec())).collect();
    while let Some((level, piece)) = stack.pop() {
        if level == tris.len() {
            total += signed_area(&piece).abs();
            continue;
        }
        for t in &tris[level] {
            if triangle_area(t) == 0.0 {
                continue;
            }
            let clipped = clip_convex(&piece, t);
            if clipped.len() >= 3 {
                stack.push((level + 1, clipped));
            }
        }
    }
    total
}

/// Intersection over union; `None` when both polygons are empty.
pub fn iou(a: &Polygon, b: &Polygon) -> Option<f64> {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    (union > 0.0).then(|| (inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn squares() {
        let a = Polygon::rectangle(v(0.0, 0.0), v(2.0, 2.0));
        let b = Polygon::rectangle(v(1.0, 1.0), v(3.0, 3.0));
        assert_eq!(a.area(), 4.0);
        assert!((intersection_area(&a, &b) - 1.0).abs() < 1e-12);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a), Some(1.0));
        let far = Polygon::rectangle(v(5.0, 5.0), v(6.0, 6.0));
        assert_eq!(iou(&a, &far), Some(0.0));
        assert_eq!(iou(&Polygon::default(), &Polygon::default()), None);
    }

    #[test]
    fn clockwise_input_is_reoriented() {
        let p = Polygon::new(vec![v(0.0, 0.0), v(0.0, 1.0), v(1.0, 1.0), v(1.0, 0.0)]);
        assert!(signed_area(&p.vertices) > 0.0);
    }

    #[test]
    fn concave_triangulation_preserves_area() {
        // L shape
        let p = Polygon::new(vec![v(0.0, 0.0), v(3.0, 0.0), v(3.0, 1.0), v(1.0, 1.0), v(1.0, 3.0), v(0.0, 3.0)]);
        let tris = p.triangulate();
        assert_eq!(tris.len(), 4);
        let sum: f64 = tris.iter().map(triangle_area).sum();
        assert!((sum - 5.0).abs() < 1e-12);
        let square = Polygon::rectangle(v(0.5, 0.5), v(2.5, 2.5));
        // the notch [1,3]x[1,3] removes 1.5 x 1.5
        assert!((intersection_area(&p, &square) - (4.0 - 2.25)).abs() < 1e-12);
    }

    #[test]
    fn three_way_intersection() {
        let a = Polygon::rectangle(v(0.0, 0.0), v(4.0, 4.0));
        let b = Polygon::rectangle(v(2.0, 0.0), v(6.0, 4.0));
        let c = Polygon::rectangle(v(0.0, 3.0), v(6.0, 6.0));
        assert!((intersection_area_many(&[&a, &b, &c]) - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in -5.0f64..5.0, ay in -5.0f64..5.0, aw in 0.1f64..5.0, ah in 0.1f64..5.0,
            bx in -5.0f64..5.0, by in -5.0f64..5.0, bw in 0.1f64..5.0, bh in 0.1f64..5.0,
        ) {
            let a = Polygon::rectangle(v(ax, ay), v(ax + aw, ay + ah));
            let b = Polygon::rectangle(v(bx, by), v(bx + bw, by + bh));
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
            // axis-aligned rectangles have a closed-form overlap
            let ix = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0.0);
            let iy = ((ay + ah).min(by + bh) - ay.max(by)).max(0.0);
            prop_assert!((intersection_area(&a, &b) - ix * iy).abs() < 1e-9);
        }
    }
}
