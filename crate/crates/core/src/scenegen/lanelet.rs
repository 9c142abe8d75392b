//! Centerline polyline queries: nearest match and heading change ahead.

use crate::trajectory::Point;
use crate::util::wrap_angle;

const TIE_EPS: f64 = 1e-9;

/// Where a point projects onto a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub lanelet: usize,
    pub distance: f64,
    /// Arc length along the centerline at the projection.
    pub station: f64,
}

/// A directed centerline with cached segment headings and cumulative length.
#[derive(Clone, Debug)]
pub struct Centerline<'a> {
    points: Vec<&'a Point>,
    cumulative: Vec<f64>,
    headings: Vec<f64>,
}

impl<'a> Centerline<'a> {
    pub fn new(polyline: &'a [Point]) -> Self {
        let mut points: Vec<&Point> = Vec::with_capacity(polyline.len());
        for p in polyline {
            if points.last().is_none_or(|q| q != &p) {
                points.push(p);
            }
        }
        let mut cumulative = vec![0.0];
        let mut headings = Vec::new();
        for w in points.windows(2) {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            cumulative.push(cumulative.last().unwrap() + dx.hypot(dy));
            headings.push(dy.atan2(dx));
        }
        Self {
            points,
            cumulative,
            headings,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Distance from `p` to the polyline and the station of the projection.
    pub fn project(&self, p: &Point) -> Option<(f64, f64)> {
        match self.points.len() {
            0 => None,
            1 => {
                let q = self.points[0];
                Some(((p[0] - q[0]).hypot(p[1] - q[1]), 0.0))
            }
            _ => {
                let mut best: Option<(f64, f64)> = None;
                for i in 0..self.headings.len() {
                    let (a, b) = (self.points[i], self.points[i + 1]);
                    let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
                    let len2 = ux * ux + uy * uy;
                    let t = (((p[0] - a[0]) * ux + (p[1] - a[1]) * uy) / len2).clamp(0.0, 1.0);
                    let (cx, cy) = (a[0] + t * ux, a[1] + t * uy);
                    let d = (p[0] - cx).hypot(p[1] - cy);
                    let station = self.cumulative[i] + t * len2.sqrt();
                    if best.is_none_or(|(bd, _)| d < bd - TIE_EPS) {
                        best = Some((d, station));
                    }
                }
                best
            }
        }
    }

    fn segment_at(&self, station: f64) -> usize {
        let n = self.headings.len();
        // First segment whose end lies beyond `station`.
        let idx = self.cumulative[1..].partition_point(|&c| c <= station);
        idx.min(n - 1)
    }

    /// Signed, unwrapped heading change from `station` to `station + ahead`,
    /// positive counter-clockwise (left). Clamped at the polyline end.
    pub fn heading_change(&self, station: f64, ahead: f64) -> f64 {
        if self.headings.len() < 2 {
            return 0.0;
        }
        let i0 = self.segment_at(station);
        let i1 = self.segment_at(station + ahead);
        (i0..i1)
            .map(|i| wrap_angle(self.headings[i + 1] - self.headings[i]))
            .sum()
    }
}

/// Nearest centerline to `p`; exact ties go to the smaller lanelet index.
pub fn nearest_lanelet(p: &Point, lanelets: &[Vec<Point>]) -> Option<Match> {
    let mut best: Option<Match> = None;
    for (i, lane) in lanelets.iter().enumerate() {
        let Some((distance, station)) = Centerline::new(lane).project(p) else {
            continue;
        };
        if best.is_none_or(|b| distance < b.distance - TIE_EPS) {
            best = Some(Match {
                lanelet: i,
                distance,
                station,
            });
        }
    }
    best
}
