//! Polyline helpers shared by lanes and routes.

use std::f64::consts::PI;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arclength of the foot point, clamped to `[0, length]`.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: f64,
    /// Euclidean distance from the point to the polyline.
    pub distance: f64,
    /// Heading of the segment the foot point lies on.
    pub tangent: f64,
    /// Signed arclength past either end (negative before the start, positive past the end).
    pub overshoot: f64,
}

/// An open polyline with cached cumulative arclengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline. Callers validate that there are at least two distinct points.
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += dist(w[0], w[1]);
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn segment_heading(&self, seg: usize) -> f64 {
        let a = self.points[seg];
        let b = self.points[seg + 1];
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    fn segment_at(&self, s: f64) -> usize {
        let last = self.points.len() - 2;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    /// Point and tangent heading at arclength `s`. Values outside `[0, length]`
    /// extrapolate along the first or last segment.
    pub fn point_at(&self, s: f64) -> ([f64; 2], f64) {
        let seg = if s <= 0.0 { 0 } else { self.segment_at(s) };
        let heading = self.segment_heading(seg);
        let a = self.points[seg];
        let local = s - self.cumulative[seg];
        (
            [a[0] + local * heading.cos(), a[1] + local * heading.sin()],
            heading,
        )
    }

    /// Orthogonal projection onto the polyline. Ties between segments go to the
    /// lower segment index so results are deterministic.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best: Option<(f64, usize, f64)> = None;
        for seg in 0..self.points.len() - 1 {
            let a = self.points[seg];
            let b = self.points[seg + 1];
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len2 = ex * ex + ey * ey;
            let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
            let foot = [a[0] + t * ex, a[1] + t * ey];
            let d = dist(p, foot);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, seg, t));
            }
        }
        let (distance, seg, t) = best.expect("polyline has at least one segment");
        let a = self.points[seg];
        let seg_len = self.cumulative[seg + 1] - self.cumulative[seg];
        let tangent = self.segment_heading(seg);
        let (c, s_) = (tangent.cos(), tangent.sin());
        let (dx, dy) = (p[0] - a[0], p[1] - a[1]);
        let along = dx * c + dy * s_;
        let lateral = -dx * s_ + dy * c;
        let mut overshoot = 0.0;
        if seg == 0 && along < 0.0 {
            overshoot = along;
        }
        if seg == self.points.len() - 2 && along > seg_len {
            overshoot = along - seg_len;
        }
        Projection {
            s: self.cumulative[seg] + t * seg_len,
            lateral,
            distance,
            tangent,
            overshoot,
        }
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Rotates a world-frame delta into the frame of a body with the given heading.
pub fn to_ego(dx: f64, dy: f64, heading: f64) -> (f64, f64) {
    let (s, c) = heading.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

/// Inverse of [`to_ego`].
pub fn from_ego(ex: f64, ey: f64, heading: f64) -> (f64, f64) {
    let (s, c) = heading.sin_cos();
    (c * ex - s * ey, s * ex + c * ey)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25)).abs() - 0.25 < 1e-15);
    }

    #[test]
    fn project_on_bent_line() {
        let pl = Polyline::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]);
        assert_eq!(pl.length(), 20.0);
        let p = pl.project([5.0, 1.0]);
        assert_eq!(p.s, 5.0);
        assert_eq!(p.lateral, 1.0);
        assert_eq!(p.distance, 1.0);
        let p = pl.project([11.0, 4.0]);
        assert!((p.s - 14.0).abs() < 1e-12);
        assert!((p.lateral + 1.0).abs() < 1e-12);
        let p = pl.project([10.0, 13.0]);
        assert!((p.overshoot - 3.0).abs() < 1e-12);
        let (pt, h) = pl.point_at(15.0);
        assert!((pt[0] - 10.0).abs() < 1e-12 && (pt[1] - 5.0).abs() < 1e-12);
        assert!((h - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ego_round_trip() {
        let (ex, ey) = to_ego(3.0, -2.0, 0.7);
        let (x, y) = from_ego(ex, ey, 0.7);
        assert!((x - 3.0).abs() < 1e-12 && (y + 2.0).abs() < 1e-12);
        let (ex, ey) = to_ego(0.0, 1.0, PI / 2.0);
        assert!((ex - 1.0).abs() < 1e-12 && ey.abs() < 1e-12);
    }
}
