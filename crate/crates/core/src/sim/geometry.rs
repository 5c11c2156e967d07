use serde::{Deserialize, Serialize};

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Arc-length parameterised polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    /// Cumulative arc length at each point.
    pub cumulative: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub d: f64,
    pub segment: usize,
}

impl Polyline {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                let q = points[i - 1];
                acc += (p[0] - q[0]).hypot(p[1] - q[1]);
            }
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn segment_dir(&self, i: usize) -> ([f64; 2], f64) {
        let (a, b) = (self.points[i], self.points[i + 1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        ([dx / len, dy / len], len)
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = Projection {
            s: 0.0,
            d: 0.0,
            segment: 0,
        };
        let mut best_dist = f64::INFINITY;
        for i in 0..self.points.len().saturating_sub(1) {
            let a = self.points[i];
            let (u, len) = self.segment_dir(i);
            let (rx, ry) = (p[0] - a[0], p[1] - a[1]);
            let along = (rx * u[0] + ry * u[1]).clamp(0.0, len);
            let (cx, cy) = (a[0] + along * u[0], a[1] + along * u[1]);
            let dist = (p[0] - cx).hypot(p[1] - cy);
            if dist < best_dist - 1e-12 {
                best_dist = dist;
                let side = u[0] * ry - u[1] * rx;
                best = Projection {
                    s: self.cumulative[i] + along,
                    d: side.signum() * dist,
                    segment: i,
                };
            }
        }
        best
    }

    /// Point and heading at arc length `s`; beyond either end the end
    /// segment is extended in a straight line.
    pub fn sample(&self, s: f64) -> ([f64; 2], f64) {
        let n = self.points.len();
        let i = match self.cumulative.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(j) => j - 1,
            None => n - 2,
        }
        .min(n - 2);
        let (u, _) = self.segment_dir(i);
        let along = s - self.cumulative[i];
        let a = self.points[i];
        ([a[0] + along * u[0], a[1] + along * u[1]], u[1].atan2(u[0]))
    }

    /// Point at arc length `s` shifted `d` metres to the left.
    pub fn offset_point(&self, s: f64, d: f64) -> [f64; 2] {
        let (p, h) = self.sample(s);
        [p[0] - d * h.sin(), p[1] + d * h.cos()]
    }
}

/// Oriented bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: [f64; 2],
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    fn corners(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
            .into_iter()
            .enumerate()
        {
            out[k] = [
                self.center[0] + a * c - b * s,
                self.center[1] + a * s + b * c,
            ];
        }
        out
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        let axes = [
            [self.heading.cos(), self.heading.sin()],
            [-self.heading.sin(), self.heading.cos()],
            [other.heading.cos(), other.heading.sin()],
            [-other.heading.sin(), other.heading.cos()],
        ];
        for ax in axes {
            let proj = |cs: &[[f64; 2]; 4]| {
                cs.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        let v = p[0] * ax[0] + p[1] * ax[1];
                        (lo.min(v), hi.max(v))
                    })
            };
            let ((a0, a1), (b0, b1)) = (proj(&ca), proj(&cb));
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_on_straight_line() {
        let line = Polyline::new(vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]);
        let p = line.project([12.0, 1.5]);
        assert!((p.s - 12.0).abs() < 1e-12);
        assert!((p.d - 1.5).abs() < 1e-12);
        assert_eq!(line.project([5.0, -2.0]).d, -2.0);
        assert_eq!(line.length(), 20.0);
    }

    #[test]
    fn sample_and_offset() {
        let line = Polyline::new(vec![[0.0, 0.0], [0.0, 10.0]]);
        let (p, h) = line.sample(4.0);
        assert!((p[1] - 4.0).abs() < 1e-12 && (h - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let q = line.offset_point(4.0, 2.0);
        assert!((q[0] + 2.0).abs() < 1e-12);
        let (beyond, _) = line.sample(12.0);
        assert!((beyond[1] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn obb_overlap() {
        let a = Obb {
            center: [0.0, 0.0],
            heading: 0.0,
            length: 4.0,
            width: 2.0,
        };
        let b = Obb {
            center: [3.9, 0.0],
            heading: 0.0,
            length: 4.0,
            width: 2.0,
        };
        let c = Obb {
            center: [4.1, 0.0],
            heading: 0.0,
            length: 4.0,
            width: 2.0,
        };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        let rotated = Obb {
            center: [2.5, 2.5],
            heading: std::f64::consts::FRAC_PI_4,
            length: 4.0,
            width: 1.0,
        };
        assert!(!a.overlaps(&Obb {
            center: [3.5, 3.5],
            ..rotated
        }));
        assert!(a.overlaps(&Obb {
            center: [1.5, 1.5],
            ..rotated
        }));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
    }
}
