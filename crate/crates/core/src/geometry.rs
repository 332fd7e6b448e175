//! Analytic geometry of scene primitives: signed distance with gradient,
//! ray intersection, footprint separation, and convex minimization of the
//! distance field over segments and discs.

use nalgebra::{Rotation3, Vector2, Vector3};

use crate::scene::{Primitive, Shape};

pub type Vec3 = Vector3<f64>;

const RAY_EPS: f64 = 1e-12;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

impl Primitive {
    fn to_local(&self, p: &Vec3) -> Vec3 {
        Rotation3::from_axis_angle(&Vector3::z_axis(), -self.yaw) * (p - self.position)
    }

    fn to_world_dir(&self, v: &Vec3) -> Vec3 {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw) * v
    }

    /// Radius of a sphere around `position` that contains the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { hx, hy, hz } => (hx * hx + hy * hy + hz * hz).sqrt(),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, height } => (radius * radius + height * height / 4.0).sqrt(),
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.sdf_grad(p).0
    }

    /// Signed distance (negative inside) and outward unit gradient.
    pub fn sdf_grad(&self, p: &Vec3) -> (f64, Vec3) {
        match self.shape {
            Shape::Sphere { radius } => {
                let d = p - self.position;
                let n = d.norm();
                let g = if n > 0.0 { d / n } else { Vector3::z() };
                (n - radius, g)
            }
            Shape::Box { hx, hy, hz } => {
                let l = self.to_local(p);
                let h = Vector3::new(hx, hy, hz);
                let q = l.abs() - h;
                let outside = q.map(|v| v.max(0.0));
                let on = outside.norm();
                let sign = l.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
                if on > 0.0 {
                    let g = outside.component_mul(&sign) / on;
                    (on, self.to_world_dir(&g))
                } else {
                    let k = q.imax();
                    let mut g = Vector3::zeros();
                    g[k] = sign[k];
                    (q[k], self.to_world_dir(&g))
                }
            }
            Shape::Cylinder { radius, height } => {
                let l = p - self.position;
                let rxy = (l.x * l.x + l.y * l.y).sqrt();
                let er = if rxy > 0.0 {
                    Vector3::new(l.x / rxy, l.y / rxy, 0.0)
                } else {
                    Vector3::x()
                };
                let ez = Vector3::new(0.0, 0.0, if l.z < 0.0 { -1.0 } else { 1.0 });
                let dx = rxy - radius;
                let dz = l.z.abs() - height / 2.0;
                if dx > 0.0 && dz > 0.0 {
                    let n = (dx * dx + dz * dz).sqrt();
                    (n, (er * dx + ez * dz) / n)
                } else if dx > 0.0 {
                    (dx, er)
                } else if dz > 0.0 {
                    (dz, ez)
                } else if dx > dz {
                    (dx, er)
                } else {
                    (dz, ez)
                }
            }
        }
    }

    /// Nearest positive ray parameter at which `origin + t * dir` enters
    /// the primitive.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        // Cheap rejection against the bounding sphere.
        let oc = origin - self.position;
        let br = self.bounding_radius();
        let b = oc.dot(dir);
        let c = oc.norm_squared() - br * br;
        let dd = dir.norm_squared();
        if c > 0.0 && (b > 0.0 || b * b - dd * c < 0.0) {
            return None;
        }
        match self.shape {
            Shape::Sphere { radius } => {
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - dd * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / dd;
                let t1 = (-b + s) / dd;
                if t0 > RAY_EPS {
                    Some(t0)
                } else if t1 > RAY_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Box { hx, hy, hz } => {
                let o = self.to_local(origin);
                let d = Rotation3::from_axis_angle(&Vector3::z_axis(), -self.yaw) * dir;
                let h = [hx, hy, hz];
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if o[k].abs() > h[k] {
                            return None;
                        }
                    } else {
                        let a = (-h[k] - o[k]) / d[k];
                        let b = (h[k] - o[k]) / d[k];
                        tmin = tmin.max(a.min(b));
                        tmax = tmax.min(a.max(b));
                    }
                }
                if tmax < tmin || tmax <= RAY_EPS {
                    None
                } else if tmin > RAY_EPS {
                    Some(tmin)
                } else {
                    Some(tmax)
                }
            }
            Shape::Cylinder { radius, height } => {
                let o = oc;
                let hh = height / 2.0;
                let mut best = f64::INFINITY;
                let a = dir.x * dir.x + dir.y * dir.y;
                if a > 1e-300 {
                    let b = o.x * dir.x + o.y * dir.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = o.z + t * dir.z;
                            if t > RAY_EPS && z.abs() <= hh {
                                best = best.min(t);
                            }
                        }
                    }
                }
                if dir.z.abs() > 1e-300 {
                    for zc in [hh, -hh] {
                        let t = (zc - o.z) / dir.z;
                        let x = o.x + t * dir.x;
                        let y = o.y + t * dir.y;
                        if t > RAY_EPS && x * x + y * y <= radius * radius {
                            best = best.min(t);
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }

    pub fn footprint(&self) -> Footprint {
        let c = Vector2::new(self.position.x, self.position.y);
        match self.shape {
            Shape::Sphere { radius } | Shape::Cylinder { radius, .. } => Footprint::Circle { center: c, radius },
            Shape::Box { hx, hy, .. } => Footprint::Rect {
                center: c,
                half: Vector2::new(hx, hy),
                yaw: self.yaw,
            },
        }
    }

    /// Minimum of the signed distance over the segment `a..b`, returned as
    /// `(distance, closest point on the segment)`.
    pub fn segment_min(&self, a: &Vec3, b: &Vec3) -> (f64, Vec3) {
        if let Shape::Sphere { radius } = self.shape {
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((self.position - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let p = a + ab * t;
            return ((p - self.position).norm() - radius, p);
        }
        let f = |t: f64| self.sdf(&(a + (b - a) * t));
        let t = golden_min(f, 0.0, 1.0, 1e-10);
        let p = a + (b - a) * t;
        (self.sdf(&p), p)
    }

    /// Minimum of the signed distance over a flat disc.
    pub fn disc_min(&self, center: &Vec3, normal: &Vec3, radius: f64) -> (f64, Vec3) {
        let (e1, e2) = orthonormal_pair(normal);
        let point = |s: f64, t: f64| center + e1 * s + e2 * t;
        let inner = |s: f64| {
            let w = (radius * radius - s * s).max(0.0).sqrt();
            let t = golden_min(|t| self.sdf(&point(s, t)), -w, w, 1e-9);
            (self.sdf(&point(s, t)), t)
        };
        let s = golden_min(|s| inner(s).0, -radius, radius, 1e-9);
        let (d, t) = inner(s);
        (d, point(s, t))
    }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    if hi - lo <= tol {
        return 0.5 * (lo + hi);
    }
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    // Endpoints can beat the interior bracket on monotone functions.
    let mid = 0.5 * (lo + hi);
    [mid, lo, hi]
        .into_iter()
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap_or(mid)
}

pub fn orthonormal_pair(n: &Vec3) -> (Vec3, Vec3) {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// 2D outline of a primitive on the table plane.
#[derive(Debug, Clone, Copy)]
pub enum Footprint {
    Circle { center: Vector2<f64>, radius: f64 },
    Rect { center: Vector2<f64>, half: Vector2<f64>, yaw: f64 },
}

fn rot2(yaw: f64, v: Vector2<f64>) -> Vector2<f64> {
    let (s, c) = yaw.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

impl Footprint {
    fn corners(&self) -> Vec<Vector2<f64>> {
        match *self {
            Footprint::Circle { center, .. } => vec![center],
            Footprint::Rect { center, half, yaw } => [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
                .iter()
                .map(|&(sx, sy)| center + rot2(yaw, Vector2::new(sx * half.x, sy * half.y)))
                .collect(),
        }
    }

    /// Signed distance from a point to this outline (negative inside).
    pub fn point_distance(&self, p: Vector2<f64>) -> f64 {
        match *self {
            Footprint::Circle { center, radius } => (p - center).norm() - radius,
            Footprint::Rect { center, half, yaw } => {
                let l = rot2(-yaw, p - center);
                let q = l.abs() - half;
                let out = Vector2::new(q.x.max(0.0), q.y.max(0.0)).norm();
                out + q.x.max(q.y).min(0.0)
            }
        }
    }

    /// Separation between two outlines; negative values measure overlap.
    pub fn signed_distance(&self, other: &Footprint) -> f64 {
        use Footprint::*;
        match (self, other) {
            (Circle { center: a, radius: ra }, Circle { center: b, radius: rb }) => (a - b).norm() - ra - rb,
            (Circle { center, radius }, r @ Rect { .. }) | (r @ Rect { .. }, Circle { center, radius }) => {
                r.point_distance(*center) - radius
            }
            (Rect { .. }, Rect { .. }) => {
                let ca = self.corners();
                let cb = other.corners();
                let mut min_overlap = f64::INFINITY;
                let mut separated = false;
                for yaw in [self.yaw(), other.yaw()] {
                    for axis in [rot2(yaw, Vector2::x()), rot2(yaw, Vector2::y())] {
                        let proj = |cs: &[Vector2<f64>]| {
                            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                                let d = c.dot(&axis);
                                (lo.min(d), hi.max(d))
                            })
                        };
                        let (alo, ahi) = proj(&ca);
                        let (blo, bhi) = proj(&cb);
                        let overlap = ahi.min(bhi) - alo.max(blo);
                        if overlap <= 0.0 {
                            separated = true;
                        }
                        min_overlap = min_overlap.min(overlap);
                    }
                }
                if !separated {
                    return -min_overlap;
                }
                let from_a = ca.iter().map(|c| other.point_distance(*c));
                let from_b = cb.iter().map(|c| self.point_distance(*c));
                from_a.chain(from_b).fold(f64::INFINITY, f64::min)
            }
        }
    }

    fn yaw(&self) -> f64 {
        match *self {
            Footprint::Rect { yaw, .. } => yaw,
            Footprint::Circle { .. } => 0.0,
        }
    }

    pub fn inside_square(&self, extent: f64) -> bool {
        match *self {
            Footprint::Circle { center, radius } => {
                center.x.abs() + radius <= extent && center.y.abs() + radius <= extent
            }
            Footprint::Rect { .. } => self.corners().iter().all(|c| c.x.abs() <= extent && c.y.abs() <= extent),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> Primitive {
        Primitive {
            id: 0,
            shape: Shape::Sphere { radius: r },
            position: Vector3::new(0.0, 0.0, r),
            yaw: 0.0,
        }
    }

    fn boxp(yaw: f64) -> Primitive {
        Primitive {
            id: 1,
            shape: Shape::Box { hx: 0.03, hy: 0.02, hz: 0.04 },
            position: Vector3::new(0.1, -0.05, 0.04),
            yaw,
        }
    }

    fn cyl() -> Primitive {
        Primitive {
            id: 2,
            shape: Shape::Cylinder { radius: 0.025, height: 0.1 },
            position: Vector3::new(-0.1, 0.05, 0.05),
            yaw: 0.3,
        }
    }

    #[test]
    fn sdf_gradient_matches_finite_difference() {
        let prims = [sphere(0.03), boxp(0.7), cyl()];
        let pts = [
            Vector3::new(0.01, 0.02, 0.09),
            Vector3::new(0.14, -0.02, 0.02),
            Vector3::new(0.11, -0.06, 0.05),
            Vector3::new(-0.06, 0.07, 0.12),
            Vector3::new(-0.1, 0.04, 0.06),
        ];
        for p in &prims {
            for x in &pts {
                let (_, g) = p.sdf_grad(x);
                let h = 1e-6;
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    let fd = (p.sdf(&(x + e)) - p.sdf(&(x - e))) / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-5, "{:?} at {x:?}: fd {fd} vs {}", p.shape, g[k]);
                }
            }
        }
    }

    #[test]
    fn ray_hits_land_on_surface() {
        let prims = [sphere(0.03), boxp(0.7), cyl()];
        let origin = Vector3::new(0.0, 0.0, 0.6);
        for p in &prims {
            let target = p.position + Vector3::new(0.004, -0.003, 0.0);
            let dir = (target - origin).normalize();
            let t = p.ray_hit(&origin, &dir).expect("aimed at primitive");
            let hit = origin + dir * t;
            assert!(p.sdf(&hit).abs() < 1e-9, "{:?}", p.shape);
        }
    }

    #[test]
    fn ray_misses() {
        let p = sphere(0.03);
        let o = Vector3::new(0.2, 0.2, 0.6);
        assert!(p.ray_hit(&o, &-Vector3::z()).is_none());
    }

    #[test]
    fn segment_min_finds_closest_point() {
        let p = boxp(0.4);
        let a = Vector3::new(0.0, -0.05, 0.04);
        let b = Vector3::new(0.2, -0.05, 0.04);
        let (d, _) = p.segment_min(&a, &b);
        assert!(d < 0.0);
        let brute = (0..=10_000)
            .map(|i| p.sdf(&(a + (b - a) * (i as f64 / 10_000.0))))
            .fold(f64::INFINITY, f64::min);
        assert!((d - brute).abs() < 1e-6);
    }

    #[test]
    fn disc_min_matches_sampling() {
        let p = cyl();
        let c = Vector3::new(-0.1, 0.05, 0.13);
        let n = Vector3::new(0.2, 0.1, 1.0).normalize();
        let (d, _) = p.disc_min(&c, &n, 0.04);
        let (e1, e2) = orthonormal_pair(&n);
        let mut brute = f64::INFINITY;
        for i in -100..=100 {
            for j in -100..=100 {
                let (s, t) = (i as f64 * 0.0004, j as f64 * 0.0004);
                if s * s + t * t <= 0.04 * 0.04 {
                    brute = brute.min(p.sdf(&(c + e1 * s + e2 * t)));
                }
            }
        }
        assert!(d <= brute + 1e-9 && brute - d < 1e-4, "{d} vs {brute}");
    }

    #[test]
    fn footprint_distances() {
        let a = Footprint::Circle { center: Vector2::new(0.0, 0.0), radius: 0.02 };
        let b = Footprint::Circle { center: Vector2::new(0.05, 0.0), radius: 0.02 };
        assert!((a.signed_distance(&b) - 0.01).abs() < 1e-12);
        let r1 = Footprint::Rect { center: Vector2::new(0.0, 0.0), half: Vector2::new(0.02, 0.02), yaw: 0.0 };
        let r2 = Footprint::Rect { center: Vector2::new(0.05, 0.0), half: Vector2::new(0.02, 0.02), yaw: 0.0 };
        assert!((r1.signed_distance(&r2) - 0.01).abs() < 1e-12);
        let r3 = Footprint::Rect { center: Vector2::new(0.03, 0.0), half: Vector2::new(0.02, 0.02), yaw: 0.0 };
        assert!((r1.signed_distance(&r3) + 0.01).abs() < 1e-12);
        assert!((r1.signed_distance(&b) - 0.01).abs() < 1e-12);
    }
}
