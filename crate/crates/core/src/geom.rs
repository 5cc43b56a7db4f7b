//! Vector math, shading frames, Fibonacci hemisphere sets, camera rays and
//! analytic ray/primitive intersection.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractional part of the golden ratio, `(sqrt(5) - 1) / 2`.
pub const GOLDEN_RATIO_CONJUGATE: f64 = 0.618_033_988_749_894_8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Normalizes into a [`Direction`]; `None` for (near) zero or non-finite vectors.
    pub fn normalized(self) -> Option<Direction> {
        let len = self.length();
        if len.is_finite() && len > 1e-300 {
            Some(Direction(self / len))
        } else {
            None
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A unit-length vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    /// Wraps `v` without normalizing. Callers guarantee `|v| = 1`.
    pub fn new_unchecked(v: Vec3) -> Self {
        debug_assert!((v.length() - 1.0).abs() < 1e-6, "not unit length: {v:?}");
        Direction(v)
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn dot(self, o: Direction) -> f64 {
        self.0.dot(o.0)
    }
}

impl Neg for Direction {
    type Output = Direction;
    fn neg(self) -> Direction {
        Direction(-self.0)
    }
}

/// Unit vector halfway between `w_o` and `w_i`.
pub fn halfway(w_o: Direction, w_i: Direction) -> Result<Direction> {
    let sum = w_o.vec() + w_i.vec();
    let len = sum.length();
    if len < 1e-9 {
        return Err(Error::DegeneratePair);
    }
    Ok(Direction(sum / len))
}

/// Right-handed orthonormal frame whose third axis is the surface normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingFrame {
    pub tangent: Direction,
    pub bitangent: Direction,
    pub normal: Direction,
}

impl ShadingFrame {
    pub fn to_world(&self, local: Vec3) -> Vec3 {
        self.tangent.vec() * local.x + self.bitangent.vec() * local.y + self.normal.vec() * local.z
    }

    pub fn to_local(&self, world: Vec3) -> Vec3 {
        Vec3::new(
            world.dot(self.tangent.vec()),
            world.dot(self.bitangent.vec()),
            world.dot(self.normal.vec()),
        )
    }
}

/// Builds a frame around `n` by Gram-Schmidt against the coordinate axis
/// least aligned with it (first axis wins ties).
pub fn build_frame(n: Direction) -> ShadingFrame {
    let v = n.vec();
    let (ax, ay, az) = (v.x.abs(), v.y.abs(), v.z.abs());
    let axis = if ax <= ay && ax <= az {
        Vec3::X
    } else if ay <= az {
        Vec3::Y
    } else {
        Vec3::Z
    };
    let t = axis - v * axis.dot(v);
    let t = t / t.length();
    let b = v.cross(t);
    let b = b / b.length();
    ShadingFrame {
        tangent: Direction(t),
        bitangent: Direction(b),
        normal: n,
    }
}

/// Unit-hemisphere directions in local coordinates (z up).
///
/// Uniform in `z_k = (k + 0.5) / n`, azimuth on the golden-angle spiral.
pub fn fibonacci_local(n_samples: usize, rotation: f64) -> Vec<Vec3> {
    assert!(n_samples >= 1, "fibonacci set needs at least one sample");
    (0..n_samples)
        .map(|k| {
            let z = (k as f64 + 0.5) / n_samples as f64;
            let phi = 2.0 * PI * ((k as f64 * GOLDEN_RATIO_CONJUGATE).fract()) + rotation;
            let s = (1.0 - z * z).max(0.0).sqrt();
            Vec3::new(s * phi.cos(), s * phi.sin(), z)
        })
        .collect()
}

/// Fixed incident-direction set with its uniform quadrature weight `2π/N`.
#[derive(Clone, Debug)]
pub struct DirectionSet {
    pub dirs: Vec<Direction>,
    pub quad_weight: f64,
}

impl DirectionSet {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Transforms a local set (from [`fibonacci_local`]) into `frame`.
    pub fn from_local(local: &[Vec3], frame: &ShadingFrame) -> Self {
        let dirs = local
            .iter()
            .map(|&l| {
                let w = frame.to_world(l);
                Direction(w / w.length())
            })
            .collect::<Vec<_>>();
        let quad_weight = 2.0 * PI / dirs.len() as f64;
        DirectionSet { dirs, quad_weight }
    }
}

pub fn fibonacci_hemisphere(n_samples: usize, frame: &ShadingFrame, rotation: f64) -> DirectionSet {
    DirectionSet::from_local(&fibonacci_local(n_samples, rotation), frame)
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Direction,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir.vec() * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidInput("camera resolution must be at least 1x1".into()));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < PI) {
            return Err(Error::InvalidInput("camera fov must lie in (0, pi)".into()));
        }
        let forward = (self.look_at - self.position).normalized();
        match forward {
            Some(f) if f.vec().cross(self.up).length() > 1e-9 => Ok(()),
            _ => Err(Error::InvalidInput("camera look direction degenerate or parallel to up".into())),
        }
    }
}

/// Pinhole rays through pixel centers, row-major from the top-left pixel.
pub fn camera_rays(camera: &Camera) -> Vec<Ray> {
    let forward = (camera.look_at - camera.position)
        .normalized()
        .expect("camera position equals look_at")
        .vec();
    let right = forward.cross(camera.up);
    let right = right / right.length();
    let up = right.cross(forward);
    let half_h = (camera.vertical_fov * 0.5).tan();
    let half_w = half_h * camera.width as f64 / camera.height as f64;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height {
        let sy = 1.0 - 2.0 * (y as f64 + 0.5) / camera.height as f64;
        for x in 0..camera.width {
            let sx = 2.0 * (x as f64 + 0.5) / camera.width as f64 - 1.0;
            let d = forward + right * (sx * half_w) + up * (sy * half_h);
            rays.push(Ray {
                origin: camera.position,
                dir: d.normalized().expect("finite camera ray"),
            });
        }
    }
    rays
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Square patch of side `extent` centered on `point`.
    Plane { point: Vec3, normal: Vec3, extent: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub normal: Direction,
    pub uv: (f64, f64),
    pub primitive_id: usize,
    pub t_hit: f64,
}

const T_MIN: f64 = 1e-9;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidInput("scene has no primitives".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            match &p.shape {
                Shape::Sphere { center, radius } => {
                    if !(*radius > 0.0 && radius.is_finite()) || !center.is_finite() {
                        return Err(Error::InvalidInput(format!("primitive {i}: bad sphere")));
                    }
                }
                Shape::Plane { point, normal, extent } => {
                    if (normal.length() - 1.0).abs() > 1e-6 || !point.is_finite() || !(*extent > 0.0) {
                        return Err(Error::InvalidInput(format!("primitive {i}: bad plane")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn intersect_shape(shape: &Shape, ray: &Ray) -> Option<(f64, Vec3, (f64, f64))> {
    let d = ray.dir.vec();
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = ray.origin - center;
            let half_b = oc.dot(d);
            let c = oc.length_squared() - radius * radius;
            let disc = half_b * half_b - c;
            if !(disc >= 0.0) {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-half_b - sq, -half_b + sq].into_iter().find(|&t| t > T_MIN)?;
            let p = ray.at(t);
            let n = (p - center) / radius;
            let n = n / n.length();
            // Polar angle from +y, azimuth in the xz plane.
            let theta = n.y.clamp(-1.0, 1.0).acos();
            let mut phi = n.z.atan2(n.x);
            if phi < 0.0 {
                phi += 2.0 * PI;
            }
            let uv = ((phi / (2.0 * PI)).clamp(0.0, 1.0), (theta / PI).clamp(0.0, 1.0));
            Some((t, n, uv))
        }
        Shape::Plane { point, normal, extent } => {
            let denom = d.dot(normal);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (point - ray.origin).dot(normal) / denom;
            if !(t > T_MIN) {
                return None;
            }
            let p = ray.at(t);
            let frame = build_frame(Direction(normal));
            let rel = p - point;
            let u = rel.dot(frame.tangent.vec()) / extent + 0.5;
            let v = rel.dot(frame.bitangent.vec()) / extent + 0.5;
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return None;
            }
            Some((t, normal, (u, v)))
        }
    }
}

/// Nearest positive-distance hit; exact ties go to the lowest primitive index.
pub fn intersect(scene: &Scene, ray: &Ray) -> Option<SurfaceHit> {
    let mut best: Option<SurfaceHit> = None;
    for (id, prim) in scene.primitives.iter().enumerate() {
        let Some((t, n, uv)) = intersect_shape(&prim.shape, ray) else {
            continue;
        };
        if !t.is_finite() || best.as_ref().is_some_and(|b| t >= b.t_hit) {
            continue;
        }
        // Orient the normal toward the ray origin.
        let n = if n.dot(ray.dir.vec()) > 0.0 { -n } else { n };
        best = Some(SurfaceHit {
            point: ray.at(t),
            normal: Direction(n),
            uv,
            primitive_id: id,
            t_hit: t,
        });
    }
    best
}

/// True when any primitive blocks the open segment from `from` to `to`.
pub fn occluded(scene: &Scene, from: Vec3, to: Vec3) -> bool {
    let delta = to - from;
    let dist = delta.length();
    let Some(dir) = delta.normalized() else {
        return false;
    };
    let ray = Ray { origin: from, dir };
    scene.primitives.iter().any(|p| {
        intersect_shape(&p.shape, &ray).is_some_and(|(t, _, _)| t > 1e-6 && t < dist * (1.0 - 1e-9))
    })
}
