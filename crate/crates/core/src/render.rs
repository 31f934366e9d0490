//! Flat-shaded software rasterizer for parametric shapes seen from a
//! spherical camera rig.
//!
//! Objects sit at the origin with `+z` up. A camera at polar angle `theta`
//! (from `+z`), azimuth `phi` and distance `r` looks at the origin. Triangles
//! are projected with a pinhole model, depth-tested per pixel centre, and
//! shaded with a Lambertian term whose light direction is fixed in camera
//! space, so lighting follows the camera around the object.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Cube,
    Sphere,
    Cone,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Cube, ShapeKind::Sphere, ShapeKind::Cone, ShapeKind::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
        }
    }

    /// Default `(size, ratio)` giving a bounding radius close to 1.
    pub fn default_size(self) -> (f64, f64) {
        match self {
            ShapeKind::Cube => (0.6, 1.0),
            ShapeKind::Sphere => (0.9, 1.0),
            ShapeKind::Cone => (0.7, 1.0),
            ShapeKind::Torus => (0.65, 0.38),
        }
    }
}

/// One object instance.
///
/// `size` is the half-extent (cube), radius (sphere), base radius (cone) or
/// major radius (torus). `ratio` is the cone's half-height over base radius
/// or the torus' minor over major radius; cubes and spheres ignore it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub kind: ShapeKind,
    pub size: f64,
    pub ratio: f64,
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    pub albedo: [f64; 3],
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.ratio > 0.0) {
            return Err(Error::invalid("shape size parameters must be positive"));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("albedo components must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn bounding_radius(&self) -> f64 {
        let s = self.size;
        match self.kind {
            ShapeKind::Cube => s * 3f64.sqrt(),
            ShapeKind::Sphere => s,
            ShapeKind::Cone => s * (1.0 + self.ratio * self.ratio).sqrt(),
            ShapeKind::Torus => s * (1.0 + self.ratio),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Polar angle from `+z`, in `[0, pi]`.
    pub theta: f64,
    /// Azimuth in `[0, 2 pi)`.
    pub phi: f64,
    /// Distance from the origin.
    pub r: f64,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=PI).contains(&self.theta) && (0.0..TAU).contains(&self.phi) && self.r > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid camera pose {self:?}")))
        }
    }

    fn position(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3([self.r * st * cp, self.r * st * sp, self.r * ct])
    }
}

/// Spherical coordinate of a camera pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseAxis {
    Polar,
    Azimuth,
    Radius,
}

/// Multiplies each jittered coordinate by `1 + u`, `u ~ U(-jitter_frac, jitter_frac)`,
/// then restores valid ranges (polar clamped, azimuth wrapped).
///
/// With `axis_restrict` set only that coordinate moves. Draws happen in
/// polar, azimuth, radius order and only for jittered coordinates.
pub fn sample_camera<R: Rng + ?Sized>(
    base: CameraPose,
    jitter_frac: f64,
    axis_restrict: Option<PoseAxis>,
    rng: &mut R,
) -> Result<CameraPose> {
    if !(0.0..1.0).contains(&jitter_frac) {
        return Err(Error::invalid(format!("jitter fraction {jitter_frac} outside [0, 1)")));
    }
    base.validate()?;
    if jitter_frac == 0.0 {
        return Ok(base);
    }
    let active = |axis| axis_restrict.is_none_or(|a| a == axis);
    let mut draw = |axis: PoseAxis, v: f64| {
        if active(axis) {
            v * (1.0 + rng.gen_range(-jitter_frac..=jitter_frac))
        } else {
            v
        }
    };
    let theta = draw(PoseAxis::Polar, base.theta);
    let phi = draw(PoseAxis::Azimuth, base.phi);
    let r = draw(PoseAxis::Radius, base.r);
    Ok(CameraPose {
        theta: theta.clamp(0.0, PI),
        phi: wrap_angle(phi),
        r,
    })
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view, degrees.
    pub fov_deg: f64,
    pub background: [f64; 3],
    pub ambient: f64,
    /// Fraction of the background colour blended into every object pixel,
    /// a uniform atmospheric haze in `[0, 1)`.
    pub haze: f64,
    /// Elevation of the light above the viewing axis, degrees, in camera space.
    pub light_elevation_deg: f64,
    /// Segments used for spheres, cones and tori.
    pub segments: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 32,
            height: 32,
            fov_deg: 55.0,
            background: [0.9, 0.9, 0.9],
            ambient: 0.3,
            haze: 0.9,
            light_elevation_deg: 30.0,
            segments: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Vec3([f64; 3]);

impl Vec3 {
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
    fn scale(self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
    fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
    fn cross(self, o: Vec3) -> Vec3 {
        let (a, b) = (self.0, o.0);
        Vec3([
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ])
    }
    fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    fn normalized(self) -> Vec3 {
        self.scale(1.0 / self.norm())
    }
}

type Triangle = [Vec3; 3];

fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3([c * v.0[0] - s * v.0[1], s * v.0[0] + c * v.0[1], v.0[2]])
}

fn quad(out: &mut Vec<Triangle>, a: Vec3, b: Vec3, c: Vec3, d: Vec3) {
    out.push([a, b, c]);
    out.push([a, c, d]);
}

/// Triangle soup for a shape, in world coordinates.
fn mesh(shape: &ShapeSpec, segments: usize) -> Vec<Triangle> {
    let s = shape.size;
    let n = segments.max(3);
    let mut tris = Vec::new();
    match shape.kind {
        ShapeKind::Cube => {
            let v = |x: f64, y: f64, z: f64| Vec3([x * s, y * s, z * s]);
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let corner = |a: f64, b: f64| {
                        let mut p = [0.0; 3];
                        p[axis] = sign;
                        p[(axis + 1) % 3] = a;
                        p[(axis + 2) % 3] = b;
                        v(p[0], p[1], p[2])
                    };
                    quad(
                        &mut tris,
                        corner(-1.0, -1.0),
                        corner(1.0, -1.0),
                        corner(1.0, 1.0),
                        corner(-1.0, 1.0),
                    );
                }
            }
        }
        ShapeKind::Sphere => {
            let p = |i: usize, j: usize| {
                let th = PI * i as f64 / n as f64;
                let ph = TAU * j as f64 / n as f64;
                Vec3([s * th.sin() * ph.cos(), s * th.sin() * ph.sin(), s * th.cos()])
            };
            for i in 0..n {
                for j in 0..n {
                    quad(&mut tris, p(i, j), p(i + 1, j), p(i + 1, j + 1), p(i, j + 1));
                }
            }
        }
        ShapeKind::Cone => {
            let half_h = s * shape.ratio;
            let apex = Vec3([0.0, 0.0, half_h]);
            let centre = Vec3([0.0, 0.0, -half_h]);
            let rim = |j: usize| {
                let ph = TAU * j as f64 / n as f64;
                Vec3([s * ph.cos(), s * ph.sin(), -half_h])
            };
            for j in 0..n {
                tris.push([apex, rim(j), rim(j + 1)]);
                tris.push([centre, rim(j + 1), rim(j)]);
            }
        }
        ShapeKind::Torus => {
            let minor = s * shape.ratio;
            let p = |i: usize, j: usize| {
                let u = TAU * i as f64 / n as f64;
                let v = TAU * j as f64 / n as f64;
                let ring = s + minor * v.cos();
                Vec3([ring * u.cos(), ring * u.sin(), minor * v.sin()])
            };
            for i in 0..n {
                for j in 0..n {
                    quad(&mut tris, p(i, j), p(i + 1, j), p(i + 1, j + 1), p(i, j + 1));
                }
            }
        }
    }
    // Skip degenerate slivers at sphere poles.
    tris.retain(|t| t[1].sub(t[0]).cross(t[2].sub(t[0])).norm() > 1e-12);
    for t in tris.iter_mut() {
        for v in t.iter_mut() {
            *v = rotate_z(*v, shape.yaw);
        }
    }
    tris
}

struct Camera {
    eye: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
}

impl Camera {
    fn look_at_origin(pose: &CameraPose) -> Camera {
        let eye = pose.position();
        let forward = eye.scale(-1.0).normalized();
        let mut world_up = Vec3([0.0, 0.0, 1.0]);
        if forward.cross(world_up).norm() < 1e-9 {
            world_up = Vec3([0.0, 1.0, 0.0]);
        }
        let right = forward.cross(world_up).normalized();
        let up = right.cross(forward);
        Camera {
            eye,
            right,
            up,
            forward,
        }
    }

    /// Camera-space coordinates: (right, up, depth along forward).
    fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = p.sub(self.eye);
        Vec3([d.dot(self.right), d.dot(self.up), d.dot(self.forward)])
    }
}

/// Renders `shape` from `pose` into an `[H, W, 3]` image with values in `[0, 1]`.
pub fn render(shape: &ShapeSpec, pose: &CameraPose, config: &RenderConfig) -> Result<Tensor> {
    shape.validate()?;
    pose.validate()?;
    let radius = shape.bounding_radius();
    if pose.r <= radius {
        return Err(Error::DegeneratePose {
            distance: pose.r,
            radius,
        });
    }
    let (w, h) = (config.width, config.height);
    if w == 0 || h == 0 {
        return Err(Error::invalid("image extents must be positive"));
    }
    if !(0.0..1.0).contains(&config.haze) {
        return Err(Error::invalid("haze must lie in [0, 1)"));
    }
    let cam = Camera::look_at_origin(pose);
    let focal = 1.0 / (config.fov_deg.to_radians() / 2.0).tan();
    let elev = config.light_elevation_deg.to_radians();
    // Direction towards the light, in world space: back along the view axis,
    // tilted towards camera-up.
    let to_light = cam
        .forward
        .scale(-elev.cos())
        .add(cam.up.scale(elev.sin()))
        .normalized();

    let mut image = vec![0.0; h * w * 3];
    for px in image.chunks_mut(3) {
        px.copy_from_slice(&config.background);
    }
    let mut depth = vec![f64::INFINITY; h * w];
    let half = h.min(w) as f64 / 2.0;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);

    for tri in mesh(shape, config.segments) {
        let mut normal = tri[1].sub(tri[0]).cross(tri[2].sub(tri[0])).normalized();
        let centroid = tri[0].add(tri[1]).add(tri[2]).scale(1.0 / 3.0);
        if normal.dot(cam.eye.sub(centroid)) < 0.0 {
            normal = normal.scale(-1.0);
        }
        let shade = config.ambient + (1.0 - config.ambient) * normal.dot(to_light).max(0.0);
        let mut color = shape.albedo.map(|a| (a * shade).clamp(0.0, 1.0));
        for (c, bg) in color.iter_mut().zip(config.background) {
            *c = (1.0 - config.haze) * *c + config.haze * bg;
        }

        let cam_pts = tri.map(|p| cam.to_camera(p));
        // (screen x, screen y, 1/depth)
        let scr = cam_pts.map(|p| {
            let z = p.0[2];
            [cx + focal * half * p.0[0] / z, cy - focal * half * p.0[1] / z, 1.0 / z]
        });
        let area = edge(scr[0], scr[1], scr[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = scr.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = scr
            .iter()
            .map(|p| p[0])
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .min(w as f64) as usize;
        let min_y = scr.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = scr
            .iter()
            .map(|p| p[1])
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .min(h as f64) as usize;
        for y in min_y..max_y {
            for x in min_x..max_x {
                let p = [x as f64 + 0.5, y as f64 + 0.5, 0.0];
                let w0 = edge(scr[1], scr[2], p) / area;
                let w1 = edge(scr[2], scr[0], p) / area;
                let w2 = edge(scr[0], scr[1], p) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 * scr[0][2] + w1 * scr[1][2] + w2 * scr[2][2];
                let z = 1.0 / inv_z;
                let idx = y * w + x;
                if z < depth[idx] {
                    depth[idx] = z;
                    image[idx * 3..idx * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], image)
}

fn edge(a: [f64; 3], b: [f64; 3], p: [f64; 3]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(kind: ShapeKind) -> ShapeSpec {
        let (size, ratio) = kind.default_size();
        ShapeSpec {
            class_id: 0,
            kind,
            size,
            ratio,
            yaw: 0.3,
            albedo: [0.7, 0.4, 0.2],
            seed: 0,
        }
    }

    fn pose() -> CameraPose {
        CameraPose {
            theta: PI / 3.0,
            phi: 0.8,
            r: 3.0,
        }
    }

    #[test]
    fn zero_jitter_returns_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_camera(pose(), 0.0, None, &mut rng).unwrap(), pose());
    }

    #[test]
    fn jitter_bound_on_polar_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = CameraPose {
            theta: PI / 4.0,
            phi: 1.0,
            r: 3.0,
        };
        for _ in 0..1000 {
            let p = sample_camera(base, 0.15, None, &mut rng).unwrap();
            assert!(p.theta >= 0.85 * PI / 4.0 && p.theta <= 1.15 * PI / 4.0);
            assert!(p.r >= 0.85 * 3.0 && p.r <= 1.15 * 3.0);
        }
    }

    #[test]
    fn azimuth_restriction_leaves_other_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = sample_camera(pose(), 0.15, Some(PoseAxis::Azimuth), &mut rng).unwrap();
            assert_eq!(p.theta.to_bits(), pose().theta.to_bits());
            assert_eq!(p.r.to_bits(), pose().r.to_bits());
        }
    }

    #[test]
    fn jitter_rejects_out_of_range_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_camera(pose(), 1.0, None, &mut rng).is_err());
        assert!(sample_camera(pose(), -0.1, None, &mut rng).is_err());
    }

    #[test]
    fn uncovered_pixels_are_background() {
        let cfg = RenderConfig::default();
        let img = render(&shape(ShapeKind::Sphere), &pose(), &cfg).unwrap();
        // Corners are far outside a unit-radius object at distance 3.
        for &(y, x) in &[(0, 0), (0, 31), (31, 0), (31, 31)] {
            let i = (y * 32 + x) * 3;
            assert_eq!(&img.data()[i..i + 3], &cfg.background);
        }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let cfg = RenderConfig::default();
        for kind in ShapeKind::ALL {
            let a = render(&shape(kind), &pose(), &cfg).unwrap();
            let b = render(&shape(kind), &pose(), &cfg).unwrap();
            assert_eq!(a.shape(), &[32, 32, 3]);
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let covered = a.data().chunks(3).filter(|p| *p != cfg.background).count();
            assert!(covered > 50, "{kind:?} covers only {covered} pixels");
        }
    }

    #[test]
    fn sphere_is_left_right_symmetric() {
        let cfg = RenderConfig::default();
        let img = render(&shape(ShapeKind::Sphere), &pose(), &cfg).unwrap();
        let covered = |y: usize, x: usize| {
            let i = (y * 32 + x) * 3;
            img.data()[i..i + 3] != cfg.background
        };
        for y in 0..32 {
            let cols: Vec<usize> = (0..32).filter(|&x| covered(y, x)).collect();
            if let (Some(&l), Some(&r)) = (cols.first(), cols.last()) {
                let mirrored_r = 31 - r;
                assert!(l.abs_diff(mirrored_r) <= 1, "row {y}: {l} vs {mirrored_r}");
            }
        }
    }

    #[test]
    fn degenerate_pose_rejected() {
        let p = CameraPose {
            theta: 1.0,
            phi: 0.0,
            r: 0.5,
        };
        assert!(matches!(
            render(&shape(ShapeKind::Sphere), &p, &RenderConfig::default()),
            Err(Error::DegeneratePose { .. })
        ));
    }

    #[test]
    fn camera_on_the_pole_still_renders() {
        let p = CameraPose {
            theta: 0.0,
            phi: 0.0,
            r: 3.0,
        };
        let img = render(&shape(ShapeKind::Torus), &p, &RenderConfig::default()).unwrap();
        assert!(img.is_finite());
    }
}
