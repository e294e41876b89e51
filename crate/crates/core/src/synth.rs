//! Ray-cast equirectangular RGB-D scenes: a box room with a few spheres,
//! camera at the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::geometry::{pixel_to_sphere, sphere_to_direction};
use crate::loss::DepthMap;
use crate::tensor::{Tensor2, Tensor4};

/// Minimum distance between the camera and any sphere surface.
pub const SPHERE_CLEARANCE: f64 = 0.5;
const AMBIENT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// The room spans `[-e, e]` on each axis.
    pub half_extents: [f64; 3],
    pub spheres: Vec<Sphere>,
    /// Albedo of the walls at `-x, +x, -y, +y, -z, +z`.
    pub wall_albedos: [[f64; 3]; 6],
    /// Unit vector pointing toward the light.
    pub light: [f64; 3],
    pub seed: u64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)]
}

pub fn random_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_extents = [
        rng.random_range(2.0..=5.0),
        rng.random_range(2.0..=5.0),
        rng.random_range(2.0..=5.0),
    ];
    let count = rng.random_range(1..=4);
    let mut spheres = Vec::with_capacity(count);
    while spheres.len() < count {
        let radius = rng.random_range(0.2..=0.8);
        let center = [
            rng.random_range(-half_extents[0] + radius..half_extents[0] - radius),
            rng.random_range(-half_extents[1] + radius..half_extents[1] - radius),
            rng.random_range(-half_extents[2] + radius..half_extents[2] - radius),
        ];
        if norm(center) - radius > SPHERE_CLEARANCE {
            spheres.push(Sphere { center, radius, albedo: albedo(&mut rng) });
        }
    }
    let mut wall_albedos = [[0.0; 3]; 6];
    for a in &mut wall_albedos {
        *a = albedo(&mut rng);
    }
    let light = loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = norm(v);
        if n > 0.1 && n <= 1.0 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    Scene { half_extents, spheres, wall_albedos, light, seed }
}

/// Nearest hit of the ray from the origin along unit `d`: distance, outward
/// surface normal facing the camera, albedo.
fn trace(scene: &Scene, d: [f64; 3]) -> (f64, [f64; 3], [f64; 3]) {
    let mut best_t = f64::INFINITY;
    let mut normal = [0.0; 3];
    let mut alb = [0.0; 3];
    for axis in 0..3 {
        if d[axis] == 0.0 {
            continue;
        }
        let t = scene.half_extents[axis] / d[axis].abs();
        if t < best_t {
            best_t = t;
            let positive = d[axis] > 0.0;
            normal = [0.0; 3];
            normal[axis] = if positive { -1.0 } else { 1.0 };
            alb = scene.wall_albedos[2 * axis + positive as usize];
        }
    }
    for s in &scene.spheres {
        // |t d - c|^2 = r^2 with |d| = 1 and the origin outside the sphere.
        let b = dot(d, s.center);
        let disc = b * b - (dot(s.center, s.center) - s.radius * s.radius);
        if disc < 0.0 {
            continue;
        }
        let t = b - disc.sqrt();
        if t > 0.0 && t < best_t {
            best_t = t;
            let p = [t * d[0], t * d[1], t * d[2]];
            normal = [
                (p[0] - s.center[0]) / s.radius,
                (p[1] - s.center[1]) / s.radius,
                (p[2] - s.center[2]) / s.radius,
            ];
            alb = s.albedo;
        }
    }
    (best_t, normal, alb)
}

/// Renders `rgb` `(1, 3, H, W)` and Euclidean depth with a full mask.
pub fn render(scene: &Scene, h: usize, w: usize) -> Result<(Tensor4, DepthMap)> {
    if h == 0 || w != 2 * h {
        return shape_err(format!("render needs W = 2H, got {h}x{w}"));
    }
    let mut rgb = Tensor4::zeros([1, 3, h, w])?;
    let mut depth = Tensor2::new_filled([h, w], 0.0)?;
    for r in 0..h {
        for c in 0..w {
            let d = sphere_to_direction(pixel_to_sphere(r, c, h, w)?);
            let (t, n, a) = trace(scene, d);
            let shade = dot(n, scene.light).max(AMBIENT);
            for (ch, &av) in a.iter().enumerate() {
                rgb.set(0, ch, r, c, av * shade);
            }
            depth.set(r, c, t);
        }
    }
    Ok((rgb, DepthMap::dense(depth)))
}
