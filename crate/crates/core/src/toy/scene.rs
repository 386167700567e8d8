//! Procedural verification scenes: compositions of slanted planes and
//! spheres rendered to depth, orthographic surface normals, and a
//! Lambertian-shaded RGB image. Everything is a pure function of the seed.

use crate::error::{Error, Result};
use crate::grid::{Field2D, FieldStack};
use crate::normalize::normalize_normals;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Synthetic scene sample: image, depth, and normals share dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    /// 3-channel image in [0, 1].
    pub rgb: FieldStack,
    /// Strictly positive depth in scene units.
    pub depth: Field2D,
    /// Unit surface normals consistent with the depth gradients.
    pub normals: FieldStack,
    pub seed: u64,
}

/// Orthographic normals from depth gradients: `n ~ (-dd/dx, -dd/dy, 1)`,
/// unit-normalized. Central differences in the interior, one-sided at the
/// borders.
pub fn normals_from_depth(depth: &Field2D) -> Result<FieldStack> {
    let (h, w) = (depth.height(), depth.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidParameter(
            "normals need at least a 2x2 depth map".into(),
        ));
    }
    let at = |r: usize, c: usize| depth.values()[r * w + c];
    let mut planes = vec![Vec::with_capacity(h * w), Vec::with_capacity(h * w), Vec::with_capacity(h * w)];
    for r in 0..h {
        for c in 0..w {
            let gx = if c == 0 {
                at(r, 1) - at(r, 0)
            } else if c == w - 1 {
                at(r, w - 1) - at(r, w - 2)
            } else {
                (at(r, c + 1) - at(r, c - 1)) / 2.0
            };
            let gy = if r == 0 {
                at(1, c) - at(0, c)
            } else if r == h - 1 {
                at(h - 1, c) - at(h - 2, c)
            } else {
                (at(r + 1, c) - at(r - 1, c)) / 2.0
            };
            planes[0].push(-gx);
            planes[1].push(-gy);
            planes[2].push(1.0);
        }
    }
    let mask = depth.mask().map(<[bool]>::to_vec);
    let stack = FieldStack::from_planes(
        planes
            .into_iter()
            .map(|values| match &mask {
                Some(m) => Field2D::with_mask(h, w, values, m.clone()),
                None => Field2D::new(h, w, values),
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(normalize_normals(&stack)?.0)
}

struct Plane {
    z0: f64,
    gx: f64,
    gy: f64,
}

struct Sphere {
    center_r: f64,
    center_c: f64,
    /// Radius in depth units.
    radius: f64,
    /// Depth of the sphere center.
    z_center: f64,
}

/// Depth of the closest surface at a pixel; `px_scale` converts pixel
/// offsets into scene units so spheres are true spheres under the
/// orthographic model.
fn surface_depth(
    planes: &[Plane],
    spheres: &[Sphere],
    r: usize,
    c: usize,
    h: usize,
    w: usize,
    px_scale: f64,
) -> f64 {
    let mut depth = f64::INFINITY;
    let u = c as f64 / w as f64 - 0.5;
    let v = r as f64 / h as f64 - 0.5;
    for p in planes {
        depth = depth.min(p.z0 + p.gx * u + p.gy * v);
    }
    for s in spheres {
        let dx = (c as f64 - s.center_c) * px_scale;
        let dy = (r as f64 - s.center_r) * px_scale;
        let rho_sq = dx * dx + dy * dy;
        if rho_sq < s.radius * s.radius {
            depth = depth.min(s.z_center - (s.radius * s.radius - rho_sq).sqrt());
        }
    }
    depth
}

fn render(depth: Field2D, seed: u64, rng: &mut ChaCha12Rng) -> Result<ToyScene> {
    let normals = normals_from_depth(&depth)?;
    // Lambertian shading under a random light with ambient floor 0.2.
    let lx = rng.random::<f64>() - 0.5;
    let ly = rng.random::<f64>() - 0.5;
    let norm = (lx * lx + ly * ly + 1.0).sqrt();
    let light = [lx / norm, ly / norm, 1.0 / norm];
    let albedo = [
        0.3 + 0.6 * rng.random::<f64>(),
        0.3 + 0.6 * rng.random::<f64>(),
        0.3 + 0.6 * rng.random::<f64>(),
    ];
    let len = depth.len();
    let mut shade = Vec::with_capacity(len);
    for i in 0..len {
        let dot = normals.plane(0).values()[i] * light[0]
            + normals.plane(1).values()[i] * light[1]
            + normals.plane(2).values()[i] * light[2];
        shade.push(0.2 + 0.8 * dot.max(0.0));
    }
    let rgb = FieldStack::from_planes(
        albedo
            .iter()
            .map(|a| {
                Field2D::new(
                    depth.height(),
                    depth.width(),
                    shade.iter().map(|s| (a * s).clamp(0.0, 1.0)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(ToyScene {
        rgb,
        depth,
        normals,
        seed,
    })
}

/// Deterministic procedural scene: one to three slanted planes and up to two
/// spheres composited by a closest-surface z-buffer, Lambertian shaded. The
/// same seed always yields a bit-identical scene.
pub fn gen_scene(seed: u64, h: usize, w: usize) -> Result<ToyScene> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidParameter(format!(
            "scenes need at least 16x16 pixels, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_planes = rng.random_range(1..=3usize);
    let n_spheres = rng.random_range(0..=2usize);
    let planes: Vec<Plane> = (0..n_planes)
        .map(|_| Plane {
            z0: 3.0 + 4.0 * rng.random::<f64>(),
            gx: 3.0 * (rng.random::<f64>() - 0.5),
            gy: 3.0 * (rng.random::<f64>() - 0.5),
        })
        .collect();
    let px_scale = 2.0 / h.min(w) as f64;
    let spheres: Vec<Sphere> = (0..n_spheres)
        .map(|_| Sphere {
            center_r: h as f64 * (0.25 + 0.5 * rng.random::<f64>()),
            center_c: w as f64 * (0.25 + 0.5 * rng.random::<f64>()),
            radius: 0.3 + 0.5 * rng.random::<f64>(),
            z_center: 2.5 + 3.0 * rng.random::<f64>(),
        })
        .collect();
    let depth = Field2D::from_fn(h, w, |r, c| {
        surface_depth(&planes, &spheres, r, c, h, w, px_scale)
    });
    render(depth, seed, &mut rng)
}

/// A single fronto-parallel plane: constant depth, camera-facing normals.
pub fn flat_scene(seed: u64, h: usize, w: usize, depth_value: f64) -> Result<ToyScene> {
    if depth_value <= 0.0 {
        return Err(Error::InvalidParameter("depth must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    render(Field2D::constant(h, w, depth_value), seed, &mut rng)
}
