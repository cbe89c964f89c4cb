//! Synthetic scenes: a tilted ground plane, fronto-parallel boxes and
//! spheres seen by an orthographic camera looking along +z.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;
use crate::sparse::SparseDepth;
use crate::tensor::Tensor;

/// Metres covered by one pixel.
pub const PIXEL_SIZE: f64 = 0.05;

const LIGHT: [f64; 3] = [0.4, -0.5, 0.7681145747868608];
const AMBIENT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `z = depth + slope_x·x + slope_y·y`.
    Plane {
        depth: f64,
        slope_x: f64,
        slope_y: f64,
        albedo: [f64; 3],
    },
    /// Axis-aligned rectangle at constant depth.
    Box {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        depth: f64,
        albedo: [f64; 3],
    },
    Sphere {
        cx: f64,
        cy: f64,
        cz: f64,
        radius: f64,
        albedo: [f64; 3],
    },
}

impl Primitive {
    /// Depth of the first surface hit at `(x, y)`, if any.
    fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        match *self {
            Primitive::Plane {
                depth, slope_x, slope_y, ..
            } => Some(depth + slope_x * x + slope_y * y),
            Primitive::Box { x0, y0, x1, y1, depth, .. } => (x >= x0 && x <= x1 && y >= y0 && y <= y1).then_some(depth),
            Primitive::Sphere { cx, cy, cz, radius, .. } => {
                let q = radius * radius - (x - cx).powi(2) - (y - cy).powi(2);
                (q >= 0.0).then(|| cz - q.sqrt())
            }
        }
    }

    fn albedo(&self) -> [f64; 3] {
        match *self {
            Primitive::Plane { albedo, .. } | Primitive::Box { albedo, .. } | Primitive::Sphere { albedo, .. } => albedo,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub primitives: Vec<Primitive>,
    pub sparse_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// 1×3×H×W in [0, 1].
    pub image: Tensor,
    /// 1×1×H×W, dense and positive.
    pub depth: Tensor,
    pub sparse: SparseDepth,
}

impl Scene {
    /// Dense ground truth as a fully valid [`SparseDepth`].
    pub fn ground_truth(&self) -> Result<SparseDepth> {
        SparseDepth::new(self.depth.clone(), Tensor::ones(self.depth.shape()))
    }

    pub fn flip_horizontal(&self) -> Result<Scene> {
        Ok(Scene {
            image: self.image.flip_horizontal()?,
            depth: self.depth.flip_horizontal()?,
            sparse: self.sparse.flip_horizontal()?,
        })
    }
}

fn albedo<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)]
}

impl SceneSpec {
    /// A plane, one to three boxes and one or two spheres, all in front
    /// of the plane, with depths inside roughly 1.5–8 m.
    pub fn random(seed: u64, height: usize, width: usize, sparse_count: usize) -> Self {
        let rng = &mut seeds::stream(seed, "scene");
        let (sx, sy) = (width as f64 * PIXEL_SIZE, height as f64 * PIXEL_SIZE);
        let mut primitives = vec![Primitive::Plane {
            depth: rng.gen_range(6.0..7.0),
            slope_x: rng.gen_range(-0.15..0.15),
            slope_y: rng.gen_range(-0.3..0.0),
            albedo: albedo(rng),
        }];
        for _ in 0..rng.gen_range(1..=3) {
            let (w, h) = (rng.gen_range(0.2..0.5) * sx, rng.gen_range(0.2..0.5) * sy);
            let (x0, y0) = (rng.gen_range(0.0..sx - w), rng.gen_range(0.0..sy - h));
            primitives.push(Primitive::Box {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
                depth: rng.gen_range(2.0..5.0),
                albedo: albedo(rng),
            });
        }
        for _ in 0..rng.gen_range(1..=2) {
            let radius = rng.gen_range(0.1..0.25) * sx.min(sy);
            primitives.push(Primitive::Sphere {
                cx: rng.gen_range(0.0..sx),
                cy: rng.gen_range(0.0..sy),
                cz: rng.gen_range(1.5..4.5) + radius,
                radius,
                albedo: albedo(rng),
            });
        }
        Self {
            seed,
            height,
            width,
            primitives,
            sparse_count,
        }
    }
}

/// Renders depth, shaded albedo image and seeded sparse samples.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let (h, w) = (spec.height, spec.width);
    if spec.primitives.is_empty() {
        return Err(Error::InvalidArgument("scene has no primitives".into()));
    }
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("scene size {h}×{w} too small")));
    }
    if spec.sparse_count > h * w {
        return Err(Error::InvalidArgument(format!(
            "{} samples requested from {} pixels",
            spec.sparse_count,
            h * w
        )));
    }
    let mut depth = vec![0.0; h * w];
    let mut owner = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = ((x as f64 + 0.5) * PIXEL_SIZE, (y as f64 + 0.5) * PIXEL_SIZE);
            let hit = spec
                .primitives
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.depth_at(px, py).map(|d| (i, d)))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((i, d)),
                });
            let (i, d) = hit.ok_or_else(|| Error::InvalidArgument(format!("no surface at pixel ({y}, {x})")))?;
            if d <= 0.0 {
                return Err(Error::InvalidArgument(format!("non-positive depth {d} at pixel ({y}, {x})")));
            }
            depth[y * w + x] = d;
            owner[y * w + x] = i;
        }
    }
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            // one-sided differences at the border
            let dzdx = (depth[y * w + (x + 1).min(w - 1)] - depth[y * w + x.saturating_sub(1)])
                / (((x + 1).min(w - 1) - x.saturating_sub(1)) as f64 * PIXEL_SIZE);
            let dzdy = (depth[(y + 1).min(h - 1) * w + x] - depth[y.saturating_sub(1) * w + x])
                / (((y + 1).min(h - 1) - y.saturating_sub(1)) as f64 * PIXEL_SIZE);
            let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let ndotl = (-dzdx * LIGHT[0] - dzdy * LIGHT[1] + LIGHT[2]) / norm;
            let shade = AMBIENT + (1.0 - AMBIENT) * ndotl.max(0.0);
            let a = spec.primitives[owner[y * w + x]].albedo();
            for c in 0..3 {
                image[c * h * w + y * w + x] = a[c] * shade;
            }
        }
    }
    let rng = &mut seeds::stream(spec.seed, "sparse");
    let mut sd = vec![0.0; h * w];
    let mut sm = vec![0.0; h * w];
    for i in sample(rng, h * w, spec.sparse_count) {
        sd[i] = depth[i];
        sm[i] = 1.0;
    }
    Ok(Scene {
        image: Tensor::new(&[1, 3, h, w], image)?,
        depth: Tensor::new(&[1, 1, h, w], depth)?,
        sparse: SparseDepth::new(Tensor::new(&[1, 1, h, w], sd)?, Tensor::new(&[1, 1, h, w], sm)?)?,
    })
}
