use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{encode_image, save_cloud, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tokenization::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Unit-radius sphere surface.
    Sphere,
    /// Surface of the cube `[-1, 1]³`.
    Cube,
    /// Open cylinder of radius 1 along z, `|z| ≤ 1`.
    Cylinder,
    /// The square `[-1, 1]²` at `z = 0`, labelled 1 where `x ≥ 0`.
    Plane,
}

pub const FAMILIES: [Family; 4] = [Family::Sphere, Family::Cube, Family::Cylinder, Family::Plane];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Cube => "cube",
            Family::Cylinder => "cylinder",
            Family::Plane => "plane",
        }
    }

    fn surface_point<R: Rng + ?Sized>(self, rng: &mut R) -> [f32; 3] {
        let u = Uniform::new_inclusive(-1.0f32, 1.0);
        match self {
            Family::Sphere => loop {
                let v: [f32; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-6 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            },
            Family::Cube => {
                let axis = rng.gen_range(0..3);
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut p = [u.sample(rng), u.sample(rng), u.sample(rng)];
                p[axis] = side;
                p
            }
            Family::Cylinder => {
                let t = rng.gen_range(0.0..std::f32::consts::TAU);
                [t.cos(), t.sin(), u.sample(rng)]
            }
            Family::Plane => [u.sample(rng), u.sample(rng), 0.0],
        }
    }

    /// One cloud: surface samples, then scale, stretch along z, rotation
    /// about z (except planes) and uniform jitter in `[-jitter, jitter]`.
    pub fn sample<R: Rng + ?Sized>(self, points: usize, variant: usize, jitter: f32, rng: &mut R) -> Result<PointCloud> {
        let scale = rng.gen_range(0.85f32..1.15);
        let stretch = 1.0 + 0.6 * variant as f32;
        let angle = match self {
            Family::Plane => 0.0,
            _ => rng.gen_range(0.0..std::f32::consts::TAU),
        };
        let (s, c) = angle.sin_cos();
        let j = Uniform::new_inclusive(-jitter, jitter);
        let mut pts = Vec::with_capacity(points);
        for _ in 0..points {
            let p = self.surface_point(rng);
            let (x, y, z) = (p[0] * scale, p[1] * scale, p[2] * scale * stretch);
            let mut q = [c * x - s * y, s * x + c * y, z];
            if jitter > 0.0 {
                q.iter_mut().for_each(|v| *v += j.sample(rng));
            }
            pts.push(q);
        }
        let labels = (self == Family::Plane).then(|| pts.iter().map(|p| u32::from(p[0] >= 0.0)).collect());
        PointCloud::new(pts, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
    pub jitter: f32,
    /// Fraction of each class placed in the train split.
    pub train_fraction: f64,
    /// Square depth renders per class, `(size, count)`.
    pub images: Option<(usize, usize)>,
    /// Only two-label planes, for segmentation.
    pub segmentation: bool,
}

impl SyntheticConfig {
    pub fn new(classes: usize, per_class: usize, points: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            points,
            seed,
            jitter: 0.01,
            train_fraction: 0.8,
            images: None,
            segmentation: false,
        }
    }

    /// Family and size variant of class `c`.
    pub fn family(&self, c: usize) -> (Family, usize) {
        if self.segmentation {
            (Family::Plane, 0)
        } else {
            (FAMILIES[c % FAMILIES.len()], c / FAMILIES.len())
        }
    }

    pub fn class_name(&self, c: usize) -> String {
        match self.family(c) {
            (f, 0) => f.name().to_string(),
            (f, v) => format!("{}_{v}", f.name()),
        }
    }

    fn class_count(&self) -> usize {
        if self.segmentation {
            1
        } else {
            self.classes
        }
    }
}

/// Orthographic depth render looking down z over `[-1.5, 1.5]²`.
pub fn render_depth(cloud: &PointCloud, size: usize) -> Image {
    let mut data = vec![0.0f32; size * size];
    for p in cloud.points() {
        let to_px = |v: f32| ((v + 1.5) / 3.0 * size as f32).floor();
        let (x, y) = (to_px(p[0]), to_px(p[1]));
        if x < 0.0 || y < 0.0 || x >= size as f32 || y >= size as f32 {
            continue;
        }
        let depth = ((p[2] + 1.5) / 3.0).clamp(0.0, 1.0);
        let cell = &mut data[y as usize * size + x as usize];
        *cell = cell.max(depth);
    }
    Image::new(size, size, 1, data).expect("size matches")
}

/// Writes a seeded dataset (cloud files, optional images, manifest) under
/// `out` and returns the manifest.
pub fn generate(cfg: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    if !cfg.segmentation && cfg.classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.points == 0 || cfg.per_class == 0 {
        return Err(Error::Argument("points and per-class count must be positive".into()));
    }
    std::fs::create_dir_all(out.join("clouds"))?;
    if cfg.images.is_some() {
        std::fs::create_dir_all(out.join("images"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = Manifest::default();
    for c in 0..cfg.class_count() {
        m.entries.push(ManifestEntry::Class {
            id: c,
            name: cfg.class_name(c),
        });
    }
    let n_train = ((cfg.per_class as f64) * cfg.train_fraction).round() as usize;
    for c in 0..cfg.class_count() {
        let (family, variant) = cfg.family(c);
        let name = cfg.class_name(c);
        for i in 0..cfg.per_class {
            let cloud = family.sample(cfg.points, variant, cfg.jitter, &mut rng)?;
            let rel = format!("clouds/{name}_{i:04}.txt");
            save_cloud(&cloud, out.join(&rel))?;
            m.entries.push(ManifestEntry::Sample {
                path: rel,
                class: c,
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
        if let Some((size, count)) = cfg.images {
            for i in 0..count {
                let cloud = family.sample(cfg.points, variant, cfg.jitter, &mut rng)?;
                let rel = format!("images/{name}_{i:02}.img");
                std::fs::write(out.join(&rel), encode_image(&render_depth(&cloud, size)))?;
                m.entries.push(ManifestEntry::Image { path: rel, class: c });
            }
        }
    }
    std::fs::write(out.join("manifest.txt"), m.to_text())?;
    Ok(m)
}
