//! Synthetic single-channel detection scenes and their on-disk layout.
//!
//! Each class is a distinct filled shape with its own base intensity, drawn on
//! Gaussian noise. On disk a dataset is a directory holding `meta.csv` and one
//! `img_{id}.bin` per image (C·S·S little-endian `f64`, C = 1).

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::BoxCorners;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_CHANNELS: usize = 1;
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Cross,
    Frame,
    Diamond,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Rectangle,
        ShapeKind::Ellipse,
        ShapeKind::Cross,
        ShapeKind::Frame,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    /// Membership test in box-normalized coordinates `u, v ∈ [-1, 1]`.
    fn covers(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        if au > 1.0 || av > 1.0 {
            return false;
        }
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Cross => au <= 1.0 / 3.0 || av <= 1.0 / 3.0,
            ShapeKind::Frame => au.max(av) >= 0.6,
            ShapeKind::Diamond => au + av <= 1.0,
            ShapeKind::Ring => (0.45..=1.0).contains(&(u * u + v * v)),
        }
    }
}

pub fn class_shape(class: usize) -> ShapeKind {
    ShapeKind::ALL[(class - 1) % ShapeKind::ALL.len()]
}

/// Nominal object intensity of a 1-based class among `classes`.
pub fn class_intensity(class: usize, classes: usize) -> f64 {
    0.35 + 0.65 * class as f64 / classes as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    /// 1-based class.
    pub class: usize,
    pub bbox: BoxCorners,
    pub appearance_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub objects: Vec<ObjectSpec>,
    pub noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.size as f64;
        for o in &self.objects {
            let b = &o.bbox;
            if !b.is_well_ordered() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > s || b.y2 > s {
                return Err(Error::InvalidArgument(format!(
                    "object box {b:?} outside {s}×{s} image"
                )));
            }
            if o.class == 0 {
                return Err(Error::InvalidArgument("object class must be 1-based".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// 1×1×S×S.
    pub image: Tensor,
    pub scene: SceneSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenParams {
    pub n_images: usize,
    pub classes: usize,
    pub size: usize,
    pub noise: f64,
}

impl GenParams {
    pub fn new(n_images: usize, classes: usize, size: usize) -> Self {
        GenParams {
            n_images,
            classes,
            size,
            noise: 0.05,
        }
    }

    fn side_range(&self) -> (usize, usize) {
        let lo = ((0.16 * self.size as f64).round() as usize).max(4);
        let hi = ((0.38 * self.size as f64).round() as usize).max(lo);
        (lo, hi)
    }
}

fn image_rng(seed: u64, id: usize) -> ChaCha8Rng {
    // splitmix64 of the (seed, id) pair
    let mut z = seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Paints `scene` over Gaussian noise drawn from `rng`.
pub fn render(scene: &SceneSpec, classes: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = scene.size;
    let noise = Normal::new(0.0, scene.noise).map_err(|e| Error::InvalidArgument(format!("noise level: {e}")))?;
    let mut pixels: Vec<f64> = (0..s * s).map(|_| noise.sample(rng)).collect();
    for o in &scene.objects {
        let shape = class_shape(o.class);
        let jitter = ChaCha8Rng::seed_from_u64(o.appearance_seed).random_range(-0.05..0.05);
        let value = class_intensity(o.class, classes) + jitter;
        let b = &o.bbox;
        let (cx, cy) = b.center();
        let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
        for y in b.y1.floor().max(0.0) as usize..(b.y2.ceil() as usize).min(s) {
            for x in b.x1.floor().max(0.0) as usize..(b.x2.ceil() as usize).min(s) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if b.contains(px, py) && shape.covers((px - cx) / hw, (py - cy) / hh) {
                    pixels[y * s + x] += value;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(1, IMAGE_CHANNELS, s, s), pixels)
}

/// Deterministic synthetic dataset: 1 to 3 non-overlapping objects per image.
pub fn generate_dataset(seed: u64, params: &GenParams) -> Result<Vec<Sample>> {
    if params.n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if params.classes < 2 || params.classes > ShapeKind::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 2..={}, got {}",
            ShapeKind::ALL.len(),
            params.classes
        )));
    }
    if params.size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image size {} too small for objects (minimum {MIN_IMAGE_SIZE})",
            params.size
        )));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {}", params.noise)));
    }
    (0..params.n_images)
        .map(|id| generate_sample(seed, id, params))
        .collect()
}

/// The `id`-th image of the dataset with this seed, independent of the others.
pub fn generate_sample(seed: u64, id: usize, params: &GenParams) -> Result<Sample> {
    let mut rng = image_rng(seed, id);
    let (lo, hi) = params.side_range();
    let target = rng.random_range(1..=3usize);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(target);
    let mut attempts = 0;
    while objects.len() < target && attempts < 200 {
        attempts += 1;
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x1 = rng.random_range(0..=params.size - w) as f64;
        let y1 = rng.random_range(0..=params.size - h) as f64;
        let bbox = BoxCorners::new(x1, y1, x1 + w as f64, y1 + h as f64);
        let class = rng.random_range(1..=params.classes);
        let appearance_seed = rng.random_range(0..u64::MAX);
        if objects.iter().any(|o| o.bbox.intersection(&bbox) > 0.0) {
            continue;
        }
        objects.push(ObjectSpec {
            class,
            bbox,
            appearance_seed,
        });
    }
    let scene = SceneSpec {
        size: params.size,
        objects,
        noise: params.noise,
    };
    let image = render(&scene, params.classes, &mut rng)?;
    Ok(Sample { id, image, scene })
}

/// Writes `meta.csv` and the raw image files into `dir` (created if missing).
///
/// `meta.csv` columns: `image_id,size,noise,num_objects` followed by one
/// `class,x1,y1,x2,y2` group per object.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::from("image_id,size,noise,num_objects,objects\n");
    for s in samples {
        write!(
            meta,
            "{},{},{},{}",
            s.id,
            s.scene.size,
            s.scene.noise,
            s.scene.objects.len()
        )
        .expect("string");
        for o in &s.scene.objects {
            let b = &o.bbox;
            write!(meta, ",{},{},{},{},{}", o.class, b.x1, b.y1, b.x2, b.y2).expect("string");
        }
        meta.push('\n');
        let path = dir.join(format!("img_{}.bin", s.id));
        let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("meta.csv");
    std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

fn meta_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "meta.csv",
        msg: format!("line {line}: {}", msg.into()),
    }
}

/// Reads a dataset written by [`write_dataset`]. Appearance seeds are not
/// stored and come back as 0.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let meta_path = dir.join("meta.csv");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut samples = Vec::new();
    for (i, line) in meta.lines().enumerate().skip(1) {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(meta_err(lineno, "expected at least 4 fields"));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| meta_err(lineno, format!("bad integer `{s}`")))
        };
        let real = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| meta_err(lineno, format!("bad number `{s}`")))
        };
        let id = int(fields[0])?;
        let size = int(fields[1])?;
        let noise = real(fields[2])?;
        let count = int(fields[3])?;
        if fields.len() != 4 + 5 * count {
            return Err(meta_err(
                lineno,
                format!("{count} objects need {} fields", 4 + 5 * count),
            ));
        }
        let objects = fields[4..]
            .chunks(5)
            .map(|g| {
                Ok(ObjectSpec {
                    class: int(g[0])?,
                    bbox: BoxCorners::new(real(g[1])?, real(g[2])?, real(g[3])?, real(g[4])?),
                    appearance_seed: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = SceneSpec { size, objects, noise };
        scene.validate().map_err(|e| meta_err(lineno, e.to_string()))?;
        let path = dir.join(format!("img_{id}.bin"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = IMAGE_CHANNELS * size * size * 8;
        if bytes.len() != expected {
            return Err(Error::Format {
                what: "image file",
                msg: format!("{}: {} bytes, expected {expected}", path.display(), bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let image = Tensor::from_vec(Shape::new(1, IMAGE_CHANNELS, size, size), data)?;
        samples.push(Sample { id, image, scene });
    }
    Ok(samples)
}
