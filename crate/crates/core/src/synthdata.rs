//! Synthetic weakly-labelled shapes data, the manifest format, augmentation
//! and seeded batch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::resample;

/// Mask value for pixels excluded from supervision and evaluation.
pub const IGNORE: u8 = 255;

/// Shape archetypes in class order. Class `k` (1-based in masks) draws
/// archetype `k - 1`.
pub const SHAPE_ARCHETYPES: [&str; 6] = ["circle", "rectangle", "triangle", "cross", "ring", "diamond"];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `(3, H, W)` RGB in `[0, 1]`.
    pub image: Array3<f64>,
    /// One flag per foreground class.
    pub tags: Vec<bool>,
    /// Evaluation only: 0 background, `k` class `k`, [`IGNORE`] unlabeled.
    pub gt_mask: Option<Array2<u8>>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    pub fn num_classes(&self) -> usize {
        self.tags.len()
    }

    /// Foreground classes (1-based) whose tag bit is raised.
    pub fn present_classes(&self) -> Vec<usize> {
        present_from_tags(&self.tags)
    }
}

pub fn present_from_tags(tags: &[bool]) -> Vec<usize> {
    tags.iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(i, _)| i + 1)
        .collect()
}

#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
}

/// Renders `n_images` deterministic samples with 1-3 shapes each.
///
/// Sample `i` depends only on `(seed, i)`, so datasets generated with the
/// same seed share their prefix.
pub fn generate_shapes_dataset(
    n_images: usize,
    classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<ShapesDataset> {
    if classes < 2 {
        return Err(Error::config("data.classes", "need at least 2 classes"));
    }
    if classes > SHAPE_ARCHETYPES.len() {
        return Err(Error::config(
            "data.classes",
            format!(
                "{classes} classes requested but only {} shape archetypes exist",
                SHAPE_ARCHETYPES.len()
            ),
        ));
    }
    if image_size < 32 {
        return Err(Error::config("data.image_size", "must be at least 32"));
    }
    if n_images == 0 {
        return Err(Error::config("data.n_images", "must be at least 1"));
    }
    let class_names = SHAPE_ARCHETYPES[..classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let samples = (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (rgb, mask) = render_sample(&mut rng, classes, image_size);
            let tags = (1..=classes).map(|c| mask.iter().any(|&m| m as usize == c)).collect();
            ImageSample {
                id: format!("shape_{i:05}"),
                image: rgb_to_array(&rgb),
                tags,
                gt_mask: Some(mask),
            }
        })
        .collect();
    Ok(ShapesDataset {
        class_names,
        samples,
    })
}

/// Training and validation splits; validation samples come from a derived
/// seed and carry a `val_` id prefix.
pub fn generate_splits(
    n_train: usize,
    n_val: usize,
    classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<(ShapesDataset, ShapesDataset)> {
    let train = generate_shapes_dataset(n_train, classes, image_size, seed)?;
    let mut val = generate_shapes_dataset(n_val, classes, image_size, seed ^ 0x7a11_da7a_5eed)?;
    for s in &mut val.samples {
        s.id = format!("val_{}", s.id);
    }
    Ok((train, val))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Smooth lattice noise in `[0, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng>(rng: &mut R, cells: usize) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        Self { cells, lattice }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let fx = u * self.cells as f64;
        let fy = v * self.cells as f64;
        let x0 = (fx.floor() as usize).min(self.cells - 1);
        let y0 = (fy.floor() as usize).min(self.cells - 1);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let tx = smooth(fx - x0 as f64);
        let ty = smooth(fy - y0 as f64);
        let stride = self.cells + 1;
        let l = |x: usize, y: usize| self.lattice[y * stride + x];
        let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
        let bot = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

struct Instance {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

impl Instance {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        let d = (u * u + v * v).sqrt();
        match self.class {
            1 => d <= 1.0,
            2 => u.abs() <= 1.0 && v.abs() <= 0.6,
            3 => {
                // equilateral triangle inscribed in the unit circle
                let pts = [(0.0, -1.0), (0.866, 0.5), (-0.866, 0.5)];
                let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (u - bx) * (ay - by) - (ax - bx) * (v - by)
                };
                let d1 = sign(pts[0], pts[1]);
                let d2 = sign(pts[1], pts[2]);
                let d3 = sign(pts[2], pts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            4 => (u.abs() <= 1.0 && v.abs() <= 0.3) || (v.abs() <= 1.0 && u.abs() <= 0.3),
            5 => (0.55..=1.0).contains(&d),
            _ => u.abs() + v.abs() <= 1.0,
        }
    }
}

fn render_sample<R: Rng>(rng: &mut R, classes: usize, size: usize) -> (RgbImage, Array2<u8>) {
    let coarse = ValueNoise::new(rng, 4);
    let fine = ValueNoise::new(rng, 12);
    let bg_a = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.1..0.5), rng.gen_range(0.3..0.8));
    let bg_b = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.1..0.5), rng.gen_range(0.3..0.8));

    let n_instances = rng.gen_range(1..=3);
    let s = size as f64;
    let instances: Vec<(Instance, [f64; 3], (f64, f64))> = (0..n_instances)
        .map(|_| {
            let class = rng.gen_range(1..=classes);
            let radius = rng.gen_range(0.13..0.26) * s;
            let cx = rng.gen_range(radius * 0.8..s - radius * 0.8);
            let cy = rng.gen_range(radius * 0.8..s - radius * 0.8);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let hue = 360.0 * (class - 1) as f64 / classes as f64 + rng.gen_range(-18.0..18.0);
            let color = hsv_to_rgb(hue, rng.gen_range(0.55..0.9), rng.gen_range(0.6..0.95));
            let shade = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            (
                Instance {
                    class,
                    cx,
                    cy,
                    radius,
                    angle,
                },
                color,
                shade,
            )
        })
        .collect();

    let mut img = RgbImage::new(size as u32, size as u32);
    let mut mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let t = 0.7 * coarse.at(u, v) + 0.3 * fine.at(u, v);
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = bg_a[ch] * (1.0 - t) + bg_b[ch] * t;
            }
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            for (inst, color, shade) in &instances {
                if inst.contains(fx, fy) {
                    let g = 1.0
                        + 0.18
                            * (shade.0 * (fx - inst.cx) + shade.1 * (fy - inst.cy))
                            / inst.radius
                        + 0.08 * (fine.at(u, v) - 0.5);
                    for ch in 0..3 {
                        px[ch] = color[ch] * g;
                    }
                    mask[[y, x]] = inst.class as u8;
                }
            }
            let q = px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(q));
        }
    }
    (img, mask)
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn array_to_rgb(x: &Array3<f64>) -> RgbImage {
    let (_, h, w) = x.dim();
    RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let (px, py) = (px as usize, py as usize);
        Rgb([0, 1, 2].map(|c| (x[[c, py, px]].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn save_index_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[[y as usize, x as usize]]]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_index_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Grayscale dump of a `[0, 1]` map.
pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub tags: Vec<String>,
    pub mask_path: Option<PathBuf>,
}

/// Line-oriented dataset index.
///
/// ```text
/// #classes<TAB>circle,rectangle,triangle
/// images/a.png<TAB>circle,triangle<TAB>masks/a.png
/// images/b.png<TAB>rectangle
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

const CLASSES_HEADER: &str = "#classes";

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CLASSES_HEADER}\t{}\n", self.class_names.join(","));
        for r in &self.records {
            out.push_str(&r.image_path.to_string_lossy());
            out.push('\t');
            out.push_str(&r.tags.join(","));
            if let Some(m) = &r.mask_path {
                out.push('\t');
                out.push_str(&m.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, base_dir: &Path, path_for_errors: &Path) -> Result<Self> {
        let err = |record: usize, message: String| Error::Manifest {
            path: path_for_errors.to_path_buf(),
            record,
            message,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| err(0, "empty manifest".into()))?;
        let class_names: Vec<String> = match header.split_once('\t') {
            Some((CLASSES_HEADER, names)) => names
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            _ => return Err(err(0, format!("expected `{CLASSES_HEADER}<TAB>names` header"))),
        };
        if class_names.is_empty() {
            return Err(err(0, "header lists no classes".into()));
        }
        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() {
                return Err(err(idx, format!("expected 2 or 3 tab-separated fields, got `{line}`")));
            }
            let tags: Vec<String> = fields[1]
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if tags.is_empty() {
                return Err(err(idx, "record has no tags".into()));
            }
            for t in &tags {
                if !class_names.contains(t) {
                    return Err(err(idx, format!("unknown class `{t}`")));
                }
            }
            records.push(ManifestRecord {
                image_path: PathBuf::from(fields[0]),
                tags,
                mask_path: fields.get(2).filter(|s| !s.is_empty()).map(PathBuf::from),
            });
        }
        Ok(Self {
            base_dir: base_dir.to_path_buf(),
            class_names,
            records,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_sample(&self, index: usize) -> Result<ImageSample> {
        let rec = self.records.get(index).ok_or_else(|| Error::Manifest {
            path: self.base_dir.clone(),
            record: index,
            message: "no such record".into(),
        })?;
        let image_path = self.resolve(&rec.image_path);
        let rgb = image::open(&image_path)
            .map_err(|source| Error::Image {
                path: image_path.clone(),
                source,
            })?
            .to_rgb8();
        let tags = self
            .class_names
            .iter()
            .map(|c| rec.tags.contains(c))
            .collect();
        let gt_mask = match &rec.mask_path {
            Some(m) => Some(load_index_png(&self.resolve(m))?),
            None => None,
        };
        let id = rec
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("record_{index}"));
        Ok(ImageSample {
            id,
            image: rgb_to_array(&rgb),
            tags,
            gt_mask,
        })
    }

    pub fn load_all(&self) -> Result<Vec<ImageSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, base, path)
}

/// Writes PNG images and masks plus `manifest.tsv` under `dir`.
pub fn write_dataset(dir: &Path, class_names: &[String], samples: &[ImageSample]) -> Result<DatasetManifest> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let image_rel = PathBuf::from("images").join(format!("{}.png", s.id));
        let p = dir.join(&image_rel);
        array_to_rgb(&s.image).save(&p).map_err(|source| Error::Image { path: p, source })?;
        let mask_path = match &s.gt_mask {
            Some(m) => {
                let rel = PathBuf::from("masks").join(format!("{}.png", s.id));
                save_index_png(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        records.push(ManifestRecord {
            image_path: image_rel,
            tags: s
                .present_classes()
                .into_iter()
                .map(|c| class_names[c - 1].clone())
                .collect(),
            mask_path,
        });
    }
    let manifest = DatasetManifest {
        base_dir: dir.to_path_buf(),
        class_names: class_names.to_vec(),
        records,
    };
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Batching

/// Shuffled record order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0bad_cafe);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// One epoch of batches read lazily from disk. Loading is synchronous, so
/// the stream is bit-reproducible.
pub fn iterate_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Result<Vec<ImageSample>>> + '_ {
    batch_indices(manifest.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |idx| idx.iter().map(|&i| manifest.load_sample(i)).collect())
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 64,
            scale_min: 0.7,
            scale_max: 1.3,
            flip_prob: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Concrete geometry of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Crop origin in the resized image; negative values pad before the image.
    pub offset_y: isize,
    pub offset_x: isize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    /// Geometrically transformed sample in raw `[0, 1]` colours; padding is 0.
    pub raw: ImageSample,
    /// Network input: per-channel normalised; padding is 0.
    pub input: Array3<f64>,
}

pub fn normalize(image: &Array3<f64>, cfg: &AugmentConfig) -> Array3<f64> {
    let mut out = image.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - cfg.mean[c]) / cfg.std[c]);
    }
    out
}

pub fn draw_augment_params(h: usize, w: usize, seed: u64, cfg: &AugmentConfig) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.gen_range(cfg.scale_min..cfg.scale_max);
    let flip = rng.gen_bool(cfg.flip_prob);
    let (rh, rw) = scaled_size(h, w, scale);
    let mut offset = |len: usize| -> isize {
        let slack = len as isize - cfg.crop as isize;
        if slack >= 0 {
            rng.gen_range(0..=slack)
        } else {
            rng.gen_range(slack..=0)
        }
    };
    let offset_y = offset(rh);
    let offset_x = offset(rw);
    AugmentParams {
        scale,
        flip,
        offset_y,
        offset_x,
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Random rescale, horizontal flip, normalisation and crop. Tags are never
/// touched, even when the crop removes a class from the mask.
pub fn augment(sample: &ImageSample, seed: u64, cfg: &AugmentConfig) -> Result<AugmentedSample> {
    let params = draw_augment_params(sample.height(), sample.width(), seed, cfg);
    augment_with(sample, &params, cfg)
}

pub fn augment_with(
    sample: &ImageSample,
    params: &AugmentParams,
    cfg: &AugmentConfig,
) -> Result<AugmentedSample> {
    if sample.image.is_empty() {
        return Err(Error::Invalid(format!("sample {} has an empty image", sample.id)));
    }
    let (h, w) = (sample.height(), sample.width());
    let (rh, rw) = scaled_size(h, w, params.scale);
    let mut image = resample::resize_bilinear(&sample.image, rh, rw);
    let mut mask = sample
        .gt_mask
        .as_ref()
        .map(|m| resample::resize_nearest(m, rh, rw));
    if params.flip {
        image = resample::flip_horizontal(&image);
        mask = mask.map(|m| resample::flip_mask(&m));
    }
    let input_full = normalize(&image, cfg);
    let c = cfg.crop;
    let mut raw = Array3::zeros((3, c, c));
    let mut input = Array3::zeros((3, c, c));
    let mut out_mask = mask.as_ref().map(|_| Array2::from_elem((c, c), IGNORE));
    for y in 0..c {
        let sy = y as isize + params.offset_y;
        if sy < 0 || sy >= rh as isize {
            continue;
        }
        for x in 0..c {
            let sx = x as isize + params.offset_x;
            if sx < 0 || sx >= rw as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..3 {
                raw[[ch, y, x]] = image[[ch, sy, sx]];
                input[[ch, y, x]] = input_full[[ch, sy, sx]];
            }
            if let (Some(om), Some(m)) = (out_mask.as_mut(), mask.as_ref()) {
                om[[y, x]] = m[[sy, sx]];
            }
        }
    }
    Ok(AugmentedSample {
        raw: ImageSample {
            id: sample.id.clone(),
            image: raw,
            tags: sample.tags.clone(),
            gt_mask: out_mask,
        },
        input,
    })
}
