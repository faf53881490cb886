//! Paired image/mask ingestion, augmentation and the toy dataset generator.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub image: Image,
    pub mask: Mask,
    pub id: String,
}

impl PairedSample {
    pub fn new(image: Image, mask: Mask, id: impl Into<String>) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape(format!(
                "image {}x{} and mask {}x{} differ",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(PairedSample {
            image,
            mask,
            id: id.into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Samples whose mask has no foreground pixel after thresholding.
    pub empty_masks: Vec<String>,
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_grayscale(img: &DynamicImage) -> bool {
    !img.color().has_color()
}

/// Decodes an 8-bit image, resizes it bilinearly to `(height, width)` and
/// maps pixel values by `v / 127.5 - 1`. Grayscale files yield one channel,
/// everything else three.
pub fn load_image(path: &Path, target: Option<(usize, usize)>) -> Result<Image> {
    let img = open(path)?;
    let channels = if is_grayscale(&img) { 1 } else { 3 };
    let (w0, h0) = (img.width() as usize, img.height() as usize);
    let (h, w) = target.unwrap_or((h0, w0));
    let raw: Vec<f32> = if channels == 1 {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(f32::from)
            .collect()
    } else {
        img.to_rgb8()
            .into_raw()
            .into_iter()
            .map(f32::from)
            .collect()
    };
    let resized: Vec<f32> = if (h, w) == (h0, w0) {
        raw
    } else if channels == 1 {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w0 as u32, h0 as u32, raw).expect("buffer size");
        imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle).into_raw()
    } else {
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w0 as u32, h0 as u32, raw).expect("buffer size");
        imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle).into_raw()
    };
    // interleaved HWC -> planar CHW
    let mut data = vec![0.0; channels * h * w];
    for (i, &v) in resized.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = (v as f64 / 127.5 - 1.0).clamp(-1.0, 1.0);
    }
    Image::new(channels, h, w, data)
}

/// Decodes a mask, collapses it to one channel, resizes with nearest
/// neighbour and thresholds at half intensity.
pub fn load_mask(path: &Path, target: Option<(usize, usize)>) -> Result<Mask> {
    let gray = open(path)?.to_luma8();
    let (w0, h0) = (gray.width() as usize, gray.height() as usize);
    let (h, w) = target.unwrap_or((h0, w0));
    let gray = if (h, w) == (h0, w0) {
        gray
    } else {
        imageops::resize(&gray, w as u32, h as u32, FilterType::Nearest)
    };
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| {
            if f64::from(v) / 255.0 >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Mask::new(h, w, data)
}

pub fn load_pair(
    image_file: &Path,
    mask_file: &Path,
    target: (usize, usize),
    id: &str,
) -> Result<PairedSample> {
    let image = load_image(image_file, Some(target))?;
    let mask = load_mask(mask_file, Some(target))?;
    PairedSample::new(image, mask, id)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl DatasetManifest {
    /// Reads `<root>/manifest.tsv` if present, otherwise pairs
    /// `<root>/images/<id>.*` with `<root>/masks/<id>.*`.
    pub fn discover(root: &Path, size: (usize, usize)) -> Result<Self> {
        if root.join(MANIFEST_FILE).is_file() {
            Self::read(root, size)
        } else {
            Self::scan(root, size)
        }
    }

    pub fn scan(root: &Path, (height, width): (usize, usize)) -> Result<Self> {
        let masks = list_images(&root.join("masks"))?;
        let mut entries = Vec::new();
        for image in list_images(&root.join("images"))? {
            let id = file_stem(&image);
            let mask = masks
                .iter()
                .find(|m| file_stem(m) == id)
                .ok_or_else(|| Error::Invalid(format!("no mask for image {id}")))?;
            entries.push(ManifestEntry {
                id,
                image,
                mask: mask.clone(),
            });
        }
        Self::checked(root, entries, height, width)
    }

    pub fn read(root: &Path, (height, width): (usize, usize)) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 && line.starts_with("id\t") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Invalid(format!(
                    "{}:{}: expected 3 tab-separated columns",
                    path.display(),
                    lineno + 1
                )));
            }
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                image: root.join(cols[1]),
                mask: root.join(cols[2]),
            });
        }
        Self::checked(root, entries, height, width)
    }

    fn checked(
        root: &Path,
        entries: Vec<ManifestEntry>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid(format!(
                "no samples under {}",
                root.display()
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id {}", e.id)));
            }
            for f in [&e.image, &e.mask] {
                if !f.is_file() {
                    return Err(Error::Invalid(format!("missing file {}", f.display())));
                }
            }
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            height,
            width,
        })
    }

    pub fn write(&self) -> Result<()> {
        let mut text = String::from("id\timage_path\tmask_path\n");
        for e in &self.entries {
            let rel = |p: &Path| {
                p.strip_prefix(&self.root)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            };
            text.push_str(&format!("{}\t{}\t{}\n", e.id, rel(&e.image), rel(&e.mask)));
        }
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self) -> Result<(Vec<PairedSample>, LoadReport)> {
        use rayon::prelude::*;
        let samples = self
            .entries
            .par_iter()
            .map(|e| load_pair(&e.image, &e.mask, (self.height, self.width), &e.id))
            .collect::<Result<Vec<_>>>()?;
        let report = LoadReport {
            loaded: samples.len(),
            empty_masks: samples
                .iter()
                .filter(|s| s.mask.is_empty())
                .map(|s| s.id.clone())
                .collect(),
        };
        Ok((samples, report))
    }
}

/// Splits off the leading `fraction` of samples (rounded) for training.
pub fn split_train_test<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let cut = ((items.len() as f64 * fraction).round() as usize).min(items.len());
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Geometric transform drawn once and applied identically to image and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Small-angle rotation in degrees, if any.
    pub angle_deg: Option<f64>,
}

pub const MAX_SMALL_ANGLE_DEG: f64 = 15.0;

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        quarter_turns: 0,
        angle_deg: None,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let quarter_turns = rng.random_range(0..4u8);
        let rotate = rng.random_bool(0.5);
        let angle = rng.random_range(-MAX_SMALL_ANGLE_DEG..=MAX_SMALL_ANGLE_DEG);
        AugmentParams {
            flip,
            quarter_turns,
            angle_deg: rotate.then_some(angle),
        }
    }
}

/// Random flip, quarter-turn and small-angle rotation.
pub fn augment(sample: &PairedSample, rng: &mut impl Rng) -> PairedSample {
    apply_augment(sample, &AugmentParams::draw(rng))
}

pub fn apply_augment(sample: &PairedSample, params: &AugmentParams) -> PairedSample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if params.flip {
        image = flip_image(&image);
        mask = flip_mask(&mask);
    }
    let square = image.height() == image.width();
    // non-square frames only take half turns so the shape is preserved
    let turns = if square {
        params.quarter_turns % 4
    } else {
        params.quarter_turns & 2
    };
    if turns != 0 {
        image = rotate90_image(&image, turns);
        mask = rotate90_mask(&mask, turns);
    }
    if let Some(angle) = params.angle_deg {
        image = rotate_image(&image, angle);
        mask = rotate_mask(&mask, angle);
    }
    PairedSample {
        image,
        mask,
        id: sample.id.clone(),
    }
}

fn remap_image(
    img: &Image,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Image {
    let mut out = Image::zeros(img.channels(), out_h, out_w);
    for c in 0..img.channels() {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src(y, x);
                out.set(c, y, x, img.get(c, sy, sx));
            }
        }
    }
    out
}

pub fn flip_image(img: &Image) -> Image {
    let w = img.width();
    remap_image(img, img.height(), w, |y, x| (y, w - 1 - x))
}

pub fn flip_mask(mask: &Mask) -> Mask {
    let w = mask.width();
    Mask::from_fn(mask.height(), w, |y, x| mask.get(y, w - 1 - x))
}

fn rot90_source(h: usize, w: usize, turns: u8) -> impl Fn(usize, usize) -> (usize, usize) {
    move |y, x| match turns % 4 {
        0 => (y, x),
        1 => (x, w - 1 - y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (h - 1 - x, y),
    }
}

fn rot90_dims(h: usize, w: usize, turns: u8) -> (usize, usize) {
    if turns % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    }
}

/// Exact counter-clockwise rotation by `turns` quarter turns.
pub fn rotate90_image(img: &Image, turns: u8) -> Image {
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = rot90_dims(h, w, turns);
    remap_image(img, oh, ow, rot90_source(h, w, turns))
}

pub fn rotate90_mask(mask: &Mask, turns: u8) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let (oh, ow) = rot90_dims(h, w, turns);
    let src = rot90_source(h, w, turns);
    Mask::from_fn(oh, ow, |y, x| {
        let (sy, sx) = src(y, x);
        mask.get(sy, sx)
    })
}

/// Reflects a continuous coordinate into `[0, n - 1]` (edge pixel not repeated).
fn reflect(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let r = u.abs() % period;
    if r > (n - 1) as f64 {
        period - r
    } else {
        r
    }
}

/// Source coordinate of output pixel `(y, x)` under a rotation by
/// `angle_deg` about the frame centre.
fn rotation_source(h: usize, w: usize, angle_deg: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    move |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = cos * dx - sin * dy + cx;
        let sy = sin * dx + cos * dy + cy;
        (reflect(sy, h), reflect(sx, w))
    }
}

/// Bilinear rotation with reflect padding.
pub fn rotate_image(img: &Image, angle_deg: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let src = rotation_source(h, w, angle_deg);
    let mut out = Image::zeros(img.channels(), h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..img.channels() {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.set(c, y, x, (top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0));
            }
        }
    }
    out
}

/// Nearest-neighbour rotation with reflect padding; stays binary.
pub fn rotate_mask(mask: &Mask, angle_deg: f64) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let src = rotation_source(h, w, angle_deg);
    Mask::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        mask.get(
            (sy.round() as usize).min(h - 1),
            (sx.round() as usize).min(w - 1),
        )
    })
}

/// Ellipse geometry of a toy sample, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.center_x, py - self.center_y);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.semi_a;
        let v = (-dx * s + dy * c) / self.semi_b;
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.semi_a * self.semi_b
    }

    fn draw(hw: usize, rng: &mut impl Rng) -> Self {
        let s = hw as f64;
        Ellipse {
            center_x: rng.random_range(0.3..0.7) * s,
            center_y: rng.random_range(0.3..0.7) * s,
            semi_a: rng.random_range(0.15..0.4) * s / 2.0,
            semi_b: rng.random_range(0.15..0.4) * s / 2.0,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        }
    }
}

/// Mixes a dataset seed and an item index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One toy sample: a filled ellipse mask over a smooth dark background,
/// with the ellipse interior brightened.
pub fn toy_sample(hw: usize, seed: u64, id: &str) -> (PairedSample, Ellipse) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipse = Ellipse::draw(hw, &mut rng);
    let mask = Mask::from_fn(hw, hw, |y, x| {
        ellipse.contains(x as f64 + 0.5, y as f64 + 0.5)
    });

    // three low-frequency waves shared by both regions
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.3).sum();
    let tints: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");

    let mut image = Image::zeros(3, hw, hw);
    for y in 0..hw {
        for x in 0..hw {
            let (u, v) = (x as f64 / hw as f64, y as f64 / hw as f64);
            let wave: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| {
                    amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin()
                })
                .sum::<f64>()
                / amp_total;
            let texture = 0.5 + 0.5 * wave;
            let inside = mask.get(y, x);
            for (c, &tint) in tints.iter().enumerate() {
                let level = (0.3 * tint + 0.7 * texture).clamp(0.0, 1.0);
                let jitter = noise.sample(&mut rng);
                let value = if inside {
                    (0.3 + 0.7 * level + jitter).clamp(0.3, 1.0)
                } else {
                    (-1.0 + 0.8 * level + jitter).clamp(-1.0, -0.2)
                };
                image.set(c, y, x, value);
            }
        }
    }
    (
        PairedSample {
            image,
            mask,
            id: id.to_string(),
        },
        ellipse,
    )
}

pub fn toy_id(index: usize) -> String {
    format!("toy_{index:04}")
}

/// Writes `n` toy pairs as PNGs under `out_dir/{images,masks}` plus a manifest.
pub fn make_toy_dataset(n: usize, hw: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n < 1 {
        return Err(Error::Config(
            "toy dataset needs at least one sample".into(),
        ));
    }
    if hw < 16 {
        return Err(Error::Config(format!("toy image size {hw} is below 16")));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = toy_id(i);
        let (sample, _) = toy_sample(hw, derive_seed(seed, i as u64), &id);
        let image = images_dir.join(format!("{id}.png"));
        let mask = masks_dir.join(format!("{id}.png"));
        sample.image.save_png(&image)?;
        sample.mask.save_png(&mask)?;
        entries.push(ManifestEntry { id, image, mask });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        height: hw,
        width: hw,
    };
    manifest.write()?;
    Ok(manifest)
}
