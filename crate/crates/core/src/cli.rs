//! Command implementations behind the `maskdiff` binary. Each command
//! validates its inputs before touching the output location.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::data::{
    self, derive_seed, file_stem, list_images, load_image, load_mask, DatasetManifest,
};
use crate::denoiser::ConditionalUNet;
use crate::diffusion::{sample_batch, ReverseOptions, ReverseVariance};
use crate::error::{Error, Result};
use crate::metrics::{self, conditioning_fidelity, noise_baseline_iou, MetricReport, MetricRow};
use crate::raster::{Image, Mask};

pub const GRID_DIR: &str = "grids";
/// Sampling chains advanced together through each denoiser call.
pub const DEFAULT_SAMPLE_BATCH: usize = 16;
const GRID_GAP: u32 = 2;

pub fn make_toy(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    data::make_toy_dataset(n, size, seed, out_dir)
}

/// Seed of sample `index` for the mask at position `mask_index`.
pub fn sample_seed(seed: u64, mask_index: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, mask_index as u64), index as u64)
}

pub fn sample_file_name(mask_id: &str, index: usize) -> String {
    format!("{mask_id}_{index:02}.png")
}

/// Masks inside `dir` (or a single mask file), sorted by name.
pub fn load_masks(path: &Path, size: usize) -> Result<Vec<(String, Mask)>> {
    let files = if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        list_images(path)?
    };
    if files.is_empty() {
        return Err(Error::Invalid(format!(
            "no mask images in {}",
            path.display()
        )));
    }
    files
        .iter()
        .map(|f| {
            let mask = load_mask(f, None)?;
            if (mask.height(), mask.width()) != (size, size) {
                return Err(Error::Shape(format!(
                    "mask {} is {}x{} but the model generates {size}x{size}",
                    f.display(),
                    mask.height(),
                    mask.width()
                )));
            }
            Ok((file_stem(f), mask))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    pub count: usize,
    pub variance: ReverseVariance,
    pub clip_denoised: bool,
    pub batch: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            seed: 0,
            count: 1,
            variance: ReverseVariance::default(),
            clip_denoised: false,
            batch: DEFAULT_SAMPLE_BATCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub mask_id: String,
    pub images: Vec<PathBuf>,
    pub grid: PathBuf,
}

/// Generates `count` images per mask and writes them with one montage per
/// mask. Returns the generated images alongside the written paths.
pub fn sample_to_dir(
    ckpt: &Checkpoint,
    masks: &[(String, Mask)],
    out_dir: &Path,
    opts: &SampleOptions,
) -> Result<(Vec<SampleOutput>, Vec<Vec<Image>>)> {
    if opts.count == 0 || opts.batch == 0 {
        return Err(Error::Config("count and batch must be positive".into()));
    }
    for (id, m) in masks {
        if (m.height(), m.width()) != (ckpt.image_size, ckpt.image_size) {
            return Err(Error::Shape(format!(
                "mask {id} is {}x{} but the model generates {size}x{size}",
                m.height(),
                m.width(),
                size = ckpt.image_size
            )));
        }
    }
    let sched = ckpt.schedule()?;
    let model = ConditionalUNet::new(&ckpt.config, ckpt.params.clone())?;
    let reverse = ReverseOptions {
        variance: opts.variance,
        clip_denoised: opts.clip_denoised,
    };

    let jobs: Vec<(usize, usize)> = (0..masks.len())
        .flat_map(|m| (0..opts.count).map(move |i| (m, i)))
        .collect();
    let mut generated: Vec<Vec<Image>> = vec![Vec::with_capacity(opts.count); masks.len()];
    for chunk in jobs.chunks(opts.batch) {
        let chunk_masks: Vec<Mask> = chunk.iter().map(|&(m, _)| masks[m].1.clone()).collect();
        let seeds: Vec<u64> = chunk
            .iter()
            .map(|&(m, i)| sample_seed(opts.seed, m, i))
            .collect();
        let images = sample_batch(&model, &chunk_masks, &seeds, &sched, reverse)?;
        for (&(m, _), img) in chunk.iter().zip(images) {
            generated[m].push(img);
        }
    }

    let grid_dir = out_dir.join(GRID_DIR);
    fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    let mut outputs = Vec::with_capacity(masks.len());
    for ((id, mask), images) in masks.iter().zip(&generated) {
        let mut paths = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let path = out_dir.join(sample_file_name(id, i));
            img.save_png(&path)?;
            paths.push(path);
        }
        let grid = grid_dir.join(format!("{id}.png"));
        let montage = montage(mask, images)?;
        montage.save(&grid).map_err(|source| Error::Image {
            path: grid.clone(),
            source,
        })?;
        outputs.push(SampleOutput {
            mask_id: id.clone(),
            images: paths,
            grid,
        });
    }
    Ok((outputs, generated))
}

/// One row: the mask followed by its samples, separated by white gaps.
pub fn montage(mask: &Mask, images: &[Image]) -> Result<RgbImage> {
    let (h, w) = (mask.height() as u32, mask.width() as u32);
    let tiles = 1 + images.len() as u32;
    let mut out = RgbImage::from_pixel(tiles * w + (tiles - 1) * GRID_GAP, h, Rgb([255, 255, 255]));
    let gray = mask.to_gray();
    for (x, y, p) in gray.enumerate_pixels() {
        out.put_pixel(x, y, Rgb([p[0]; 3]));
    }
    for (k, img) in images.iter().enumerate() {
        if (img.height() as u32, img.width() as u32) != (h, w) {
            return Err(Error::Shape("montage tiles differ in size".into()));
        }
        let rgb = img.to_dynamic()?.to_rgb8();
        let x0 = (k as u32 + 1) * (w + GRID_GAP);
        for (x, y, p) in rgb.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *p);
        }
    }
    Ok(out)
}

/// Image files of `dir`, or of `dir/images` when `dir` holds none directly.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_images(dir)?;
    let nested = dir.join("images");
    if files.is_empty() && nested.is_dir() {
        return list_images(&nested);
    }
    Ok(files)
}

fn load_set(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Image>)> {
    let files = image_files(dir)?;
    let images = files
        .iter()
        .map(|f| load_image(f, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((files, images))
}

/// Mask for a synthetic image named `<mask_id>_<k>` (or `<mask_id>`).
fn mask_for<'a>(stem: &str, masks: &'a [(String, Mask)]) -> Option<&'a Mask> {
    let find = |id: &str| masks.iter().find(|(m, _)| m == id).map(|(_, m)| m);
    find(stem).or_else(|| stem.rsplit_once('_').and_then(|(id, _)| find(id)))
}

/// Distribution metrics of `synth_dir` against `real_dir`, plus mean
/// conditioning fidelity when masks are given.
pub fn evaluate(
    real_dir: &Path,
    synth_dir: &Path,
    masks_dir: Option<&Path>,
    threshold: f64,
) -> Result<MetricReport> {
    let (_, real) = load_set(real_dir)?;
    let (synth_files, synth) = load_set(synth_dir)?;
    for (name, set) in [("real", &real), ("synthetic", &synth)] {
        if set.len() < 2 {
            return Err(Error::Invalid(format!(
                "{name} set has {} image(s); FID and KID need N >= 2",
                set.len()
            )));
        }
    }
    let dims = real[0].dims();
    if let Some(bad) = real.iter().chain(&synth).find(|i| i.dims() != dims) {
        return Err(Error::Shape(format!(
            "image {:?} differs from {dims:?}",
            bad.dims()
        )));
    }
    let mut report = metrics::distribution_report(&real, &synth)?;
    if let Some(dir) = masks_dir {
        let masks = load_masks(dir, dims.1)?;
        let mut fidelity = 0.0;
        let mut baseline = 0.0;
        for (file, img) in synth_files.iter().zip(&synth) {
            let stem = file_stem(file);
            let mask = mask_for(&stem, &masks)
                .ok_or_else(|| Error::Invalid(format!("no mask matches synthetic image {stem}")))?;
            fidelity += conditioning_fidelity(img, mask, threshold)?;
            baseline += noise_baseline_iou(mask);
        }
        let n = synth.len() as f64;
        for (metric, value) in [
            ("conditioning_fidelity", fidelity / n),
            ("noise_baseline_iou", baseline / n),
        ] {
            report.rows.push(MetricRow {
                metric: metric.into(),
                value,
                n_real: masks.len(),
                n_synth: synth.len(),
                embedder_id: format!("threshold={threshold}"),
            });
        }
    }
    Ok(report)
}
