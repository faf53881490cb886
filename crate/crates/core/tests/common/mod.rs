//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskdiff::denoiser::{DenoiserConfig, DenoiserParams, UNet};
use maskdiff::graph::Graph;
use maskdiff::raster::{Image, Mask};
use maskdiff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let data = (0..c * h * w)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Image::new(c, h, w, data).unwrap()
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut impl Rng) -> Mask {
    let data = (0..h * w)
        .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
        .collect();
    Mask::new(h, w, data).unwrap()
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Two-level network over one image channel plus the mask, with attention
/// on the coarse level so every layer kind is exercised. Four norm groups
/// keep two channels per group at width 8; with one channel per group the
/// norm would cancel the per-channel time bias and zero its gradient.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        groups: 4,
        ..DenoiserConfig::with_width(1, 8, vec![1, 2], vec![1])
    }
}

/// Every parameter redrawn at random, including the zero-initialized head.
pub fn randomized_params(net: &UNet, seed: u64) -> DenoiserParams<f64> {
    let mut rng = rng(seed);
    let mut p = net.init_params::<f64>(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    p
}

/// Scalar objective `sum(w * net(x, t))` and its gradient for every parameter.
pub struct GradientProblem {
    pub net: UNet,
    pub params: DenoiserParams<f64>,
    pub input: Tensor<f64>,
    pub timesteps: Vec<usize>,
    pub weights: Tensor<f64>,
}

impl GradientProblem {
    /// `timesteps.len()` samples of 16x16 input.
    pub fn tiny(seed: u64, timesteps: &[usize]) -> Self {
        let n = timesteps.len();
        let net = UNet::new(&tiny_config()).unwrap();
        let params = randomized_params(&net, seed);
        let mut r = rng(seed + 1);
        let mut input = random_tensor(&[n, 2, 16, 16], 1.0, &mut r);
        // the mask channel stays binary
        for i in 0..n {
            for v in &mut input.data_mut()[(i * 2 + 1) * 256..(i * 2 + 2) * 256] {
                *v = if *v > 0.0 { 1.0 } else { 0.0 };
            }
        }
        // per-sample weights scaled by 1/n keep the objective, and with it
        // the roundoff of central differences, independent of batch size
        let weights = random_tensor(&[n, 1, 16, 16], 1.0, &mut r).map(|w| w / n as f64);
        GradientProblem {
            net,
            params,
            input,
            timesteps: timesteps.to_vec(),
            weights,
        }
    }

    pub fn loss(&self, params: &DenoiserParams<f64>) -> f64 {
        let mut g = Graph::new();
        let p = self.net.bind(&mut g, params, false).unwrap();
        let x = g.constant(self.input.clone());
        let y = self.net.forward(&mut g, &p, x, &self.timesteps).unwrap();
        let l = g.weighted_sum(y, self.weights.clone()).unwrap();
        g.value(l).data()[0]
    }

    pub fn gradients(&self) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let p = self.net.bind(&mut g, &self.params, true).unwrap();
        let x = g.constant(self.input.clone());
        let y = self.net.forward(&mut g, &p, x, &self.timesteps).unwrap();
        let l = g.weighted_sum(y, self.weights.clone()).unwrap();
        let grads = g.backward(l).unwrap();
        p.iter()
            .map(|&v| grads.get(v).expect("parameter gradient").clone())
            .collect()
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences with step `h` at the given `(tensor, element)`
/// positions, evaluated in parallel. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    problem: &GradientProblem,
    positions: &[(usize, usize)],
    h: f64,
    floor: f64,
) -> FdReport {
    let analytic = problem.gradients();
    let errors: Vec<(f64, usize)> = positions
        .par_iter()
        .enumerate()
        .map_init(
            || problem.params.clone(),
            |params, (k, &(ti, i))| {
                let orig = params.tensors()[ti].data()[i];
                params.tensors_mut()[ti].data_mut()[i] = orig + h;
                let up = problem.loss(params);
                params.tensors_mut()[ti].data_mut()[i] = orig - h;
                let down = problem.loss(params);
                params.tensors_mut()[ti].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[ti].data()[i];
                (
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor),
                    k,
                )
            },
        )
        .collect();
    let (max_rel, k) = errors
        .iter()
        .copied()
        .fold((0.0, 0), |m, e| if e.0 > m.0 { e } else { m });
    let (ti, i) = positions[k];
    FdReport {
        checked: positions.len(),
        max_rel,
        worst: format!(
            "{}[{i}] analytic {:e}",
            problem.params.names()[ti],
            analytic[ti].data()[i]
        ),
    }
}

/// Every scalar parameter position of `params`.
pub fn all_positions(params: &DenoiserParams<f64>) -> Vec<(usize, usize)> {
    params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |i| (ti, i)))
        .collect()
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_maskdiff")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("MASKDIFF_THREADS", "2")
        .output()
        .expect("spawn maskdiff")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "maskdiff {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes a training config and returns its path.
pub fn write_config(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

/// Config for a small, quick network on 16x16 toy data.
pub fn small_config_lines(data: &Path, out: &Path, iterations: u64) -> Vec<String> {
    vec![
        format!("data_root = {}", data.display()),
        format!("output_dir = {}", out.display()),
        format!("iterations = {iterations}"),
        "learning_rate = 0.001".into(),
        "batch_size = 4".into(),
        "timesteps = 50".into(),
        "image_size = 16".into(),
        "base_channels = 8".into(),
        "channel_mults = 1,2".into(),
        "attention_levels = 1".into(),
        "checkpoint_every = 5".into(),
        "log_every = 5".into(),
        "seed = 11".into(),
    ]
}
