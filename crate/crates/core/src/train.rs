//! Training configuration and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{augment, derive_seed, split_train_test, DatasetManifest, PairedSample};
use crate::denoiser::{DenoiserConfig, DenoiserParams, UNet};
use crate::diffusion::{concat_condition, q_sample, standard_normal};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optimizer::Adam;
use crate::raster::Image;
use crate::schedule::{NoiseSchedule, DEFAULT_OFFSET, DEFAULT_TIMESTEPS};
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.mdck";

/// Keeps the parameter-init stream apart from the per-step streams, which
/// use indices 1, 2, ...
const INIT_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub timesteps: usize,
    pub schedule_offset: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub groups: usize,
    pub train_fraction: f64,
    pub augment: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            learning_rate: 1e-4,
            batch_size: 16,
            timesteps: DEFAULT_TIMESTEPS,
            schedule_offset: DEFAULT_OFFSET,
            seed: 0,
            checkpoint_every: 1000,
            data_root: PathBuf::new(),
            output_dir: PathBuf::new(),
            image_size: 32,
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 8],
            attention_levels: vec![2, 3],
            groups: 8,
            train_fraction: 0.9,
            augment: true,
            log_every: 100,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key} = {value:?} is not a valid value")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?} is not a boolean"))),
    }
}

impl TrainConfig {
    /// Parses flat `key = value` lines. `#` starts a comment. Relative paths
    /// are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: {key} given twice",
                    lineno + 1
                )));
            }
            let path = |v: &str| base_dir.join(v);
            match key {
                "iterations" => cfg.iterations = parse_value(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_value(key, value)?,
                "batch_size" => cfg.batch_size = parse_value(key, value)?,
                "timesteps" => cfg.timesteps = parse_value(key, value)?,
                "schedule_offset" => cfg.schedule_offset = parse_value(key, value)?,
                "loss" => {
                    if !value.eq_ignore_ascii_case("l1") {
                        return Err(Error::Config(format!(
                            "loss = {value:?}: only l1 is supported"
                        )));
                    }
                }
                "seed" => cfg.seed = parse_value(key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_value(key, value)?,
                "data_root" => cfg.data_root = path(value),
                "output_dir" => cfg.output_dir = path(value),
                "image_size" => cfg.image_size = parse_value(key, value)?,
                "base_channels" => cfg.base_channels = parse_value(key, value)?,
                "channel_mults" => cfg.channel_mults = parse_list(key, value)?,
                "attention_levels" => cfg.attention_levels = parse_list(key, value)?,
                "groups" => cfg.groups = parse_value(key, value)?,
                "train_fraction" => cfg.train_fraction = parse_value(key, value)?,
                "augment" => cfg.augment = parse_bool(key, value)?,
                "log_every" => cfg.log_every = parse_value(key, value)?,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        for (key, p) in [
            ("data_root", &cfg.data_root),
            ("output_dir", &cfg.output_dir),
        ] {
            if !seen.contains(key) {
                return Err(Error::Config(format!("{key} is required")));
            }
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{key} is empty")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations as usize),
            ("batch_size", self.batch_size),
            ("timesteps", self.timesteps),
            ("checkpoint_every", self.checkpoint_every as usize),
            ("image_size", self.image_size),
            ("log_every", self.log_every as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie in (0, 1]",
                self.train_fraction
            )));
        }
        NoiseSchedule::cosine(self.timesteps, self.schedule_offset)
            .map_err(|e| Error::Config(e.to_string()))?;
        // channel count is checked against the data once it is loaded
        let dc = self.denoiser_config(3);
        dc.validate()?;
        dc.check_input(dc.in_channels, self.image_size, self.image_size)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn denoiser_config(&self, image_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            groups: self.groups,
            ..DenoiserConfig::with_width(
                image_channels,
                self.base_channels,
                self.channel_mults.clone(),
                self.attention_levels.clone(),
            )
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps, self.schedule_offset)
    }
}

/// Training batch for one step: network input, target noise, timesteps.
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub timesteps: Vec<usize>,
}

/// Draws the batch for `step` from its own generator, so any step can be
/// reproduced without replaying earlier ones.
pub fn make_batch(
    samples: &[PairedSample],
    step: u64,
    seed: u64,
    batch_size: usize,
    sched: &NoiseSchedule,
    use_augment: bool,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step));
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    let mut timesteps = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.random_range(0..samples.len());
        let s = if use_augment {
            augment(&samples[idx], &mut rng)
        } else {
            samples[idx].clone()
        };
        let t = rng.random_range(1..=sched.timesteps());
        let (c, h, w) = s.image.dims();
        let eps = standard_normal(c, h, w, &mut rng);
        let xt = q_sample(&s.image, t, &eps, sched)?;
        inputs.push(concat_condition(&xt, &s.mask)?);
        targets.push(eps);
        timesteps.push(t);
    }
    Ok(Batch {
        input: Image::stack(&inputs)?,
        target: Image::stack(&targets)?,
        timesteps,
    })
}

/// Mean absolute error of the network on `batch`, and its parameter
/// gradients in parameter order.
pub fn loss_and_grads(
    net: &UNet,
    params: &DenoiserParams<f32>,
    batch: &Batch,
) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, params, true)?;
    let x = g.constant(batch.input.clone());
    let y = net.forward(&mut g, &vars, x, &batch.timesteps)?;
    let loss = g.l1_loss(y, batch.target.clone())?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let tensors = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, tensors))
}

pub struct Trainer {
    cfg: TrainConfig,
    net: UNet,
    sched: NoiseSchedule,
    samples: Vec<PairedSample>,
    params: DenoiserParams<f32>,
    optimizer: Adam,
    step: u64,
}

impl Trainer {
    /// Fresh parameters drawn from the config seed.
    pub fn new(cfg: TrainConfig, samples: Vec<PairedSample>) -> Result<Self> {
        cfg.validate()?;
        let channels = check_samples(&cfg, &samples)?;
        let net = UNet::new(&cfg.denoiser_config(channels))?;
        let params = net.init_params(derive_seed(cfg.seed, INIT_STREAM));
        let optimizer = Adam::new(&params, cfg.learning_rate)?;
        Ok(Trainer {
            sched: cfg.schedule()?,
            cfg,
            net,
            samples,
            params,
            optimizer,
            step: 0,
        })
    }

    /// Continues from `ckpt`, which must match the config's architecture and
    /// schedule and carry optimizer state.
    pub fn resume(cfg: TrainConfig, samples: Vec<PairedSample>, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, samples)?;
        if &ckpt.config != t.net.config() {
            return Err(Error::Config(
                "checkpoint architecture differs from the config".into(),
            ));
        }
        if ckpt.timesteps != t.cfg.timesteps || ckpt.offset != t.cfg.schedule_offset {
            return Err(Error::Config(
                "checkpoint schedule differs from the config".into(),
            ));
        }
        if ckpt.image_size != t.cfg.image_size {
            return Err(Error::Config(
                "checkpoint image size differs from the config".into(),
            ));
        }
        let mut optimizer = ckpt.optimizer.ok_or_else(|| {
            Error::Config("checkpoint has no optimizer state to resume from".into())
        })?;
        optimizer.lr = t.cfg.learning_rate;
        t.params = ckpt.params;
        t.optimizer = optimizer;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &DenoiserParams<f32> {
        &self.params
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    /// Runs one optimizer step and returns its loss.
    pub fn train_step(&mut self) -> Result<f32> {
        let step = self.step + 1;
        let batch = make_batch(
            &self.samples,
            step,
            self.cfg.seed,
            self.cfg.batch_size,
            &self.sched,
            self.cfg.augment,
        )?;
        let (loss, grads) = loss_and_grads(&self.net, &self.params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step} is {loss}"
            )));
        }
        self.optimizer.update(&mut self.params, &grads)?;
        self.step = step;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.net.config().clone(),
            timesteps: self.cfg.timesteps,
            offset: self.cfg.schedule_offset,
            image_size: self.cfg.image_size,
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

fn check_samples(cfg: &TrainConfig, samples: &[PairedSample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    let channels = first.image.channels();
    for s in samples {
        if s.image.dims() != (channels, cfg.image_size, cfg.image_size) {
            return Err(Error::Shape(format!(
                "sample {} is {:?}, expected {channels}x{}x{}",
                s.id,
                s.image.dims(),
                cfg.image_size,
                cfg.image_size
            )));
        }
    }
    Ok(channels)
}

/// Loads the manifest under `cfg.data_root` and keeps the training split.
pub fn load_training_set(cfg: &TrainConfig) -> Result<Vec<PairedSample>> {
    let manifest = DatasetManifest::discover(&cfg.data_root, (cfg.image_size, cfg.image_size))?;
    let (samples, _) = manifest.load()?;
    let (train, _) = split_train_test(&samples, cfg.train_fraction);
    if train.is_empty() {
        return Err(Error::Config(
            "train_fraction leaves no training samples".into(),
        ));
    }
    Ok(train)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub losses: Vec<f32>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(output_dir: &Path, step: u64) -> PathBuf {
    output_dir
        .join(CHECKPOINT_DIR)
        .join(format!("step_{step:07}.mdck"))
}

/// Reads `step<TAB>loss` rows of a loss log, skipping the header.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f32)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once('\t')
                .ok_or_else(|| Error::Invalid(format!("malformed loss log line {l:?}")))?;
            Ok((parse_value("step", s)?, parse_value("loss", v)?))
        })
        .collect()
}

/// Runs the configured training, optionally resuming from a checkpoint.
///
/// The config, data and checkpoint are all validated before anything is
/// written. Progress lines go to `progress`.
pub fn run_training(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let samples = load_training_set(cfg)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.clone(), samples, Checkpoint::load(path)?)?,
        None => Trainer::new(cfg.clone(), samples)?,
    };
    if trainer.step() >= cfg.iterations {
        return Err(Error::Config(format!(
            "checkpoint is at step {} but iterations = {}",
            trainer.step(),
            cfg.iterations
        )));
    }

    let ckpt_dir = cfg.output_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = cfg.output_dir.join(LOSS_LOG);
    // keep rows up to the resume point so the log reads as one run
    let mut log_text = String::from("step\tloss\n");
    if trainer.step() > 0 && log_path.is_file() {
        for (s, l) in read_loss_log(&log_path)?
            .into_iter()
            .filter(|(s, _)| *s <= trainer.step())
        {
            log_text.push_str(&format!("{s}\t{l}\n"));
        }
    }
    fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;
    let mut log = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let first_step = trainer.step() + 1;
    let mut losses = Vec::new();
    let mut last_saved = None;
    while trainer.step() < cfg.iterations {
        let loss = trainer.train_step()?;
        let step = trainer.step();
        losses.push(loss);
        writeln!(log, "{step}\t{loss}").map_err(|e| Error::io(&log_path, e))?;
        if step % cfg.log_every == 0 || step == cfg.iterations {
            let _ = writeln!(progress, "step {step}/{} loss {loss:.5}", cfg.iterations);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.iterations {
            let ckpt = trainer.checkpoint();
            let path = checkpoint_path(&cfg.output_dir, step);
            ckpt.save(&path)?;
            ckpt.save(&cfg.output_dir.join(LATEST_CHECKPOINT))?;
            last_saved = Some(path);
        }
    }
    Ok(TrainSummary {
        first_step,
        last_step: trainer.step(),
        losses,
        final_checkpoint: last_saved.expect("the final step always checkpoints"),
    })
}
