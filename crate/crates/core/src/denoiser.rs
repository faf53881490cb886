//! Conditional U-Net noise predictor.
//!
//! Layout: a 3x3 stem, an encoder of `L` levels (two residual blocks,
//! optional self-attention, then a strided 3x3 downsample except on the
//! last level), a residual/attention/residual bottleneck, a mirrored decoder
//! that concatenates the encoder activations pushed after each residual
//! block, and a GroupNorm/SiLU/conv head. The timestep enters through a
//! sinusoidal embedding and a two-layer feed-forward network whose output
//! is projected to a per-channel bias inside every residual block.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Image channels plus one mask channel.
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub groups: usize,
    pub time_embed_dim: usize,
    pub out_channels: usize,
}

impl DenoiserConfig {
    /// Width-64 network with multipliers [1, 2, 4, 8] and attention on the
    /// two coarsest levels.
    pub fn standard(image_channels: usize) -> Self {
        Self::with_width(image_channels, 64, vec![1, 2, 4, 8], vec![2, 3])
    }

    pub fn with_width(
        image_channels: usize,
        base_channels: usize,
        channel_mults: Vec<usize>,
        attention_levels: Vec<usize>,
    ) -> Self {
        DenoiserConfig {
            in_channels: image_channels + 1,
            base_channels,
            channel_mults,
            attention_levels,
            groups: 8,
            time_embed_dim: 4 * base_channels,
            out_channels: image_channels,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels < 2 {
            return fail(format!(
                "in_channels {} leaves no image channel",
                self.in_channels
            ));
        }
        if self.out_channels + 1 != self.in_channels {
            return fail(format!(
                "out_channels {} must equal in_channels {} - 1",
                self.out_channels, self.in_channels
            ));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return fail(format!("channel multipliers {:?}", self.channel_mults));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return fail(format!(
                "base_channels {} must be even and positive",
                self.base_channels
            ));
        }
        if self.groups == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return fail(format!(
                "base_channels {} not divisible by {} groups",
                self.base_channels, self.groups
            ));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return fail(format!(
                "attention level {l} beyond {} levels",
                self.levels()
            ));
        }
        if self.time_embed_dim == 0 {
            return fail("time_embed_dim must be positive".into());
        }
        Ok(())
    }

    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "denoiser expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let d = self.spatial_divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "spatial size {height}x{width} must be a positive multiple of {d}"
            )));
        }
        Ok(())
    }
}

/// `[sin(t w_0), .., sin(t w_{d/2-1}), cos(t w_0), .., cos(t w_{d/2-1})]`
/// with `w_k = 10000^(-2k/d)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "embedding dimension {dim} must be even and >= 2"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64))
        .collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|w| (t as f64 * w).sin()));
    out.extend(freqs.iter().map(|w| (t as f64 * w).cos()));
    Ok(out)
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(DenoiserParams {
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DenoiserParams {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Conv {
        let fan_in = cin * kernel * kernel;
        let init = if zero {
            Init::Zeros
        } else {
            Init::FanIn(fan_in)
        };
        Conv {
            w: self.add(
                format!("{prefix}.weight"),
                vec![cout, cin, kernel, kernel],
                init,
            ),
            b: self.add(format!("{prefix}.bias"), vec![cout], init),
            stride,
            pad: kernel / 2,
        }
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.add(
                format!("{prefix}.weight"),
                vec![out, fan_in],
                Init::FanIn(fan_in),
            ),
            b: self.add(format!("{prefix}.bias"), vec![out], Init::FanIn(fan_in)),
        }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.weight"), vec![channels], Init::Ones),
            beta: self.add(format!("{prefix}.bias"), vec![channels], Init::Zeros),
        }
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize, time_dim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{prefix}.norm1"), cin),
            conv1: self.conv(&format!("{prefix}.conv1"), cin, cout, 3, 1, false),
            time: self.linear(&format!("{prefix}.time"), time_dim, cout),
            norm2: self.norm(&format!("{prefix}.norm2"), cout),
            conv2: self.conv(&format!("{prefix}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout)
                .then(|| self.conv(&format!("{prefix}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attention(&mut self, prefix: &str, channels: usize) -> Attention {
        Attention {
            norm: self.norm(&format!("{prefix}.norm"), channels),
            qkv: self.conv(
                &format!("{prefix}.qkv"),
                channels,
                3 * channels,
                1,
                1,
                false,
            ),
            proj: self.conv(&format!("{prefix}.proj"), channels, channels, 1, 1, false),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Attention {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: [ResBlock; 2],
    attention: Option<Attention>,
    /// Strided conv on the way down, nearest-upsample + conv on the way up.
    resample: Option<Conv>,
}

/// The network layout: parameter shapes plus the wiring between them.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: DenoiserConfig,
    specs: Vec<ParamSpec>,
    stem: Conv,
    time_in: Linear,
    time_out: Linear,
    down: Vec<Level>,
    mid: (ResBlock, Attention, ResBlock),
    up: Vec<Level>,
    head_norm: Norm,
    head: Conv,
}

impl UNet {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::default();
        let td = cfg.time_embed_dim;
        let base = cfg.base_channels;
        let stem = reg.conv("stem", cfg.in_channels, base, 3, 1, false);
        let time_in = reg.linear("time.0", base, td);
        let time_out = reg.linear("time.1", td, td);

        let levels = cfg.levels();
        let mut down = Vec::with_capacity(levels);
        let mut ch = base;
        for l in 0..levels {
            let out = cfg.level_channels(l);
            let p = format!("down.{l}");
            let blocks = [
                reg.res_block(&format!("{p}.block0"), ch, out, td),
                reg.res_block(&format!("{p}.block1"), out, out, td),
            ];
            let attention = cfg
                .has_attention(l)
                .then(|| reg.attention(&format!("{p}.attn"), out));
            let resample = (l + 1 < levels)
                .then(|| reg.conv(&format!("{p}.downsample"), out, out, 3, 2, false));
            down.push(Level {
                blocks,
                attention,
                resample,
            });
            ch = out;
        }

        let mid = (
            reg.res_block("mid.block0", ch, ch, td),
            reg.attention("mid.attn", ch),
            reg.res_block("mid.block1", ch, ch, td),
        );

        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let out = cfg.level_channels(l);
            let p = format!("up.{l}");
            let blocks = [
                reg.res_block(&format!("{p}.block0"), ch + out, out, td),
                reg.res_block(&format!("{p}.block1"), out + out, out, td),
            ];
            let attention = cfg
                .has_attention(l)
                .then(|| reg.attention(&format!("{p}.attn"), out));
            let resample = (l > 0).then(|| {
                reg.conv(
                    &format!("{p}.upsample"),
                    out,
                    cfg.level_channels(l - 1),
                    3,
                    1,
                    false,
                )
            });
            ch = resample.map_or(out, |_| cfg.level_channels(l - 1));
            up.push(Level {
                blocks,
                attention,
                resample,
            });
        }

        let head_norm = reg.norm("head.norm", ch);
        let head = reg.conv("head.conv", ch, cfg.out_channels, 3, 1, true);
        Ok(UNet {
            cfg: cfg.clone(),
            specs: reg.specs,
            stem,
            time_in,
            time_out,
            down,
            mid,
            up,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Checks that `params` carries exactly this layout's names and shapes.
    pub fn check_params<T: Real>(&self, params: &DenoiserParams<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in self.specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match layout {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Fan-in scaled uniform weights, unit/zero norms and a zero output head.
    pub fn init_params<T: Real>(&self, seed: u64) -> DenoiserParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                            .collect()
                    }
                    Init::Ones => vec![T::one(); n],
                    Init::Zeros => vec![T::zero(); n],
                };
                (
                    spec.name.clone(),
                    Tensor::from_vec(&spec.shape, data).expect("spec shape"),
                )
            })
            .collect();
        DenoiserParams::from_named(entries).expect("layout names are unique")
    }

    /// Registers `params` as graph leaves, trainable or constant.
    pub fn bind<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &DenoiserParams<T>,
        trainable: bool,
    ) -> Result<Vec<Var>> {
        self.check_params(params)?;
        Ok(params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect())
    }

    /// Builds the forward pass for `x: [N, in_channels, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        timesteps: &[usize],
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "denoiser input must be NCHW, got {shape:?}"
            )));
        }
        self.cfg.check_input(shape[1], shape[2], shape[3])?;
        if timesteps.len() != shape[0] {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {}",
                timesteps.len(),
                shape[0]
            )));
        }

        let dim = self.cfg.base_channels;
        let mut emb = Vec::with_capacity(timesteps.len() * dim);
        for &t in timesteps {
            emb.extend(sinusoidal_embedding(t, dim)?.into_iter().map(T::from_f64));
        }
        let emb = g.constant(Tensor::from_vec(&[timesteps.len(), dim], emb)?);
        let h = self.linear(g, p, emb, self.time_in)?;
        let h = g.silu(h);
        let temb = self.linear(g, p, h, self.time_out)?;
        let temb = g.silu(temb);

        let mut h = self.conv(g, p, x, self.stem)?;
        let mut skips = Vec::with_capacity(2 * self.down.len());
        for level in &self.down {
            h = self.res_block(g, p, h, temb, &level.blocks[0])?;
            skips.push(h);
            h = self.res_block(g, p, h, temb, &level.blocks[1])?;
            if let Some(a) = &level.attention {
                h = self.attention(g, p, h, a)?;
            }
            skips.push(h);
            if let Some(c) = level.resample {
                h = self.conv(g, p, h, c)?;
            }
        }

        h = self.res_block(g, p, h, temb, &self.mid.0)?;
        h = self.attention(g, p, h, &self.mid.1)?;
        h = self.res_block(g, p, h, temb, &self.mid.2)?;

        for level in &self.up {
            for block in &level.blocks {
                let skip = skips.pop().expect("one skip per encoder block");
                h = g.concat_channels(h, skip)?;
                h = self.res_block(g, p, h, temb, block)?;
            }
            if let Some(a) = &level.attention {
                h = self.attention(g, p, h, a)?;
            }
            if let Some(c) = level.resample {
                h = g.upsample_nearest2(h)?;
                h = self.conv(g, p, h, c)?;
            }
        }

        h = self.norm(g, p, h, self.head_norm)?;
        h = g.silu(h);
        self.conv(g, p, h, self.head)
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, c: Conv) -> Result<Var> {
        g.conv2d(x, p[c.w], Some(p[c.b]), c.stride, c.pad)
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, l: Linear) -> Result<Var> {
        g.linear(x, p[l.w], Some(p[l.b]))
    }

    fn norm<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, n: Norm) -> Result<Var> {
        g.group_norm(x, p[n.gamma], p[n.beta], self.cfg.groups)
    }

    fn res_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        temb: Var,
        b: &ResBlock,
    ) -> Result<Var> {
        let h = self.norm(g, p, x, b.norm1)?;
        let h = g.silu(h);
        let h = self.conv(g, p, h, b.conv1)?;
        let bias = self.linear(g, p, temb, b.time)?;
        let h = g.add_channel_bias(h, bias)?;
        let h = self.norm(g, p, h, b.norm2)?;
        let h = g.silu(h);
        let h = self.conv(g, p, h, b.conv2)?;
        let residual = match b.skip {
            Some(c) => self.conv(g, p, x, c)?,
            None => x,
        };
        g.add(h, residual)
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        a: &Attention,
    ) -> Result<Var> {
        let h = self.norm(g, p, x, a.norm)?;
        let qkv = self.conv(g, p, h, a.qkv)?;
        let h = g.attention(qkv)?;
        let h = self.conv(g, p, h, a.proj)?;
        g.add(x, h)
    }
}

/// Validates `cfg` and draws a fresh parameter set.
pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserParams<f32>> {
    Ok(UNet::new(cfg)?.init_params(seed))
}

/// Runs the network once without recording gradients.
pub fn denoiser_forward<T: Real>(
    params: &DenoiserParams<T>,
    cfg: &DenoiserConfig,
    x: &Tensor<T>,
    timesteps: &[usize],
) -> Result<Tensor<T>> {
    let net = UNet::new(cfg)?;
    forward_with(&net, params, x, timesteps)
}

fn forward_with<T: Real>(
    net: &UNet,
    params: &DenoiserParams<T>,
    x: &Tensor<T>,
    timesteps: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, params, false)?;
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &p, xv, timesteps)?;
    let y = g.into_value(out);
    if !y.all_finite() {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    Ok(y)
}

/// A trained (or freshly initialized) network ready for inference.
#[derive(Clone, Debug)]
pub struct ConditionalUNet {
    net: UNet,
    params: DenoiserParams<f32>,
}

impl ConditionalUNet {
    pub fn new(cfg: &DenoiserConfig, params: DenoiserParams<f32>) -> Result<Self> {
        let net = UNet::new(cfg)?;
        net.check_params(&params)?;
        Ok(ConditionalUNet { net, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.net.config()
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn params(&self) -> &DenoiserParams<f32> {
        &self.params
    }
}

impl Denoiser for ConditionalUNet {
    fn image_channels(&self) -> usize {
        self.net.cfg.out_channels
    }

    fn predict(&self, input: &Tensor<f32>, timesteps: &[usize]) -> Result<Tensor<f32>> {
        forward_with(&self.net, &self.params, input, timesteps)
    }
}
