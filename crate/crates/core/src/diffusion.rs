//! Forward noising, the L1 noise-prediction objective and ancestral
//! sampling conditioned on a binary mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask, NoiseTensor};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// A noise predictor over mask-conditioned inputs.
///
/// `input` is `[N, C + 1, H, W]`: the noisy image channels followed by the
/// mask channel. Returns the predicted noise, `[N, C, H, W]`.
pub trait Denoiser {
    fn image_channels(&self) -> usize;
    fn predict(&self, input: &Tensor<f32>, timesteps: &[usize]) -> Result<Tensor<f32>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn image_channels(&self) -> usize {
        (**self).image_channels()
    }
    fn predict(&self, input: &Tensor<f32>, timesteps: &[usize]) -> Result<Tensor<f32>> {
        (**self).predict(input, timesteps)
    }
}

/// Which variance the reverse step injects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReverseVariance {
    /// The posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    #[default]
    Posterior,
    /// The forward step variance `beta_t`.
    Beta,
}

impl std::str::FromStr for ReverseVariance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(ReverseVariance::Posterior),
            "beta" => Ok(ReverseVariance::Beta),
            other => Err(Error::Config(format!("unknown reverse variance {other:?}"))),
        }
    }
}

/// Settings of the reverse step beyond the model and the schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReverseOptions {
    pub variance: ReverseVariance,
    /// Clip the implied clean image to [-1, 1] and feed the noise consistent
    /// with it into the step. Off by default.
    pub clip_denoised: bool,
}

impl From<ReverseVariance> for ReverseOptions {
    fn from(variance: ReverseVariance) -> Self {
        ReverseOptions {
            variance,
            clip_denoised: false,
        }
    }
}

/// Replaces `eps_hat` by the noise that explains `xt` together with the
/// clipped clean-image estimate. Leaves it unchanged where no clipping
/// happens. With `abar_t = 0` the noise is `xt` itself.
pub fn clip_denoised_eps(
    xt: &Image,
    eps_hat: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image> {
    same_shape(xt, eps_hat, "denoiser output")?;
    let abar = sched.alpha_bar(t);
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = eps_hat.clone();
    for (e, &x) in out.data_mut().iter_mut().zip(xt.data()) {
        if abar == 0.0 {
            *e = x;
            continue;
        }
        let x0 = (x - sb * *e) / sa;
        if !(-1.0..=1.0).contains(&x0) {
            *e = (x - sa * x0.clamp(-1.0, 1.0)) / sb;
        }
    }
    Ok(out)
}

pub fn standard_normal(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut impl rand::Rng,
) -> NoiseTensor {
    let mut img = Image::zeros(channels, height, width);
    for v in img.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    img
}

fn same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `sqrt(abar) * x0 + sqrt(1 - abar) * eps` for an explicit `abar`.
pub fn q_sample_with_alpha_bar(x0: &Image, alpha_bar: f64, eps: &NoiseTensor) -> Result<Image> {
    same_shape(x0, eps, "q_sample")?;
    let (signal, noise) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = signal * *o + noise * e;
    }
    Ok(out)
}

pub fn q_sample(x0: &Image, t: usize, eps: &NoiseTensor, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    q_sample_with_alpha_bar(x0, sched.alpha_bar(t), eps)
}

/// Recovers `x0` from `x_t` and the noise that produced it.
pub fn invert_q_sample(
    xt: &Image,
    t: usize,
    eps: &NoiseTensor,
    sched: &NoiseSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    same_shape(xt, eps, "invert_q_sample")?;
    let alpha_bar = sched.alpha_bar(t);
    if alpha_bar <= 0.0 {
        return Err(Error::Degenerate(format!(
            "alpha_bar is 0 at t = {t}; the signal is unrecoverable"
        )));
    }
    let (signal, noise) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    let mut out = xt.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = (*o - noise * e) / signal;
    }
    Ok(out)
}

/// Appends the mask as one extra channel. The mask is copied verbatim.
pub fn concat_condition(xt: &Image, mask: &Mask) -> Result<Image> {
    if xt.height() != mask.height() || xt.width() != mask.width() {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            xt.height(),
            xt.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut data = Vec::with_capacity(xt.data().len() + mask.data().len());
    data.extend_from_slice(xt.data());
    data.extend_from_slice(mask.data());
    Image::new(xt.channels() + 1, xt.height(), xt.width(), data)
}

fn predict_batch<D: Denoiser + ?Sized>(
    model: &D,
    inputs: &[Image],
    timesteps: &[usize],
) -> Result<Vec<Image>> {
    let batch = Image::stack(inputs)?;
    let out = model.predict(&batch, timesteps)?;
    let images = Image::unstack(&out)?;
    if images.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "denoiser returned {} predictions for {} inputs",
            images.len(),
            inputs.len()
        )));
    }
    Ok(images)
}

pub fn mean_abs_error(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "mean_abs_error")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(total / a.data().len() as f64)
}

/// Mean absolute error between `eps` and the model's prediction from the
/// mask-conditioned noisy input.
pub fn training_loss<D: Denoiser + ?Sized>(
    model: &D,
    x0: &Image,
    mask: &Mask,
    t: usize,
    eps: &NoiseTensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let xt = q_sample(x0, t, eps, sched)?;
    let input = concat_condition(&xt, mask)?;
    let pred = predict_batch(model, &[input], &[t])?;
    mean_abs_error(&pred[0], eps)
}

fn reverse_step_from_prediction(
    xt: &Image,
    eps_hat: &Image,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&NoiseTensor>,
    opts: ReverseOptions,
) -> Result<Image> {
    same_shape(xt, eps_hat, "denoiser output")?;
    let clipped;
    let eps_hat = if opts.clip_denoised {
        clipped = clip_denoised_eps(xt, eps_hat, t, sched)?;
        &clipped
    } else {
        eps_hat
    };
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / sched.sqrt_one_minus_alpha_bar(t);
    let sigma = match opts.variance {
        ReverseVariance::Posterior => sched.posterior_variance(t),
        ReverseVariance::Beta => sched.beta(t),
    }
    .sqrt();
    let mut out = xt.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * e);
    }
    if let Some(z) = z {
        same_shape(xt, z, "reverse-step noise")?;
        for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    Ok(out)
}

fn check_final_noise(t: usize, z: Option<&NoiseTensor>) -> Result<()> {
    if t == 1 && z.is_some_and(|z| z.data().iter().any(|&v| v != 0.0)) {
        return Err(Error::Invalid(
            "the final reverse step (t = 1) takes no noise".into(),
        ));
    }
    Ok(())
}

/// One ancestral step `x_t -> x_{t-1}`. `z = None` means zero noise.
pub fn p_sample_step<D: Denoiser + ?Sized>(
    model: &D,
    xt: &Image,
    mask: &Mask,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&NoiseTensor>,
    opts: impl Into<ReverseOptions>,
) -> Result<Image> {
    let mut out = p_sample_step_batch(
        model,
        std::slice::from_ref(xt),
        std::slice::from_ref(mask),
        t,
        sched,
        &[z],
        opts,
    )?;
    Ok(out.remove(0))
}

/// [`p_sample_step`] over a batch sharing one timestep.
pub fn p_sample_step_batch<D: Denoiser + ?Sized>(
    model: &D,
    xs: &[Image],
    masks: &[Mask],
    t: usize,
    sched: &NoiseSchedule,
    zs: &[Option<&NoiseTensor>],
    opts: impl Into<ReverseOptions>,
) -> Result<Vec<Image>> {
    let opts = opts.into();
    sched.check_step(t)?;
    if xs.len() != masks.len() || xs.len() != zs.len() {
        return Err(Error::Shape(format!(
            "{} states, {} masks, {} noise draws",
            xs.len(),
            masks.len(),
            zs.len()
        )));
    }
    for z in zs {
        check_final_noise(t, *z)?;
    }
    let inputs = xs
        .iter()
        .zip(masks)
        .map(|(x, m)| concat_condition(x, m))
        .collect::<Result<Vec<_>>>()?;
    let eps_hat = predict_batch(model, &inputs, &vec![t; xs.len()])?;
    xs.iter()
        .zip(&eps_hat)
        .zip(zs)
        .map(|((x, e), z)| reverse_step_from_prediction(x, e, t, sched, *z, opts))
        .collect()
}

/// Generates one image for `mask`, starting from seeded Gaussian noise.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    mask: &Mask,
    sched: &NoiseSchedule,
    seed: u64,
    opts: impl Into<ReverseOptions>,
) -> Result<Image> {
    let mut out = sample_batch(model, std::slice::from_ref(mask), &[seed], sched, opts)?;
    Ok(out.remove(0))
}

/// Runs independent sampling chains in lockstep, one model call per step.
///
/// Chain `i` draws all of its noise from a generator seeded with
/// `seeds[i]`, so its output does not depend on the rest of the batch.
pub fn sample_batch<D: Denoiser + ?Sized>(
    model: &D,
    masks: &[Mask],
    seeds: &[u64],
    sched: &NoiseSchedule,
    opts: impl Into<ReverseOptions>,
) -> Result<Vec<Image>> {
    let opts = opts.into();
    if masks.len() != seeds.len() {
        return Err(Error::Shape(format!(
            "{} masks but {} seeds",
            masks.len(),
            seeds.len()
        )));
    }
    if masks.is_empty() {
        return Ok(Vec::new());
    }
    let channels = model.image_channels();
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let mut xs: Vec<Image> = masks
        .iter()
        .zip(&mut rngs)
        .map(|(m, rng)| standard_normal(channels, m.height(), m.width(), rng))
        .collect();
    for t in (1..=sched.timesteps()).rev() {
        let zs: Vec<Option<NoiseTensor>> = xs
            .iter()
            .zip(&mut rngs)
            .map(|(x, rng)| {
                (t > 1).then(|| standard_normal(x.channels(), x.height(), x.width(), rng))
            })
            .collect();
        let z_refs: Vec<Option<&NoiseTensor>> = zs.iter().map(|z| z.as_ref()).collect();
        xs = p_sample_step_batch(model, &xs, masks, t, sched, &z_refs, opts)?;
    }
    Ok(xs.iter().map(|x| x.clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Returns a fixed tensor (or zeros) and records every input it sees.
    struct Stub {
        channels: usize,
        answer: Option<Image>,
        offset: f64,
        seen: RefCell<Vec<(Tensor<f32>, Vec<usize>)>>,
    }

    impl Stub {
        fn new(channels: usize) -> Self {
            Stub {
                channels,
                answer: None,
                offset: 0.0,
                seen: RefCell::new(Vec::new()),
            }
        }
    }

    impl Denoiser for Stub {
        fn image_channels(&self) -> usize {
            self.channels
        }
        fn predict(&self, input: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
            self.seen.borrow_mut().push((input.clone(), t.to_vec()));
            let s = input.shape();
            let n = s[0];
            let mut out = Tensor::zeros(&[n, self.channels, s[2], s[3]]);
            if let Some(a) = &self.answer {
                for (chunk, _) in out.data_mut().chunks_mut(a.data().len()).zip(0..n) {
                    for (o, v) in chunk.iter_mut().zip(a.data()) {
                        *o = *v as f32;
                    }
                }
            }
            for o in out.data_mut() {
                *o += self.offset as f32;
            }
            Ok(out)
        }
    }

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let n = c * h * w;
        Image::new(
            c,
            h,
            w,
            (0..n).map(|i| (i as f64 / n as f64) * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(250, 0.008).unwrap()
    }

    #[test]
    fn q_sample_endpoints_are_exact() {
        let s = sched();
        let x0 = ramp(1, 4, 4);
        let eps = standard_normal(1, 4, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(q_sample_with_alpha_bar(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(q_sample(&x0, 250, &eps, &s).unwrap(), eps);
    }

    #[test]
    fn q_sample_rejects_bad_inputs() {
        let s = sched();
        let x0 = ramp(1, 4, 4);
        assert!(q_sample(&x0, 0, &x0, &s).is_err());
        assert!(q_sample(&x0, 251, &x0, &s).is_err());
        assert!(q_sample(&x0, 5, &ramp(1, 4, 2), &s).is_err());
    }

    #[test]
    fn inversion_round_trip() {
        let s = sched();
        let x0 = ramp(3, 4, 4);
        let eps = standard_normal(3, 4, 4, &mut ChaCha8Rng::seed_from_u64(4));
        for t in [1, 125] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = invert_q_sample(&xt, t, &eps, &s).unwrap();
            let tol = if t == 1 { 1e-6 } else { 1e-5 };
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < tol);
            }
        }
        let xt = q_sample(&x0, 250, &eps, &s).unwrap();
        assert!(matches!(
            invert_q_sample(&xt, 250, &eps, &s),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn concat_condition_appends_mask() {
        let x = ramp(1, 8, 8);
        let mask = Mask::from_fn(8, 8, |y, x| (x + y) % 3 == 0);
        let out = concat_condition(&x, &mask).unwrap();
        assert_eq!(out.dims(), (2, 8, 8));
        assert_eq!(out.channel(1), mask.data());
        assert_eq!(out.channel(0), x.data());
        assert!(concat_condition(&ramp(3, 16, 16), &mask).is_err());
    }

    #[test]
    fn loss_is_zero_for_perfect_predictor_and_one_for_unit_offset() {
        let s = sched();
        let x0 = ramp(1, 4, 4);
        let mask = Mask::from_fn(4, 4, |y, _| y < 2);
        // Values representable in f32 so the stub reproduces them exactly.
        let eps = standard_normal(1, 4, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let eps = Image::new(
            1,
            4,
            4,
            eps.data().iter().map(|&v| v as f32 as f64).collect(),
        )
        .unwrap();
        let mut stub = Stub::new(1);
        stub.answer = Some(eps.clone());
        assert_eq!(training_loss(&stub, &x0, &mask, 17, &eps, &s).unwrap(), 0.0);
        stub.offset = 1.0;
        let loss = training_loss(&stub, &x0, &mask, 17, &eps, &s).unwrap();
        assert!((loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn loss_ignores_mask_when_model_ignores_it() {
        let s = sched();
        let x0 = ramp(1, 4, 4);
        let eps = standard_normal(1, 4, 4, &mut ChaCha8Rng::seed_from_u64(6));
        let stub = Stub::new(1);
        let a = training_loss(&stub, &x0, &Mask::from_fn(4, 4, |_, _| false), 3, &eps, &s).unwrap();
        let b = training_loss(&stub, &x0, &Mask::from_fn(4, 4, |_, _| true), 3, &eps, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_step_with_zero_prediction_rescales() {
        let s = sched();
        let xt = ramp(1, 4, 4);
        let mask = Mask::from_fn(4, 4, |_, _| true);
        let out = p_sample_step(
            &Stub::new(1),
            &xt,
            &mask,
            40,
            &s,
            None,
            ReverseVariance::Posterior,
        )
        .unwrap();
        let k = 1.0 / s.alpha(40).sqrt();
        for (o, x) in out.data().iter().zip(xt.data()) {
            assert_eq!(*o, k * x);
        }
    }

    #[test]
    fn final_step_refuses_noise() {
        let s = sched();
        let xt = ramp(1, 4, 4);
        let mask = Mask::from_fn(4, 4, |_, _| true);
        let z = Image::filled(1, 4, 4, 0.5);
        let stub = Stub::new(1);
        assert!(p_sample_step(
            &stub,
            &xt,
            &mask,
            1,
            &s,
            Some(&z),
            ReverseVariance::Posterior
        )
        .is_err());
        let zero = Image::zeros(1, 4, 4);
        let a = p_sample_step(
            &stub,
            &xt,
            &mask,
            1,
            &s,
            Some(&zero),
            ReverseVariance::Posterior,
        )
        .unwrap();
        let b = p_sample_step(&stub, &xt, &mask, 1, &s, None, ReverseVariance::Posterior).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_step_matches_scalar_loop() {
        let s = sched();
        let xt = ramp(2, 3, 3);
        let mask = Mask::from_fn(3, 3, |y, x| y == x);
        let eps_hat = standard_normal(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(8));
        let eps_hat = Image::new(
            2,
            3,
            3,
            eps_hat.data().iter().map(|&v| v as f32 as f64).collect(),
        )
        .unwrap();
        let z = standard_normal(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let mut stub = Stub::new(2);
        stub.answer = Some(eps_hat.clone());
        for variance in [ReverseVariance::Posterior, ReverseVariance::Beta] {
            let t = 77;
            let got = p_sample_step(&stub, &xt, &mask, t, &s, Some(&z), variance).unwrap();
            // Scalar oracle rebuilt from alpha_bar alone.
            let ab = s.alpha_bars();
            let beta = 1.0 - ab[t] / ab[t - 1];
            let alpha = 1.0 - beta;
            let var = match variance {
                ReverseVariance::Posterior => beta * (1.0 - ab[t - 1]) / (1.0 - ab[t]),
                ReverseVariance::Beta => beta,
            };
            for i in 0..xt.data().len() {
                let want = (xt.data()[i] - beta / (1.0 - ab[t]).sqrt() * eps_hat.data()[i])
                    / alpha.sqrt()
                    + var.sqrt() * z.data()[i];
                assert!((got.data()[i] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clipping_leaves_in_range_estimates_alone() {
        let s = sched();
        let x0 = ramp(1, 4, 4);
        let eps = standard_normal(1, 4, 4, &mut ChaCha8Rng::seed_from_u64(10));
        for t in [1, 60, 200] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let scaled =
                Image::new(1, 4, 4, eps.data().iter().map(|v| v * 0.999).collect()).unwrap();
            let fixed = clip_denoised_eps(&xt, &scaled, t, &s).unwrap();
            let implied = invert_q_sample(&xt, t, &scaled, &s).unwrap();
            for ((f, e), x) in fixed.data().iter().zip(scaled.data()).zip(implied.data()) {
                if x.abs() <= 1.0 {
                    assert_eq!(f, e);
                }
            }
        }
    }

    #[test]
    fn clipped_noise_implies_a_bounded_clean_image() {
        let s = sched();
        let xt = standard_normal(2, 4, 4, &mut ChaCha8Rng::seed_from_u64(11));
        let wild = standard_normal(2, 4, 4, &mut ChaCha8Rng::seed_from_u64(12));
        for t in [1, 30, 150, 249] {
            let fixed = clip_denoised_eps(&xt, &wild, t, &s).unwrap();
            let (a, b) = (s.alpha_bar(t), 1.0 - s.alpha_bar(t));
            for (x, e) in xt.data().iter().zip(fixed.data()) {
                let x0 = (x - b.sqrt() * e) / a.sqrt();
                assert!(x0.abs() <= 1.0 + 1e-9, "t={t} x0={x0}");
            }
        }
        // Pure noise at the last step: the noise is the state itself.
        assert_eq!(clip_denoised_eps(&xt, &wild, 250, &s).unwrap(), xt);
    }

    #[test]
    fn clipped_last_step_removes_the_state() {
        let s = sched();
        let xt = ramp(1, 4, 4);
        let mask = Mask::from_fn(4, 4, |_, _| false);
        let mut stub = Stub::new(1);
        stub.offset = 0.3;
        let opts = ReverseOptions {
            variance: ReverseVariance::Posterior,
            clip_denoised: true,
        };
        let out = p_sample_step(&stub, &xt, &mask, 250, &s, None, opts).unwrap();
        let shrink = (1.0 - s.beta(250)) / s.alpha(250).sqrt();
        for (o, x) in out.data().iter().zip(xt.data()) {
            assert!((o - shrink * x).abs() < 1e-12);
        }
        let plain =
            p_sample_step(&stub, &xt, &mask, 250, &s, None, ReverseVariance::Posterior).unwrap();
        assert!(plain.data()[0].abs() > 5.0);
    }

    #[test]
    fn sampler_calls_model_t_times_and_keeps_mask_intact() {
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let stub = Stub::new(1);
        let mask = Mask::from_fn(4, 4, |y, x| y > x);
        let out = sample(&stub, &mask, &s, 1, ReverseVariance::Posterior).unwrap();
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let seen = stub.seen.borrow();
        assert_eq!(seen.len(), 20);
        for (k, (input, t)) in seen.iter().enumerate() {
            assert_eq!(t, &vec![20 - k]);
            let mask_channel = &input.data()[16..32];
            let want: Vec<f32> = mask.data().iter().map(|&v| v as f32).collect();
            assert_eq!(mask_channel, &want[..]);
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let s = NoiseSchedule::cosine(10, 0.008).unwrap();
        let stub = Stub::new(1);
        let mask = Mask::from_fn(4, 4, |y, _| y < 2);
        let a = sample(&stub, &mask, &s, 42, ReverseVariance::Posterior).unwrap();
        let b = sample(&stub, &mask, &s, 42, ReverseVariance::Posterior).unwrap();
        let c = sample(&stub, &mask, &s, 2, ReverseVariance::Posterior).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batched_chains_match_single_chains() {
        let s = NoiseSchedule::cosine(10, 0.008).unwrap();
        let stub = Stub::new(1);
        let masks = [
            Mask::from_fn(4, 4, |y, _| y < 2),
            Mask::from_fn(4, 4, |_, x| x < 1),
        ];
        let batch = sample_batch(&stub, &masks, &[5, 6], &s, ReverseVariance::Posterior).unwrap();
        assert_eq!(
            batch[1],
            sample(&stub, &masks[1], &s, 6, ReverseVariance::Posterior).unwrap()
        );
    }
}
