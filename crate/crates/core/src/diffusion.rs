//! DDPM machinery: the noise schedule, forward noising, the noise-prediction
//! training objective, and the ancestral reverse sampler shared by the dense,
//! pruned, and amplified prediction paths.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};
use crate::tape::{GradMap, Tape};
use crate::tensor::Tensor;
use crate::unet::{forward_taped, ParameterStore, ResolvedModel};

/// Timestep-indexed β and cumulative ᾱ values. Timesteps are 1-based.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas. ᾱ is computed once and cached.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(Error::invalid("betas must satisfy 0 < beta < 1"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0f64;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

/// Linear β interpolation from beta_start to beta_end over T steps.
pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::invalid("schedule needs T >= 2"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta = (0..t_count)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "q_sample: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    let c0 = ab.sqrt() as f32;
    let ce = (1.0 - ab).sqrt() as f32;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| c0 * a + ce * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One ancestral update: x_{t−1} = (x_t − (β_t/√(1−ᾱ_t))·ε̂)/√α_t + √β_t·noise.
/// The caller passes zero noise at t = 1.
pub fn ddpm_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if x_t.shape() != eps_hat.shape() || x_t.shape() != noise.shape() {
        return Err(Error::shape("ddpm_step operands must share a shape".to_string()));
    }
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv_sqrt_alpha = (1.0 / (1.0 - beta).sqrt()) as f32;
    let eps_coeff = (beta / (1.0 - ab).sqrt()) as f32;
    let sigma = beta.sqrt() as f32;
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| inv_sqrt_alpha * (x - eps_coeff * e) + sigma * z)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        Ok(())
    }
}

fn randn_like(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z as f32
    })
}

/// Draws (x_t, t, ε) for one training example.
pub fn draw_training_example(
    sample: &Sample,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, usize, Tensor)> {
    let (c, h, w) = sample.image.dims3()?;
    let x0 = sample.image.reshaped(&[1, c, h, w])?;
    let t = rng.gen_range(1..=sched.steps());
    let eps = randn_like(&[1, c, h, w], rng);
    let x_t = q_sample(&x0, t, &eps, sched)?;
    Ok((x_t, t, eps))
}

pub struct BatchLoss {
    pub value: f64,
    pub grads: GradMap,
}

/// Mean noise-prediction MSE over the batch with per-sample gradient tapes
/// (run concurrently, reduced in batch order). Deterministic given the seed.
pub fn loss(
    store: &ParameterStore,
    batch: &[&Sample],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    let per_sample: Vec<Result<(f64, GradMap)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = substream(seed, "loss", i as u64);
            let (x_t, t, eps) = draw_training_example(sample, sched, &mut rng)?;
            let mut tape = Tape::new();
            let out = forward_taped(
                &mut tape,
                store,
                &x_t,
                &[t],
                &[sample.class.index()],
                None,
            )?;
            let loss_id = tape.mse_loss(out, &eps)?;
            let value = f64::from(tape.value(loss_id).data()[0]);
            let grads = tape.backward(loss_id)?;
            Ok((value, grads))
        })
        .collect();

    let scale = 1.0 / batch.len() as f32;
    let mut value = 0.0f64;
    let mut grads = GradMap::new();
    for res in per_sample {
        let (v, g) = res?;
        value += v;
        for (name, tensor) in g {
            let scaled = tensor.scale(scale);
            match grads.get_mut(&name) {
                Some(acc) => *acc = acc.add(&scaled)?,
                None => {
                    grads.insert(name, scaled);
                }
            }
        }
    }
    Ok(BatchLoss {
        value: value / batch.len() as f64,
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
}

/// Runs SGD from `store.epochs_done` up to `cfg.epochs`. All shuffling and
/// noise derive from (seed, epoch/step) substreams, so a run resumed from a
/// checkpoint reproduces the uninterrupted run bit for bit.
pub fn train(
    store: &mut ParameterStore,
    dataset: &[Sample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch);
    let mut curve = Vec::new();
    for epoch in store.epochs_done..cfg.epochs {
        let mut perm: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = substream(cfg.seed, "shuffle", epoch as u64);
        perm.shuffle(&mut rng);
        for (bi, chunk) in perm.chunks(cfg.batch).enumerate() {
            let global_step = epoch * steps_per_epoch + bi;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let bl = loss(
                store,
                &batch,
                sched,
                derive_seed(cfg.seed, "noise", global_step as u64),
            )?;
            store.sgd_update(&bl.grads, cfg.lr)?;
            curve.push(CurvePoint {
                epoch,
                step: global_step,
                loss: bl.value,
            });
        }
        store.epochs_done = epoch + 1;
    }
    Ok(TrainReport { curve })
}

/// The seam where dense, pruned, or amplified prediction is injected into the
/// sampler. `chain` identifies the image being generated.
pub trait NoisePredictor: Sync {
    fn predict(&self, chain: usize, x: &Tensor, t: usize, class: usize) -> Result<Tensor>;
}

/// Predicts with a single resolved model (dense, or pruned when the model was
/// resolved with a mask).
pub struct ModelPredictor<'a> {
    pub model: &'a ResolvedModel<f32>,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, _chain: usize, x: &Tensor, t: usize, class: usize) -> Result<Tensor> {
        self.model.forward(x, &[t], &[class])
    }
}

/// Always predicts zero noise; test hook.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, _chain: usize, x: &Tensor, _t: usize, _class: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// Runs one full reverse chain from seeded Gaussian noise.
pub fn sample_chain(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    chain: usize,
    class: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let shape = [1usize, 1, h, w];
    let mut x = randn_like(&shape, rng);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predictor.predict(chain, &x, t, class)?;
        let noise = if t > 1 {
            randn_like(&shape, rng)
        } else {
            Tensor::zeros(&shape)
        };
        x = ddpm_step(&x, &eps_hat, t, sched, &noise)?;
        x.ensure_finite("sampler state")?;
    }
    Ok(x)
}

/// Generates `classes.len()` images, one independent chain per image. Chains
/// run concurrently; outputs depend only on (seed, chain index).
pub fn sample(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    classes: &[usize],
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &class)| {
            let mut rng = substream(seed, "chain", i as u64);
            sample_chain(predictor, sched, i, class, h, w, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_dataset, PatternClass};
    use crate::unet::build;

    #[test]
    fn linear_schedule_cumulative_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-12);
        assert!((s.alpha_bar(1).unwrap() - (1.0 - s.beta(1).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_degenerate_betas() {
        assert!(make_schedule(2, 0.0, 0.2).is_err());
        assert!(make_schedule(2, 0.3, 0.2).is_err());
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        for t in 2..=s.steps() {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn q_sample_limits_and_value() {
        let x0 = Tensor::filled(&[1, 1, 2, 2], 2.0);
        let eps = Tensor::filled(&[1, 1, 2, 2], 1.0);

        // Nearly noiseless limit: tiny beta keeps x_t close to x0.
        let s = NoiseSchedule::from_betas(vec![1e-9]).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        assert!((xt.data()[0] - 2.0).abs() < 1e-3);

        // Near-pure-noise limit.
        let s = NoiseSchedule::from_betas(vec![1.0 - 1e-12]).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        assert!((xt.data()[0] - 1.0).abs() < 1e-3);

        // Derived: alpha_bar = 0.25 -> 0.5*2 + sqrt(0.75)*1.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        assert!((f64::from(xt.data()[0]) - 1.866025).abs() < 1e-5);

        let bad = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(q_sample(&x0, 1, &bad, &s).is_err());
    }

    #[test]
    fn q_sample_marginal_variance() {
        // Var(x_t) = alpha_bar * Var(x0) + (1 - alpha_bar) over joint draws.
        let s = NoiseSchedule::from_betas(vec![0.4]).unwrap();
        let ab = s.alpha_bar(1).unwrap();
        let var_x0 = 2.25f64;
        let n = 10_000usize;
        let mut rng = substream(7, "marginal", 0);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let x0 = Tensor::filled(&[1], (z0 * var_x0.sqrt()) as f32);
            let e: f64 = rng.sample(StandardNormal);
            let eps = Tensor::filled(&[1], e as f32);
            values.push(f64::from(q_sample(&x0, 1, &eps, &s).unwrap().data()[0]));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let expect = ab * var_x0 + (1.0 - ab);
        assert!(
            (var - expect).abs() / expect < 0.05,
            "empirical {var} vs expected {expect}"
        );
    }

    #[test]
    fn ddpm_step_examples() {
        // eps_hat = 0, noise = 0 -> x / sqrt(alpha).
        let s = NoiseSchedule::from_betas(vec![0.1]).unwrap();
        let x = Tensor::filled(&[1], 1.0);
        let z = Tensor::zeros(&[1]);
        let y = ddpm_step(&x, &z, 1, &s, &z).unwrap();
        assert!((f64::from(y.data()[0]) - 1.0 / 0.9f64.sqrt()).abs() < 1e-6);

        // Derived: beta=0.1, alpha_bar=0.72 at t=2 via betas (0.2, 0.1).
        // Closed form (1/sqrt(0.9))*(1 - 0.1/sqrt(0.28)) = 0.8548878.
        let s = NoiseSchedule::from_betas(vec![0.2, 0.1]).unwrap();
        let e = Tensor::filled(&[1], 1.0);
        let y = ddpm_step(&x, &e, 2, &s, &z).unwrap();
        let closed = (1.0 / 0.9f64.sqrt()) * (1.0 - 0.1 / 0.28f64.sqrt());
        assert!((f64::from(y.data()[0]) - closed).abs() < 1e-6);

        assert!(ddpm_step(&x, &e, 3, &s, &z).is_err());
    }

    #[test]
    fn noise_free_chain_matches_closed_form() {
        let s = make_schedule(20, 1e-3, 0.05).unwrap();
        let mut x = Tensor::filled(&[1], 0.7);
        let zero = Tensor::zeros(&[1]);
        for t in (1..=20).rev() {
            x = ddpm_step(&x, &zero, t, &s, &zero).unwrap();
        }
        let expect = 0.7 / s.alpha_bar(20).unwrap().sqrt();
        assert!((f64::from(x.data()[0]) - expect).abs() / expect < 1e-4);
    }

    #[test]
    fn zero_init_model_loss_is_mean_eps_square() {
        let store = build(16, 11, 16, 16).unwrap();
        let data = make_dataset(&PatternClass::all_standard(), 2, 16, 16, 5, 0.25).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let bl = loss(&store, &batch, &sched, 33).unwrap();
        assert!(
            (bl.value - 1.0).abs() < 0.15,
            "zero-init loss {} should be near 1",
            bl.value
        );
        // Determinism: same seed, same scalar.
        let bl2 = loss(&store, &batch, &sched, 33).unwrap();
        assert_eq!(bl.value, bl2.value);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        // With eps_hat == eps the objective collapses to zero; checked on the
        // loss assembly pieces directly.
        let class = PatternClass::all_standard()[0];
        let sample = crate::datagen::render(&class, 3, 16, 16, 0.25).unwrap();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = substream(1, "oracle", 0);
        let (_, _, eps) = draw_training_example(&sample, &sched, &mut rng).unwrap();
        let mut tape = Tape::new();
        let pred = tape.leaf(eps.clone(), None).unwrap();
        let l = tape.mse_loss(pred, &eps).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn lr_zero_training_keeps_parameters() {
        let mut store = build(16, 12, 16, 16).unwrap();
        let before = crate::unet::checkpoint_to_bytes(&store).unwrap();
        let data = make_dataset(&PatternClass::all_standard(), 1, 16, 16, 6, 0.25).unwrap();
        let sched = make_schedule(20, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 2,
            lr: 0.0,
            seed: 9,
        };
        train(&mut store, &data, &sched, &cfg).unwrap();
        let mut after = crate::unet::checkpoint_from_bytes(&before).unwrap();
        after.epochs_done = store.epochs_done;
        assert_eq!(
            crate::unet::checkpoint_to_bytes(&after).unwrap(),
            crate::unet::checkpoint_to_bytes(&store).unwrap()
        );
    }

    #[test]
    fn tiny_overfit_halves_the_loss() {
        let mut store = build(16, 13, 16, 16).unwrap();
        let class = PatternClass::all_standard()[2];
        let sample = crate::datagen::render(&class, 8, 16, 16, 0.25).unwrap();
        let data = vec![sample];
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        // Probe with 32 (t, eps) draws of the same sample so the loss
        // estimate is stable; common seed before and after training.
        let probe: Vec<&Sample> = std::iter::repeat(&data[0]).take(32).collect();
        let initial = loss(&store, &probe, &sched, 123).unwrap().value;
        let cfg = TrainConfig {
            epochs: 40,
            batch: 1,
            lr: 0.05,
            seed: 14,
        };
        train(&mut store, &data, &sched, &cfg).unwrap();
        let trained = loss(&store, &probe, &sched, 123).unwrap().value;
        assert!(
            trained < 0.5 * initial,
            "loss {initial} -> {trained}, expected < half"
        );
    }

    #[test]
    fn resumed_training_bit_matches_uninterrupted() {
        let sched = make_schedule(20, 1e-4, 0.02).unwrap();
        let data = make_dataset(&PatternClass::all_standard(), 2, 16, 16, 44, 0.25).unwrap();
        let mk_cfg = |epochs| TrainConfig {
            epochs,
            batch: 4,
            lr: 0.05,
            seed: 77,
        };
        let mut full = build(16, 15, 16, 16).unwrap();
        train(&mut full, &data, &sched, &mk_cfg(6)).unwrap();

        let mut half = build(16, 15, 16, 16).unwrap();
        train(&mut half, &data, &sched, &mk_cfg(3)).unwrap();
        let bytes = crate::unet::checkpoint_to_bytes(&half).unwrap();
        let mut resumed = crate::unet::checkpoint_from_bytes(&bytes).unwrap();
        train(&mut resumed, &data, &sched, &mk_cfg(6)).unwrap();

        assert_eq!(
            crate::unet::checkpoint_to_bytes(&full).unwrap(),
            crate::unet::checkpoint_to_bytes(&resumed).unwrap()
        );
    }

    #[test]
    fn sampler_is_deterministic_and_respects_n() {
        let sched = make_schedule(10, 1e-3, 0.05).unwrap();
        let a = sample(&ZeroPredictor, &sched, &[0, 1, 2], 8, 8, 42).unwrap();
        let b = sample(&ZeroPredictor, &sched, &[0, 1, 2], 8, 8, 42).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
        let empty = sample(&ZeroPredictor, &sched, &[], 8, 8, 42).unwrap();
        assert!(empty.is_empty());
    }
}
