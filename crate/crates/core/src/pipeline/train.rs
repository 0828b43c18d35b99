//! Generator pretraining and the alternating swap-training loop.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::Config;
use super::data::{sample_batch, Dataset};
use super::models::{Models, SwapBatch};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::latent::split_code;
use crate::losses::{
    adversarial_generator_loss, discriminator_loss, gradient_penalty_estimate, identity_loss,
    landmark_alignment_loss, mse, reconstruction_loss, style_transfer_loss, LossBundle, LossTerms, LossWeights,
};
use crate::metrics::psnr;
use crate::perception::{ProviderContext, ProviderRegistry, ProviderSet};

/// Networks, optimizers and sampling state of a training run.
pub struct TrainState {
    pub config: Config,
    pub models: Models,
    pub providers: ProviderSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    pub pretrain_iterations: u64,
    pub rng: ChaCha8Rng,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("iteration", &self.iteration)
            .field("pretrain_iterations", &self.pretrain_iterations)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub iteration: u64,
    pub losses: LossBundle,
    pub discriminator: f64,
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl TrainState {
    pub fn new(config: Config) -> Result<Self> {
        Self::with_registry(config, &ProviderRegistry::with_defaults())
    }

    pub fn with_registry(config: Config, registry: &ProviderRegistry) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let models = Models::new(&config.model, seed, DType::F32, &Device::Cpu)?;
        models.apply_training_freeze(&config.train);
        let providers = registry.build(
            &config.providers,
            &ProviderContext {
                seed,
                num_landmarks: config.model.num_landmarks,
            },
        )?;
        let t = &config.train;
        let opt_g = Adam::new(models.generator_side_vars(t), t.learning_rate, t.beta1, t.beta2, t.epsilon)?;
        let opt_d = Adam::new(models.discriminator_vars(), t.learning_rate, t.beta1, t.beta2, t.epsilon)?;
        Ok(Self {
            models,
            providers,
            opt_g,
            opt_d,
            iteration: 0,
            pretrain_iterations: 0,
            rng: rng_for(seed),
            config,
        })
    }

    fn effective_weights(&self) -> LossWeights {
        let mut w = self.config.train.weights;
        if self.config.model.disable_appearance_swap {
            w.st = 0.0;
        }
        w
    }
}

/// One discriminator update followed by one generator-side update.
///
/// Loss terms whose weight is zero are not evaluated and report 0.
pub fn train_step(state: &mut TrainState, batch: &SwapBatch) -> Result<StepReport> {
    let train = state.config.train.clone();
    let weights = state.effective_weights();
    let models = &state.models;
    let disc = &models.discriminator;
    let fwd = models.swap_forward(batch)?;
    let (y_s, y_f) = (&fwd.rendered.y_s, &fwd.rendered.y_f);

    disc.store().set_frozen(false);
    let fake = disc.discriminate(&y_f.detach())?;
    let real = disc.discriminate(&batch.x_t)?;
    let mut d_loss = discriminator_loss(&fake, &real)?;
    if train.r1_gamma > 0.0 {
        let penalty = gradient_penalty_estimate(|x| disc.logits(x), &batch.x_t, 1e-2, state.rng.gen())?;
        d_loss = (d_loss + penalty.affine(0.5 * train.r1_gamma, 0.0)?)?;
    }
    let d_value = scalar(&d_loss)?;
    if !d_value.is_finite() {
        return Err(Error::PoisonedLoss { component: "discriminator" });
    }
    state.opt_d.step(&d_loss.backward()?)?;

    disc.store().set_frozen(true);
    let zero = || Tensor::zeros((), y_f.dtype(), y_f.device());
    let p = &state.providers;
    let terms = LossTerms {
        adv: if weights.adv > 0.0 {
            adversarial_generator_loss(&disc.discriminate(y_f)?)?
        } else {
            zero()?
        },
        id: if weights.id > 0.0 {
            identity_loss(y_f, &batch.x_s, p.identity.as_ref())?
        } else {
            zero()?
        },
        lmk: if weights.lmk > 0.0 {
            landmark_alignment_loss(y_s, y_f, &batch.x_t, p.landmarks.as_ref())?
        } else {
            zero()?
        },
        rec: if weights.rec > 0.0 {
            reconstruction_loss(y_s, y_f, &batch.x_t, &batch.same, train.alpha, p.perceptual.as_ref())?
        } else {
            zero()?
        },
        st: if weights.st > 0.0 {
            style_transfer_loss(y_f, &batch.x_t, &batch.masks, train.hm_scope)?
        } else {
            zero()?
        },
    };
    let result = terms.combine(&weights);
    disc.store().set_frozen(false);
    let (total, bundle) = result?;
    if !bundle.total.is_finite() {
        return Err(Error::PoisonedLoss { component: "total" });
    }
    state.opt_g.step(&total.backward()?)?;
    state.iteration += 1;
    Ok(StepReport {
        iteration: state.iteration,
        losses: bundle,
        discriminator: d_value,
    })
}

/// Samples a batch with the state's own RNG and runs [`train_step`].
pub fn train_iteration(state: &mut TrainState, dataset: &Dataset) -> Result<StepReport> {
    let batch = sample_batch(dataset, state.config.train.p_same, state.config.train.batch_size, &mut state.rng)?;
    train_step(state, &batch)
}

/// Reconstruction-only phase that fits the generator, inverter, target
/// encoder and decoder as an autoencoder of the self-swap, so that swap
/// training starts from a usable frozen generator and a working blend path.
/// Returns the loss per iteration.
pub fn pretrain_generator(state: &mut TrainState, dataset: &Dataset, iterations: usize) -> Result<Vec<f64>> {
    let t = state.config.train.clone();
    let models = &state.models;
    let [inv, latent] = models.inverter.stores();
    let stores = [models.generator.store(), inv, latent, models.target_encoder.store(), models.decoder.store()];
    for s in stores {
        s.set_frozen(false);
    }
    let vars = stores
        .into_iter()
        .flat_map(|s| s.vars().iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect();
    let mut opt = Adam::new(vars, t.pretrain_learning_rate, t.beta1, t.beta2, t.epsilon)?;
    let mut history = Vec::with_capacity(iterations);
    let outcome = (|| -> Result<()> {
        let p = state.providers.perceptual.as_ref();
        for _ in 0..iterations {
            let batch = sample_batch(dataset, 1.0, t.batch_size, &mut state.rng)?;
            let code = models.inverter.invert(&batch.x_t)?;
            let (g, h) = split_code(&code)?;
            let out = models.render(&g, &h, &batch.x_t, &batch.masks)?;
            let f_t = if t.alpha > 0.0 { Some(p.features(&batch.x_t)?) } else { None };
            let term = |y: &Tensor| -> Result<Tensor> {
                let pix = mse(y, &batch.x_t)?;
                Ok(match &f_t {
                    Some(f_t) => (pix + mse(&p.features(y)?, f_t)?.affine(t.alpha, 0.0)?)?,
                    None => pix,
                })
            };
            let loss = (term(&out.y_s)? + term(&out.y_f)?)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::PoisonedLoss { component: "pretrain" });
            }
            opt.step(&loss.backward()?)?;
            history.push(value);
            state.pretrain_iterations += 1;
        }
        Ok(())
    })();
    models.apply_training_freeze(&t);
    outcome.map(|_| history)
}

/// PSNR of the final output against the target on a self-swap of each sample.
pub fn self_reconstruction_psnr(models: &Models, dataset: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in &dataset.samples {
        let batch = SwapBatch {
            x_s: s.image.tensor().unsqueeze(0)?,
            x_t: s.image.tensor().unsqueeze(0)?,
            masks: vec![s.mask.clone()],
            l_s: vec![s.landmarks.clone()],
            l_t: vec![s.landmarks.clone()],
            same: vec![true],
        };
        let out = models.swap_forward(&batch)?;
        let y = out.rendered.y_f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        total += psnr(&y, &s.image.to_vec()?)?;
    }
    Ok(total / dataset.len() as f64)
}

/// Checks that the swap code's appearance rows are the target's inverted
/// appearance rows, bit for bit.
pub fn appearance_block_preserved(models: &Models, batch: &SwapBatch) -> Result<bool> {
    let fwd = models.swap_forward(batch)?;
    let (_, used) = split_code(&fwd.rendered.swap_code)?;
    let source = if models.config().disable_appearance_swap { &batch.x_s } else { &batch.x_t };
    let (_, h) = split_code(&models.inverter.invert(source)?)?;
    let a = used.tensor().flatten_all()?.to_vec1::<f32>()?;
    let b = h.tensor().flatten_all()?.to_vec1::<f32>()?;
    Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::toy_dataset;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.model.resolution = 32;
        c.model.heatmap_grid = 16;
        c.train.batch_size = 2;
        c.train.learning_rate = 1e-3;
        c
    }

    fn snapshot(state: &TrainState) -> Vec<(String, Vec<f32>)> {
        state
            .models
            .all_vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect()
    }

    #[test]
    fn one_step_updates_and_reports_consistently() {
        let ds = toy_dataset(3, 32, 1).unwrap();
        let mut state = TrainState::new(small_config()).unwrap();
        let before = snapshot(&state);
        let report = train_iteration(&mut state, &ds).unwrap();
        assert_eq!(report.iteration, 1);
        let after = snapshot(&state);
        let changed: Vec<&String> = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| &a.0)
            .collect();
        assert!(changed.iter().any(|n| n.starts_with("dec/")));
        assert!(changed.iter().any(|n| n.starts_with("disc/")));
        assert!(!changed.iter().any(|n| n.starts_with("gen/")), "generator is frozen by default");
        let l = report.losses;
        let w = state.config.train.weights;
        let recomputed = w.adv * l.adv + w.id * l.id + w.lmk * l.lmk + w.rec * l.rec + w.st * l.st;
        assert!((l.total - recomputed).abs() <= 1e-9 * recomputed.abs());
        for v in [l.adv, l.id, l.lmk, l.rec, l.st, report.discriminator] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn zero_weights_leave_generator_side_unchanged() {
        let ds = toy_dataset(3, 32, 1).unwrap();
        let mut cfg = small_config();
        cfg.train.weights = LossWeights { adv: 0.0, id: 0.0, lmk: 0.0, rec: 0.0, st: 0.0 };
        let mut state = TrainState::new(cfg).unwrap();
        let before = snapshot(&state);
        train_iteration(&mut state, &ds).unwrap();
        let after = snapshot(&state);
        for (a, b) in before.iter().zip(&after) {
            if !a.0.starts_with("disc/") {
                assert_eq!(a.1, b.1, "{} changed", a.0);
            }
        }
    }

    #[test]
    fn appearance_invariant_survives_training() {
        let ds = toy_dataset(3, 32, 2).unwrap();
        let mut state = TrainState::new(small_config()).unwrap();
        for _ in 0..2 {
            train_iteration(&mut state, &ds).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let batch = sample_batch(&ds, 0.0, 2, &mut rng).unwrap();
            assert!(appearance_block_preserved(&state.models, &batch).unwrap());
        }
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let ds = toy_dataset(2, 32, 3).unwrap();
        let mut cfg = small_config();
        cfg.train.alpha = 0.0;
        let mut state = TrainState::new(cfg).unwrap();
        let h = pretrain_generator(&mut state, &ds, 30).unwrap();
        assert_eq!(h.len(), 30);
        let head: f64 = h[..5].iter().sum();
        let tail: f64 = h[25..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(state.models.generator.store().is_frozen());
    }
}
