//! Per-modality adversarial autoencoder.
//!
//! The encoder maps `T_m×D_m` features to a `T×d` latent code in two steps: a
//! per-timestep projection `D_m→d` followed by the activation, then a learned
//! linear resampling of the time axis `T_m→T`. The decoder mirrors it
//! (time `T→T_m`, then features `d→D_m`). A discriminator `d→4d→1` scores
//! individual latent rows against a standard normal prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ModalShape, Modality};
use crate::optim::Adam;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Floor applied inside every log of the adversarial objectives.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aae {
    pub modality: Modality,
    pub input: ModalShape,
    pub latent: ModalShape,
    pub activation: Activation,
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub enc_time: ParamId,
    pub dec_time: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    pub disc_w1: ParamId,
    pub disc_b1: ParamId,
    pub disc_w2: ParamId,
    pub disc_b2: ParamId,
}

impl Aae {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        modality: Modality,
        input: ModalShape,
        latent: ModalShape,
        activation: Activation,
    ) -> Self {
        let p = |s: &str| format!("aae.{}.{s}", modality.tag());
        let d = latent.d;
        let hidden = 4 * d;
        Aae {
            modality,
            input,
            latent,
            activation,
            enc_w: store.add_xavier(p("enc_w"), input.d, d, rng),
            enc_b: store.add_bias(p("enc_b"), d),
            enc_time: store.add_xavier(p("enc_time"), latent.t, input.t, rng),
            dec_time: store.add_xavier(p("dec_time"), input.t, latent.t, rng),
            dec_w: store.add_xavier(p("dec_w"), d, input.d, rng),
            dec_b: store.add_bias(p("dec_b"), input.d),
            disc_w1: store.add_xavier(p("disc_w1"), d, hidden, rng),
            disc_b1: store.add_bias(p("disc_b1"), hidden),
            disc_w2: store.add_xavier(p("disc_w2"), hidden, 1, rng),
            disc_b2: store.add_bias(p("disc_b2"), 1),
        }
    }

    pub fn encoder_params(&self) -> [ParamId; 3] {
        [self.enc_w, self.enc_b, self.enc_time]
    }

    pub fn decoder_params(&self) -> [ParamId; 3] {
        [self.dec_time, self.dec_w, self.dec_b]
    }

    pub fn discriminator_params(&self) -> [ParamId; 4] {
        [self.disc_w1, self.disc_b1, self.disc_w2, self.disc_b2]
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape != [self.input.t, self.input.d] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: vec![self.input.t, self.input.d],
                rhs: shape.to_vec(),
            });
        }
        let h = tape.matmul(x, p.var(self.enc_w))?;
        let h = tape.add_row(h, p.var(self.enc_b))?;
        let h = self.activation.apply(tape, h)?;
        tape.matmul(p.var(self.enc_time), h)
    }

    pub fn decode(&self, tape: &mut Tape, p: &Bindings, s: Var) -> Result<Var> {
        let shape = tape.shape(s);
        if shape != [self.latent.t, self.latent.d] {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: vec![self.latent.t, self.latent.d],
                rhs: shape.to_vec(),
            });
        }
        let h = tape.matmul(p.var(self.dec_time), s)?;
        let h = tape.matmul(h, p.var(self.dec_w))?;
        tape.add_row(h, p.var(self.dec_b))
    }

    /// Probability that each row of `rows` (n×d) was drawn from the prior, as n×1.
    pub fn discriminate(&self, tape: &mut Tape, p: &Bindings, rows: Var) -> Result<Var> {
        let h = tape.matmul(rows, p.var(self.disc_w1))?;
        let h = tape.add_row(h, p.var(self.disc_b1))?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, p.var(self.disc_w2))?;
        let z = tape.add_row(z, p.var(self.disc_b2))?;
        tape.sigmoid(z)
    }

    /// `−[mean log D(prior) + mean log(1 − D(latent))]`.
    pub fn discriminator_loss(&self, tape: &mut Tape, p: &Bindings, prior: Var, latent: Var) -> Result<Var> {
        let d_prior = self.discriminate(tape, p, prior)?;
        let log_real = tape.log_clamped(d_prior, LOG_FLOOR)?;
        let real = tape.mean(log_real)?;
        let d_fake = self.discriminate(tape, p, latent)?;
        let one_minus = tape.scale(d_fake, -1.0)?;
        let one_minus = tape.add_scalar(one_minus, 1.0)?;
        let log_fake = tape.log_clamped(one_minus, LOG_FLOOR)?;
        let fake = tape.mean(log_fake)?;
        let total = tape.add(real, fake)?;
        tape.scale(total, -1.0)
    }

    /// Non-saturating generator objective `−mean log D(latent)`.
    pub fn encoder_adversarial_loss(&self, tape: &mut Tape, p: &Bindings, latent: Var) -> Result<Var> {
        let d_fake = self.discriminate(tape, p, latent)?;
        let log_fake = tape.log_clamped(d_fake, LOG_FLOOR)?;
        let m = tape.mean(log_fake)?;
        tape.scale(m, -1.0)
    }
}

/// Mean squared reconstruction error.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// `rows×d` i.i.d. standard normal draws.
pub fn sample_prior_with<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, d, data)
}

pub fn sample_prior(t: usize, d: usize, seed: u64) -> Tensor {
    sample_prior_with(t, d, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Optimizers for the three update phases of one autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaeOptimizers {
    pub reconstruction: Adam,
    pub discriminator: Adam,
    pub generator: Adam,
}

impl AaeOptimizers {
    pub fn new(config: crate::optim::AdamConfig) -> Self {
        AaeOptimizers {
            reconstruction: Adam::new(config),
            discriminator: Adam::new(config),
            generator: Adam::new(config),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AaeLosses {
    pub reconstruction: f64,
    pub discriminator: f64,
    pub generator: f64,
}

fn encode_batch(aae: &Aae, tape: &mut Tape, p: &Bindings, xs: &[&Tensor]) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut inputs = Vec::with_capacity(xs.len());
    let mut latents = Vec::with_capacity(xs.len());
    for x in xs {
        let xv = tape.constant((*x).clone())?;
        latents.push(aae.encode(tape, p, xv)?);
        inputs.push(xv);
    }
    Ok((inputs, latents))
}

/// Phase 1: update encoder and decoder on the mean reconstruction loss.
pub fn reconstruction_phase(aae: &Aae, store: &mut ParamStore, opt: &mut Adam, xs: &[&Tensor]) -> Result<f64> {
    let trainable: Vec<ParamId> = aae.encoder_params().into_iter().chain(aae.decoder_params()).collect();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |id| trainable.contains(&id))?;
    let (inputs, latents) = encode_batch(aae, &mut tape, &p, xs)?;
    let mut losses = Vec::with_capacity(xs.len());
    for (&x, &s) in inputs.iter().zip(&latents) {
        let x_hat = aae.decode(&mut tape, &p, s)?;
        losses.push(reconstruction_loss(&mut tape, x, x_hat)?);
    }
    let stacked = tape.concat_rows(&losses)?;
    let loss = tape.mean(stacked)?;
    let grads = tape.backward(loss)?;
    opt.step(store, &p.collect(&grads))?;
    Ok(tape.value(loss).item())
}

/// Phase 2: update the discriminator with the encoder frozen.
pub fn discriminator_phase<R: Rng + ?Sized>(
    aae: &Aae,
    store: &mut ParamStore,
    opt: &mut Adam,
    xs: &[&Tensor],
    rng: &mut R,
) -> Result<f64> {
    let trainable = aae.discriminator_params();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |id| trainable.contains(&id))?;
    let (_, latents) = encode_batch(aae, &mut tape, &p, xs)?;
    let latent = tape.concat_rows(&latents)?;
    let rows = tape.shape(latent)[0];
    let prior = tape.constant(sample_prior_with(rows, aae.latent.d, rng))?;
    let loss = aae.discriminator_loss(&mut tape, &p, prior, latent)?;
    let grads = tape.backward(loss)?;
    opt.step(store, &p.collect(&grads))?;
    Ok(tape.value(loss).item())
}

/// Phase 3: update the encoder against the frozen discriminator.
pub fn generator_phase(aae: &Aae, store: &mut ParamStore, opt: &mut Adam, xs: &[&Tensor]) -> Result<f64> {
    let trainable = aae.encoder_params();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |id| trainable.contains(&id))?;
    let (_, latents) = encode_batch(aae, &mut tape, &p, xs)?;
    let latent = tape.concat_rows(&latents)?;
    let loss = aae.encoder_adversarial_loss(&mut tape, &p, latent)?;
    let grads = tape.backward(loss)?;
    opt.step(store, &p.collect(&grads))?;
    Ok(tape.value(loss).item())
}

/// Reconstruction update, then discriminator update, then encoder update.
pub fn aae_step<R: Rng + ?Sized>(
    aae: &Aae,
    store: &mut ParamStore,
    opts: &mut AaeOptimizers,
    xs: &[&Tensor],
    rng: &mut R,
) -> Result<AaeLosses> {
    let reconstruction = reconstruction_phase(aae, store, &mut opts.reconstruction, xs)?;
    let discriminator = discriminator_phase(aae, store, &mut opts.discriminator, xs, rng)?;
    let generator = generator_phase(aae, store, &mut opts.generator, xs)?;
    Ok(AaeLosses {
        reconstruction,
        discriminator,
        generator,
    })
}
