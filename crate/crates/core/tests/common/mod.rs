#![allow(dead_code)]

use mcihn::aae::{aae_step, sample_prior_with, Aae, AaeOptimizers, Activation};
use mcihn::data::{make_batches, ModalShape, Modality};
use mcihn::optim::{Adam, AdamConfig};
use mcihn::params::ParamStore;
use mcihn::tape::Tape;
use mcihn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

pub struct ProbeSetup {
    pub input: ModalShape,
    pub latent: ModalShape,
    pub inputs: usize,
    pub batch: usize,
    pub aae_steps: usize,
    pub probe_steps: usize,
}

fn encode_all(aae: &Aae, store: &ParamStore, xs: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape).unwrap();
    let latents: Vec<_> = xs
        .iter()
        .map(|x| {
            let v = tape.constant(x.clone()).unwrap();
            aae.encode(&mut tape, &p, v).unwrap()
        })
        .collect();
    let all = tape.concat_rows(&latents).unwrap();
    tape.value(all).clone()
}

/// Trains an AAE on standard-normal inputs, then trains a fresh
/// discriminator to separate prior draws from latent rows and returns its
/// accuracy on held-out inputs against fresh prior draws.
pub fn adversarial_probe_accuracy(setup: &ProbeSetup, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shape, latent) = (setup.input, setup.latent);
    let train: Vec<Tensor> = (0..setup.inputs)
        .map(|_| normal_matrix(&mut rng, shape.t, shape.d))
        .collect();
    let held: Vec<Tensor> = (0..setup.inputs)
        .map(|_| normal_matrix(&mut rng, shape.t, shape.d))
        .collect();

    let mut store = ParamStore::new();
    let aae = Aae::new(&mut store, &mut rng, Modality::Text, shape, latent, Activation::Relu);
    let mut opts = AaeOptimizers::new(AdamConfig::default());
    let per_epoch = setup.inputs.div_ceil(setup.batch);
    let mut batches = Vec::new();
    for step in 0..setup.aae_steps {
        if step % per_epoch == 0 {
            batches = make_batches(setup.inputs, setup.batch, (step / per_epoch) as u64, true).unwrap();
        }
        let xs: Vec<&Tensor> = batches[step % per_epoch].iter().map(|&i| &train[i]).collect();
        aae_step(&aae, &mut store, &mut opts, &xs, &mut rng).unwrap();
    }
    let fit_rows = encode_all(&aae, &store, &train);
    let held_rows = encode_all(&aae, &store, &held);

    let mut probe_store = ParamStore::new();
    let probe = Aae::new(
        &mut probe_store,
        &mut rng,
        Modality::Text,
        shape,
        latent,
        Activation::Relu,
    );
    let disc = probe.discriminator_params();
    let mut opt = Adam::new(AdamConfig::default());
    let n = fit_rows.rows();
    let draw = 256;
    for _ in 0..setup.probe_steps {
        let picked: Vec<f64> = (0..draw)
            .flat_map(|_| fit_rows.row(rng.random_range(0..n)).to_vec())
            .collect();
        let mut tape = Tape::new();
        let p = probe_store.bind(&mut tape, |id| disc.contains(&id)).unwrap();
        let prior = tape.constant(sample_prior_with(draw, latent.d, &mut rng)).unwrap();
        let rows = tape.constant(Tensor::matrix(draw, latent.d, picked)).unwrap();
        let loss = probe.discriminator_loss(&mut tape, &p, prior, rows).unwrap();
        let g = tape.backward(loss).unwrap();
        opt.step(&mut probe_store, &p.collect(&g)).unwrap();
    }

    let mut tape = Tape::new();
    let p = probe_store.bind_frozen(&mut tape).unwrap();
    let m = held_rows.rows();
    let prior = tape.constant(sample_prior_with(m, latent.d, &mut rng)).unwrap();
    let rows = tape.constant(held_rows).unwrap();
    let on_prior = probe.discriminate(&mut tape, &p, prior).unwrap();
    let on_latent = probe.discriminate(&mut tape, &p, rows).unwrap();
    let correct = tape.value(on_prior).data().iter().filter(|&&v| v > 0.5).count()
        + tape.value(on_latent).data().iter().filter(|&&v| v <= 0.5).count();
    correct as f64 / (2 * m) as f64
}
