//! The assembled network: three adversarial encoders, the cross-modal gate
//! block and the fusion head, plus the ablation switches.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aae::{Aae, Activation};
use crate::cgmm::{adaptation_loss, AdaptationSite, Cgmm, MmdKernel, Pair};
use crate::data::{ModalSample, ModalShape, Modality, DESK_SHAPES, FULL_SHAPES};
use crate::ffm::{combined_loss, fuse_predict, mae_loss, Ffm};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    /// Visual and text only.
    NoAudio,
    /// Visual and audio only.
    NoText,
    /// Text and audio only.
    NoVisual,
    /// Adversarial training skipped; encoders act as plain projections.
    NoAae,
    /// Gate block skipped; latents feed the fusion module directly.
    NoCgmm,
}

impl Ablation {
    /// Row order of the ablation table.
    pub const TABLE: [Ablation; 6] = [
        Ablation::NoAudio,
        Ablation::NoText,
        Ablation::NoVisual,
        Ablation::NoAae,
        Ablation::NoCgmm,
        Ablation::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAudio => "-VT",
            Ablation::NoText => "-VA",
            Ablation::NoVisual => "-TA",
            Ablation::NoAae => "mcihn-1",
            Ablation::NoCgmm => "mcihn-2",
        }
    }

    /// Display name used in result tables.
    pub fn row_name(self) -> &'static str {
        match self {
            Ablation::Full => "MCIHN",
            Ablation::NoAae => "MCIHN-1",
            Ablation::NoCgmm => "MCIHN-2",
            other => other.tag(),
        }
    }

    pub fn active(self) -> &'static [Modality] {
        use Modality::*;
        match self {
            Ablation::NoAudio => &[Visual, Text],
            Ablation::NoText => &[Visual, Audio],
            Ablation::NoVisual => &[Text, Audio],
            _ => &[Visual, Text, Audio],
        }
    }

    pub fn uses_aae(self) -> bool {
        self != Ablation::NoAae
    }

    pub fn uses_cgmm(self) -> bool {
        self != Ablation::NoCgmm
    }

    pub fn is_bimodal(self) -> bool {
        self.active().len() == 2
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "mcihn" => Ok(Ablation::Full),
            "-vt" => Ok(Ablation::NoAudio),
            "-va" => Ok(Ablation::NoText),
            "-ta" => Ok(Ablation::NoVisual),
            "mcihn-1" => Ok(Ablation::NoAae),
            "mcihn-2" => Ok(Ablation::NoCgmm),
            _ => Err(TensorError::Invalid(format!("unknown ablation tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub shapes: [ModalShape; 3],
    /// Latent length T and width d shared by every modality.
    pub latent: ModalShape,
    pub heads: usize,
    pub activation: Activation,
    pub shared_interaction: bool,
    pub adaptation_sites: Vec<AdaptationSite>,
    pub kernel: MmdKernel,
    /// Number of classes of the auxiliary softmax head, if enabled.
    pub class_head: Option<usize>,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            shapes: DESK_SHAPES,
            latent: ModalShape { t: 8, d: 16 },
            heads: 4,
            activation: Activation::Relu,
            shared_interaction: true,
            adaptation_sites: vec![AdaptationSite::Latent],
            kernel: MmdKernel::Linear,
            class_head: None,
        }
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            shapes: FULL_SHAPES,
            latent: ModalShape { t: 32, d: 256 },
            heads: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ModalShape { t, d } = self.latent;
        if t == 0 || d == 0 || self.shapes.iter().any(|s| s.t == 0 || s.d == 0) {
            return Err(TensorError::Invalid("zero-sized shape".into()));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "{} heads do not divide d = {d}",
                self.heads
            )));
        }
        if self.class_head == Some(0) {
            return Err(TensorError::Invalid("class head needs at least one class".into()));
        }
        Ok(())
    }
}

/// Complete parameter set and structure of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mcihn {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub aae: [Aae; 3],
    pub cgmm: Cgmm,
    pub ffm: Ffm,
}

/// Tape handles produced by one batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// N×1 column of predicted scores.
    pub scores: Var,
    pub class_probs: Vec<Var>,
    /// Per-sample latent codes, indexed by modality.
    pub latents: Vec<[Option<Var>; 3]>,
    pub adp: Var,
    pub mul: Var,
    pub combined: Var,
}

impl Mcihn {
    /// Builds every component, including those an ablation leaves idle, so
    /// that variants sharing a seed start from identical weights.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let aae = Modality::ALL.map(|m| {
            Aae::new(
                &mut store,
                rng,
                m,
                config.shapes[m.index()],
                config.latent,
                config.activation,
            )
        });
        let cgmm = Cgmm::new(
            &mut store,
            rng,
            config.latent.d,
            config.shared_interaction,
            &config.adaptation_sites,
            config.kernel,
        );
        let ffm = Ffm::new(&mut store, rng, config.latent.d, config.heads, config.class_head)?;
        Ok(Mcihn {
            config,
            store,
            aae,
            cgmm,
            ffm,
        })
    }

    pub fn aae(&self, m: Modality) -> &Aae {
        &self.aae[m.index()]
    }

    /// Parameters that an ablation can ever update.
    pub fn reachable_params(&self, ablation: Ablation) -> Vec<ParamId> {
        let active = ablation.active();
        let mut ids = Vec::new();
        for &m in active {
            let a = self.aae(m);
            ids.extend(a.encoder_params());
            if ablation.uses_aae() {
                ids.extend(a.decoder_params());
                ids.extend(a.discriminator_params());
            }
        }
        if ablation.uses_cgmm() {
            ids.extend(self.cgmm.interaction.iter().copied());
            for g in &self.cgmm.gates {
                let (a, b) = g.pair.modalities();
                if active.contains(&a) && active.contains(&b) {
                    ids.extend([g.w, g.b, g.w_f1, g.w_f2]);
                }
            }
            for l in &self.cgmm.adaptation {
                ids.extend([l.w, l.b]);
            }
        }
        for &m in active {
            let path = self.ffm.path(m);
            for h in &path.heads {
                ids.extend([h.wq, h.wk, h.wv]);
            }
            ids.push(path.wo);
        }
        ids.extend([self.ffm.head_w, self.ffm.head_b]);
        ids
    }

    /// Forward pass over a batch. `dropout` carries the rate and the mask
    /// RNG at train time; `None` evaluates deterministically. An
    /// `adp_weight` of zero removes the adaptation term entirely.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        samples: &[&ModalSample],
        ablation: Ablation,
        adp_weight: f64,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(TensorError::Empty { op: "forward_batch" });
        }
        let active = ablation.active();
        let mut scores = Vec::with_capacity(samples.len());
        let mut class_probs = Vec::new();
        let mut all_latents = Vec::with_capacity(samples.len());
        let mut latent_blocks: [Vec<Var>; 3] = Default::default();
        let mut fused_blocks: [Vec<Var>; 3] = Default::default();
        for sample in samples {
            let mut latents: [Option<Var>; 3] = [None; 3];
            for &m in active {
                let x = tape.constant(sample.get(m).clone())?;
                let s = self.aae(m).encode(tape, p, x)?;
                latents[m.index()] = Some(s);
                latent_blocks[m.index()].push(s);
            }
            let joint = if ablation.uses_cgmm() {
                Some(self.cgmm.forward(tape, p, &latents, active)?)
            } else {
                None
            };
            let mut paths = Vec::with_capacity(active.len());
            for &core in active {
                let s_core = latents[core.index()].expect("active latent");
                let (q, k) = match &joint {
                    Some(j) => {
                        let aux: Vec<Modality> = active.iter().copied().filter(|&m| m != core).collect();
                        let first = Pair::of(core, aux[0]).expect("distinct modalities");
                        let last = Pair::of(core, aux[aux.len() - 1]).expect("distinct modalities");
                        let missing = || TensorError::Invalid(format!("missing joint representation for {core}"));
                        (j.get(first).ok_or_else(missing)?, j.get(last).ok_or_else(missing)?)
                    }
                    None => (s_core, s_core),
                };
                let out = self.ffm.path_forward(tape, p, core, q, k, s_core)?.output;
                fused_blocks[core.index()].push(out);
                paths.push(out);
            }
            let head = (p.var(self.ffm.head_w), p.var(self.ffm.head_b));
            let class_head = self.ffm.class_head.map(|(w, b)| (p.var(w), p.var(b)));
            let drop = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
            let out = fuse_predict(tape, &paths, head, class_head, drop)?;
            scores.push(out.score);
            class_probs.extend(out.class_probs);
            all_latents.push(latents);
        }
        let scores = tape.concat_rows(&scores)?;
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let mul = mae_loss(tape, scores, &labels)?;
        let adp = if ablation.uses_cgmm() && adp_weight != 0.0 {
            let mut total: Option<Var> = None;
            for layer in &self.cgmm.adaptation {
                let blocks = match layer.site {
                    AdaptationSite::Latent => &latent_blocks,
                    AdaptationSite::Fused => &fused_blocks,
                };
                let term = adaptation_loss(tape, p.var(layer.w), p.var(layer.b), self.cgmm.kernel, blocks, active)?;
                total = Some(match total {
                    Some(t) => tape.add(t, term)?,
                    None => term,
                });
            }
            match total {
                Some(t) if adp_weight != 1.0 => tape.scale(t, adp_weight)?,
                Some(t) => t,
                None => tape.constant(Tensor::scalar(0.0))?,
            }
        } else {
            tape.constant(Tensor::scalar(0.0))?
        };
        let combined = combined_loss(tape, mul, adp)?;
        Ok(BatchOutput {
            scores,
            class_probs,
            latents: all_latents,
            adp,
            mul,
            combined,
        })
    }

    /// Deterministic scores (dropout off) for every sample, computed in
    /// chunks of `chunk` samples.
    pub fn predict(&self, samples: &[ModalSample], ablation: Ablation, chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let refs: Vec<&ModalSample> = part.iter().collect();
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape)?;
            let o = self.forward_batch::<rand_chacha::ChaCha8Rng>(&mut tape, &p, &refs, ablation, 1.0, None)?;
            out.extend_from_slice(tape.value(o.scores).data());
        }
        Ok(out)
    }

    /// Class probabilities of the auxiliary head for every sample.
    pub fn predict_classes(&self, samples: &[ModalSample], ablation: Ablation) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for sample in samples {
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape)?;
            let o = self.forward_batch::<rand_chacha::ChaCha8Rng>(&mut tape, &p, &[sample], ablation, 1.0, None)?;
            out.extend(o.class_probs.iter().map(|&v| tape.value(v).data().to_vec()));
        }
        Ok(out)
    }
}
