//! Cross-modal gate mechanism.
//!
//! For every core modality the latent is matched against the other latents
//! through a shared interaction matrix, turned into an attention-weighted
//! transfer, and combined with pairwise ReLU gates into joint
//! representations. An MMD term pulls each core latent distribution toward
//! the distribution of the remaining modalities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pair {
    VT,
    VA,
    TA,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::VT, Pair::VA, Pair::TA];

    /// The two modalities in canonical (v, t, a) order.
    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Pair::VT => (Modality::Visual, Modality::Text),
            Pair::VA => (Modality::Visual, Modality::Audio),
            Pair::TA => (Modality::Text, Modality::Audio),
        }
    }

    pub fn of(a: Modality, b: Modality) -> Option<Pair> {
        Pair::ALL.into_iter().find(|p| {
            let (x, y) = p.modalities();
            (x, y) == (a, b) || (y, x) == (a, b)
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Pair::VT => "vt",
            Pair::VA => "va",
            Pair::TA => "ta",
        }
    }
}

impl FromStr for Pair {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Pair> {
        match s {
            "vt" | "tv" => Ok(Pair::VT),
            "va" | "av" => Ok(Pair::VA),
            "ta" | "at" => Ok(Pair::TA),
            other => Err(TensorError::Invalid(format!("unknown pair tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MmdKernel {
    /// Squared distance between mean embeddings.
    Linear,
    /// Gaussian kernel V-statistic; `None` uses the median heuristic.
    Rbf { bandwidth: Option<f64> },
}

impl fmt::Display for MmdKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MmdKernel::Linear => f.write_str("linear"),
            MmdKernel::Rbf { .. } => f.write_str("rbf"),
        }
    }
}

/// Where the adaptation loss is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationSite {
    /// The autoencoder latents `S^v, S^t, S^a`.
    Latent,
    /// The fused per-core path outputs.
    Fused,
}

impl FromStr for AdaptationSite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "latent" => Ok(AdaptationSite::Latent),
            "fused" => Ok(AdaptationSite::Fused),
            other => Err(format!("unknown adaptation site {other:?} (latent | fused)")),
        }
    }
}

impl fmt::Display for AdaptationSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptationSite::Latent => "latent",
            AdaptationSite::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGate {
    pub pair: Pair,
    /// 4d×d
    pub w: ParamId,
    /// 1×d
    pub b: ParamId,
    /// 2d×d projection of `[Ã^p, S^p]`
    pub w_f1: ParamId,
    /// 2d×d projection of `[Ã^q, S^q]`
    pub w_f2: ParamId,
}

/// Fully connected map `ξ` applied before the mean embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationLayer {
    pub site: AdaptationSite,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cgmm {
    pub d: usize,
    /// One shared matrix, or one per core modality.
    pub interaction: Vec<ParamId>,
    pub gates: [PairGate; 3],
    pub adaptation: Vec<AdaptationLayer>,
    pub kernel: MmdKernel,
}

impl Cgmm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        shared_interaction: bool,
        sites: &[AdaptationSite],
        kernel: MmdKernel,
    ) -> Self {
        let interaction = if shared_interaction {
            vec![store.add_xavier("cgmm.w", d, d, rng)]
        } else {
            Modality::ALL
                .iter()
                .map(|m| store.add_xavier(format!("cgmm.w_{}", m.tag()), d, d, rng))
                .collect()
        };
        let gates = Pair::ALL.map(|pair| {
            let t = pair.tag();
            PairGate {
                pair,
                w: store.add_xavier(format!("cgmm.gate_{t}.w"), 4 * d, d, rng),
                b: store.add_bias(format!("cgmm.gate_{t}.b"), d),
                w_f1: store.add_xavier(format!("cgmm.gate_{t}.w_f1"), 2 * d, d, rng),
                w_f2: store.add_xavier(format!("cgmm.gate_{t}.w_f2"), 2 * d, d, rng),
            }
        });
        let adaptation = sites
            .iter()
            .map(|&site| AdaptationLayer {
                site,
                w: store.add_xavier(format!("cgmm.xi_{site}.w"), d, d, rng),
                b: store.add_bias(format!("cgmm.xi_{site}.b"), d),
            })
            .collect();
        Cgmm {
            d,
            interaction,
            gates,
            adaptation,
            kernel,
        }
    }

    pub fn interaction_for(&self, core: Modality) -> ParamId {
        if self.interaction.len() == 1 {
            self.interaction[0]
        } else {
            self.interaction[core.index()]
        }
    }

    pub fn gate(&self, pair: Pair) -> &PairGate {
        &self.gates[pair.index()]
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.interaction.clone();
        for g in &self.gates {
            ids.extend([g.w, g.b, g.w_f1, g.w_f2]);
        }
        for a in &self.adaptation {
            ids.extend([a.w, a.b]);
        }
        ids
    }

    /// Joint representations for every pair among `active`, given one
    /// latent per active modality (`latents[m.index()]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        latents: &[Option<Var>; 3],
        active: &[Modality],
    ) -> Result<JointReps> {
        let mut transferred: [Option<Var>; 3] = [None; 3];
        for &core in active {
            let s_core = latents[core.index()].ok_or(TensorError::Invalid(format!("missing {core} latent")))?;
            let others: Vec<Var> = active
                .iter()
                .filter(|&&m| m != core)
                .filter_map(|m| latents[m.index()])
                .collect();
            let m = interaction_matrix(tape, p.var(self.interaction_for(core)), s_core, &others)?;
            transferred[core.index()] = Some(attention_transfer(tape, m, s_core)?.transferred);
        }
        let mut reps: [Option<Var>; 3] = [None; 3];
        for pair in Pair::ALL {
            let (a, b) = pair.modalities();
            let (Some(s_p), Some(s_q)) = (latents[a.index()], latents[b.index()]) else {
                continue;
            };
            if !active.contains(&a) || !active.contains(&b) {
                continue;
            }
            let gate = self.gate(pair);
            let g = pair_gate(tape, p.var(gate.w), p.var(gate.b), s_p, s_q)?;
            let (Some(at_p), Some(at_q)) = (transferred[a.index()], transferred[b.index()]) else {
                continue;
            };
            let f = joint_representation(tape, p.var(gate.w_f1), p.var(gate.w_f2), at_p, s_p, at_q, s_q, g)?;
            reps[pair.index()] = Some(f);
        }
        Ok(JointReps { reps })
    }
}

/// `F^{vt}, F^{va}, F^{ta}` for one sample; absent pairs are `None`.
#[derive(Debug, Clone, Copy)]
pub struct JointReps {
    pub reps: [Option<Var>; 3],
}

impl JointReps {
    pub fn get(&self, pair: Pair) -> Option<Var> {
        self.reps[pair.index()]
    }
}

/// `M = S_core · Σ_o W·S_oᵀ`, shape T×T.
pub fn interaction_matrix(tape: &mut Tape, w: Var, s_core: Var, others: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &o in others {
        if tape.shape(o) != tape.shape(s_core) {
            return Err(TensorError::ShapeMismatch {
                op: "interaction_matrix",
                lhs: tape.shape(s_core).to_vec(),
                rhs: tape.shape(o).to_vec(),
            });
        }
        let ot = tape.transpose(o)?;
        let term = tape.matmul(w, ot)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or(TensorError::Empty {
        op: "interaction_matrix",
    })?;
    tape.matmul(s_core, acc)
}

#[derive(Debug, Clone, Copy)]
pub struct Transfer {
    /// Row-softmax attention scores α.
    pub alpha: Var,
    /// `α ⊙ M`
    pub weighted: Var,
    /// `(α ⊙ M) · S_core`, shape T×d
    pub transferred: Var,
}

pub fn attention_transfer(tape: &mut Tape, m: Var, s_core: Var) -> Result<Transfer> {
    let alpha = tape.row_softmax(m)?;
    let weighted = tape.mul(alpha, m)?;
    let transferred = tape.matmul(weighted, s_core)?;
    Ok(Transfer {
        alpha,
        weighted,
        transferred,
    })
}

/// `ReLU([S_p, S_q, S_p − S_q, S_p ⊙ S_q]·W + b)`.
pub fn pair_gate(tape: &mut Tape, w: Var, b: Var, s_p: Var, s_q: Var) -> Result<Var> {
    let diff = tape.sub(s_p, s_q)?;
    let prod = tape.mul(s_p, s_q)?;
    let cat = tape.concat_cols(&[s_p, s_q, diff, prod])?;
    let lin = tape.matmul(cat, w)?;
    let lin = tape.add_row(lin, b)?;
    tape.relu(lin)
}

/// `G ⊙ ([Ã_p, S_p]·W_f1) + G ⊙ ([Ã_q, S_q]·W_f2)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_representation(
    tape: &mut Tape,
    w_f1: Var,
    w_f2: Var,
    at_p: Var,
    s_p: Var,
    at_q: Var,
    s_q: Var,
    gate: Var,
) -> Result<Var> {
    let cp = tape.concat_cols(&[at_p, s_p])?;
    let cp = tape.matmul(cp, w_f1)?;
    let cp = tape.mul(gate, cp)?;
    let cq = tape.concat_cols(&[at_q, s_q])?;
    let cq = tape.matmul(cq, w_f2)?;
    let cq = tape.mul(gate, cq)?;
    tape.add(cp, cq)
}

/// Squared MMD between the rows of `core` blocks and the rows of `other`
/// blocks after mapping every row through `ξ(x) = x·W + b`.
pub fn mmd_squared(
    tape: &mut Tape,
    xi_w: Var,
    xi_b: Var,
    kernel: MmdKernel,
    core: &[Var],
    other: &[Var],
) -> Result<Var> {
    if core.is_empty() || other.is_empty() {
        return Err(TensorError::Empty { op: "mmd_squared" });
    }
    let x = tape.concat_rows(core)?;
    let y = tape.concat_rows(other)?;
    let x = tape.matmul(x, xi_w)?;
    let x = tape.add_row(x, xi_b)?;
    let y = tape.matmul(y, xi_w)?;
    let y = tape.add_row(y, xi_b)?;
    match kernel {
        MmdKernel::Linear => {
            let mx = tape.mean_rows(x)?;
            let my = tape.mean_rows(y)?;
            let diff = tape.sub(mx, my)?;
            let sq = tape.mul(diff, diff)?;
            tape.sum(sq)
        }
        MmdKernel::Rbf { bandwidth } => {
            let dxx = tape.pairwise_sq_dist(x, x)?;
            let dyy = tape.pairwise_sq_dist(y, y)?;
            let dxy = tape.pairwise_sq_dist(x, y)?;
            // k(a, b) = exp(−‖a − b‖² / (2σ²)); the median heuristic sets 2σ²
            // to the median pairwise squared distance of the pooled rows and
            // stays inside the differentiated function.
            let two_sigma_sq = match bandwidth {
                Some(s) => tape.constant(Tensor::scalar(2.0 * s * s))?,
                None => {
                    let m = tape.median(&[dxx, dyy, dxy])?;
                    if tape.value(m).item() > 0.0 {
                        m
                    } else {
                        tape.constant(Tensor::scalar(1.0))?
                    }
                }
            };
            let mut means = Vec::with_capacity(3);
            for dist in [dxx, dyy, dxy] {
                let z = tape.div_scalar(dist, two_sigma_sq)?;
                let z = tape.scale(z, -1.0)?;
                let k = tape.exp(z)?;
                means.push(tape.mean(k)?);
            }
            let cross = tape.scale(means[2], -2.0)?;
            let total = tape.add(means[0], means[1])?;
            let total = tape.add(total, cross)?;
            // the V-statistic is a squared RKHS norm; clip rounding below zero
            tape.relu(total)
        }
    }
}

/// Sum over core modalities of the MMD between the core's rows and the rows
/// of every other active modality. `blocks[m.index()]` holds the row blocks
/// (one per sample) for modality `m`.
pub fn adaptation_loss(
    tape: &mut Tape,
    xi_w: Var,
    xi_b: Var,
    kernel: MmdKernel,
    blocks: &[Vec<Var>; 3],
    active: &[Modality],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &core in active {
        let other: Vec<Var> = active
            .iter()
            .filter(|&&m| m != core)
            .flat_map(|m| blocks[m.index()].iter().copied())
            .collect();
        if other.is_empty() {
            continue;
        }
        let term = mmd_squared(tape, xi_w, xi_b, kernel, &blocks[core.index()], &other)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}
