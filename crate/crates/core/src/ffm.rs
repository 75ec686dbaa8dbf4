//! Feature fusion: per-core multi-head attention, additive fusion and the
//! prediction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Multi-head attention block of one core-modality path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPath {
    pub core: Modality,
    pub heads: Vec<AttentionHead>,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ffm {
    pub d: usize,
    pub heads: usize,
    pub paths: [FusionPath; 3],
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Auxiliary `d→C` softmax head; never trained.
    pub class_head: Option<(ParamId, ParamId)>,
}

impl Ffm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        heads: usize,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Invalid(format!("{heads} heads do not divide d = {d}")));
        }
        let dh = d / heads;
        let paths = Modality::ALL.map(|core| {
            let t = core.tag();
            FusionPath {
                core,
                heads: (0..heads)
                    .map(|i| AttentionHead {
                        wq: store.add_xavier(format!("ffm.{t}.h{i}.wq"), d, dh, rng),
                        wk: store.add_xavier(format!("ffm.{t}.h{i}.wk"), d, dh, rng),
                        wv: store.add_xavier(format!("ffm.{t}.h{i}.wv"), d, dh, rng),
                    })
                    .collect(),
                wo: store.add_xavier(format!("ffm.{t}.wo"), d, d, rng),
            }
        });
        let head_w = store.add_xavier("ffm.out.w", d, 1, rng);
        let head_b = store.add_bias("ffm.out.b", 1);
        let class_head = num_classes.map(|c| {
            (
                store.add_xavier("ffm.class.w", d, c, rng),
                store.add_bias("ffm.class.b", c),
            )
        });
        Ok(Ffm {
            d,
            heads,
            paths,
            head_w,
            head_b,
            class_head,
        })
    }

    pub fn path(&self, core: Modality) -> &FusionPath {
        &self.paths[core.index()]
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for p in &self.paths {
            for h in &p.heads {
                ids.extend([h.wq, h.wk, h.wv]);
            }
            ids.push(p.wo);
        }
        ids.extend([self.head_w, self.head_b]);
        if let Some((w, b)) = self.class_head {
            ids.extend([w, b]);
        }
        ids
    }

    pub fn path_forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        core: Modality,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<Attended> {
        let path = self.path(core);
        let heads: Vec<(Var, Var, Var)> = path
            .heads
            .iter()
            .map(|h| (p.var(h.wq), p.var(h.wk), p.var(h.wv)))
            .collect();
        multihead_path(tape, q_in, k_in, v_in, &heads, p.var(path.wo), self.d)
    }
}

/// Output of one multi-head block plus the attention weights of each head.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `Concat_i(softmax(q W_i^Q (k W_i^K)ᵀ / sqrt(d/h)) · v W_i^V) · W^O`.
pub fn multihead_path(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: &[(Var, Var, Var)],
    wo: Var,
    d: usize,
) -> Result<Attended> {
    let h = heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(TensorError::Invalid(format!("{h} heads do not divide d = {d}")));
    }
    let scale = 1.0 / (d as f64 / h as f64).sqrt();
    let mut outs = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for &(wq, wk, wv) in heads {
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(k_in, wk)?;
        let v = tape.matmul(v_in, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let a = tape.row_softmax(scores)?;
        outs.push(tape.matmul(a, v)?);
        weights.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    let output = tape.matmul(cat, wo)?;
    Ok(Attended { output, weights })
}

#[derive(Debug, Clone, Copy)]
pub struct FusedOutput {
    /// 1×1 continuous sentiment score.
    pub score: Var,
    /// 1×C class probabilities when the class head is enabled.
    pub class_probs: Option<Var>,
}

/// Sums the path outputs, applies `dropout` (train time), mean-pools over
/// time and maps the pooled vector to a score.
pub fn fuse_predict<R: Rng + ?Sized>(
    tape: &mut Tape,
    paths: &[Var],
    head: (Var, Var),
    class_head: Option<(Var, Var)>,
    dropout: Option<(f64, &mut R)>,
) -> Result<FusedOutput> {
    let (&first, rest) = paths.split_first().ok_or(TensorError::Empty { op: "fuse_predict" })?;
    let mut sum = first;
    for &p in rest {
        sum = tape.add(sum, p)?;
    }
    if let Some((rate, rng)) = dropout {
        sum = tape.dropout(sum, rate, rng)?;
    }
    let pooled = tape.mean_rows(sum)?;
    let score = tape.matmul(pooled, head.0)?;
    let score = tape.add_row(score, head.1)?;
    let class_probs = match class_head {
        Some((w, b)) => {
            let logits = tape.matmul(pooled, w)?;
            let logits = tape.add_row(logits, b)?;
            Some(tape.row_softmax(logits)?)
        }
        None => None,
    };
    Ok(FusedOutput { score, class_probs })
}

/// `(1/N) Σ |y^p − y^g|` for an N×1 column of scores.
pub fn mae_loss(tape: &mut Tape, scores: Var, labels: &[f64]) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if labels.is_empty() || shape != [labels.len(), 1] {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            lhs: shape,
            rhs: vec![labels.len(), 1],
        });
    }
    let y = tape.constant(Tensor::matrix(labels.len(), 1, labels.to_vec()))?;
    let diff = tape.sub(scores, y)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

/// `L(Combined) = L(Adp) + L(Mul)`.
pub fn combined_loss(tape: &mut Tape, mul: Var, adp: Var) -> Result<Var> {
    tape.add(adp, mul)
}
