//! Regression and discretized classification metrics for sentiment scores.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabelScheme;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("unknown discretization scheme {0:?}")]
    UnknownScheme(String),
}

/// Score-to-class conventions. Every scheme partitions [-1, 1] into
/// consecutive bins; a score on an edge belongs to the higher bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Mosi2,
    Mosi7,
    Sims2,
    Sims3,
    Sims5,
}

const MOSI7_EDGES: [f64; 6] = [
    -1.0 + 2.0 / 7.0,
    -1.0 + 4.0 / 7.0,
    -1.0 + 6.0 / 7.0,
    -1.0 + 8.0 / 7.0,
    -1.0 + 10.0 / 7.0,
    -1.0 + 12.0 / 7.0,
];

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Mosi2,
        Scheme::Mosi7,
        Scheme::Sims2,
        Scheme::Sims3,
        Scheme::Sims5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Mosi2 => "mosi2",
            Scheme::Mosi7 => "mosi7",
            Scheme::Sims2 => "sims2",
            Scheme::Sims3 => "sims3",
            Scheme::Sims5 => "sims5",
        }
    }

    /// Interior bin edges, strictly increasing.
    pub fn edges(self) -> &'static [f64] {
        match self {
            Scheme::Mosi2 | Scheme::Sims2 => &[0.0],
            Scheme::Sims3 => &[-0.25, 0.25],
            Scheme::Sims5 => &[-0.75, -0.25, 0.25, 0.75],
            Scheme::Mosi7 => &MOSI7_EDGES,
        }
    }

    /// Class label of each bin, ordered from most negative to most positive.
    pub fn classes(self) -> &'static [i32] {
        match self {
            Scheme::Mosi2 | Scheme::Sims2 => &[-1, 1],
            Scheme::Sims3 => &[-1, 0, 1],
            Scheme::Sims5 => &[-2, -1, 0, 1, 2],
            Scheme::Mosi7 => &[-3, -2, -1, 0, 1, 2, 3],
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    /// Schemes reported for a dataset family, binary first.
    pub fn family(labels: LabelScheme) -> &'static [Scheme] {
        match labels {
            LabelScheme::Mosi7 => &[Scheme::Mosi2, Scheme::Mosi7],
            LabelScheme::Sims5 => &[Scheme::Sims2, Scheme::Sims3, Scheme::Sims5],
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, MetricsError> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MetricsError::UnknownScheme(s.to_string()))
    }
}

/// Class of `score` under `scheme`. Scores outside [-1, 1] are clamped.
pub fn discretize(score: f64, scheme: Scheme) -> i32 {
    let clamped = if score.is_nan() { 0.0 } else { score.clamp(-1.0, 1.0) };
    if clamped != score {
        log::warn!("score {score} outside [-1, 1] clamped before discretization");
    }
    let bin = scheme.edges().iter().filter(|&&e| clamped >= e).count();
    scheme.classes()[bin]
}

fn check(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        Err(MetricsError::LengthMismatch(a, b))
    } else if a == 0 {
        Err(MetricsError::Empty)
    } else {
        Ok(())
    }
}

pub fn accuracy(pred: &[i32], truth: &[i32]) -> Result<f64, MetricsError> {
    check(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-class F1 weighted by true-class support; an undefined class F1 is 0.
pub fn f1_weighted(pred: &[i32], truth: &[i32]) -> Result<f64, MetricsError> {
    check(pred.len(), truth.len())?;
    // class -> (tp, fp, fn, support)
    let mut counts: BTreeMap<i32, (usize, usize, usize, usize)> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        counts.entry(t).or_default().3 += 1;
        if p == t {
            counts.entry(t).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    let n = truth.len() as f64;
    Ok(counts
        .values()
        .map(|&(tp, fp, fneg, support)| {
            let denom = 2 * tp + fp + fneg;
            let f1 = if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            };
            f1 * support as f64 / n
        })
        .sum())
}

/// Sample Pearson correlation. `degenerate` is set, and `r` reported as 0,
/// when either argument has zero variance or fewer than two samples exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    check(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if x.len() < 2 || sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Exclude samples whose true score is exactly 0 from Acc-2 and F1.
    pub acc2_drop_neutral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc2: Option<f64>,
    pub acc3: Option<f64>,
    pub acc5: Option<f64>,
    pub acc7: Option<f64>,
    /// Weighted F1 under the binary scheme.
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub corr_degenerate: bool,
    pub n: usize,
    /// Dataset family that selected the schemes.
    pub scheme: LabelScheme,
    /// Scheme behind each reported accuracy, e.g. `acc2 -> sims2`.
    pub schemes: BTreeMap<String, Scheme>,
    pub acc2_rule: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(
    pred: &[f64],
    truth: &[f64],
    family: LabelScheme,
    options: MetricsOptions,
) -> Result<MetricsReport, MetricsError> {
    check(pred.len(), truth.len())?;
    let mut report = MetricsReport {
        acc2: None,
        acc3: None,
        acc5: None,
        acc7: None,
        f1: 0.0,
        mae: mean_absolute_error(pred, truth)?,
        corr: 0.0,
        corr_degenerate: false,
        n: pred.len(),
        scheme: family,
        schemes: BTreeMap::new(),
        acc2_rule: if options.acc2_drop_neutral {
            "negative (<0) vs positive (>0), neutral dropped".into()
        } else {
            "negative (<0) vs non-negative (>=0)".into()
        },
    };
    let c = pearson_corr(pred, truth)?;
    report.corr = c.r;
    report.corr_degenerate = c.degenerate;
    for &scheme in Scheme::family(family) {
        let (p, t): (Vec<f64>, Vec<f64>) = if scheme.num_classes() == 2 && options.acc2_drop_neutral {
            pred.iter()
                .zip(truth)
                .filter(|(_, &t)| t != 0.0)
                .map(|(&p, &t)| (p, t))
                .unzip()
        } else {
            (pred.to_vec(), truth.to_vec())
        };
        let pc: Vec<i32> = p.iter().map(|&s| discretize(s, scheme)).collect();
        let tc: Vec<i32> = t.iter().map(|&s| discretize(s, scheme)).collect();
        let (acc, f1) = if pc.is_empty() {
            (0.0, 0.0)
        } else {
            (accuracy(&pc, &tc)?, f1_weighted(&pc, &tc)?)
        };
        let key = match scheme.num_classes() {
            2 => {
                report.f1 = f1;
                report.acc2 = Some(acc);
                "acc2"
            }
            3 => {
                report.acc3 = Some(acc);
                "acc3"
            }
            5 => {
                report.acc5 = Some(acc);
                "acc5"
            }
            _ => {
                report.acc7 = Some(acc);
                "acc7"
            }
        };
        report.schemes.insert(key.to_string(), scheme);
    }
    Ok(report)
}
