//! Acceptance suite. Every criterion runs at its stated tolerance and
//! budget and prints one PASS/FAIL line; the process exits nonzero when any
//! criterion fails.

#![allow(clippy::needless_range_loop)]

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{adversarial_probe_accuracy, random_matrix, ProbeSetup};
use mcihn::cgmm::{mmd_squared, pair_gate, MmdKernel};
use mcihn::config::TrainConfig;
use mcihn::data::{
    generate_synthetic, read_feature_file, write_feature_file, DatasetHeader, LabelScheme, ModalSample, ModalShape,
    SyntheticSpec, DESK_SHAPES,
};
use mcihn::ffm::multihead_path;
use mcihn::metrics::{accuracy, discretize, f1_weighted, mean_absolute_error, pearson_corr, Scheme};
use mcihn::model::{Ablation, Mcihn, ModelConfig};
use mcihn::tape::{Tape, Var};
use mcihn::train::{evaluate, model_grad_check, run_ablation_suite, train, Checkpoint, History};
use mcihn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(name: &str, budget: Duration, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = check();
    let elapsed = start.elapsed();
    let in_budget = elapsed <= budget;
    let pass = o.pass && in_budget;
    println!(
        "{} {name}: {} [{:.1} s of {} s budget{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_budget { "" } else { ", over budget" }
    );
    pass
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------------------
// Gradient integrity

fn gradient_integrity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let start = Instant::now();
        let model = Mcihn::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch = generate_synthetic(&SyntheticSpec::desk(2, 0.5, 100 + seed));
        let r = model_grad_check(&model, &batch, Ablation::Full, 0.5, 1e-5).unwrap();
        let t = start.elapsed().as_secs_f64();
        pass &= r.max_rel_error < 1e-4 && t < 60.0;
        worst = worst.max(r.max_rel_error);
        notes.push(format!(
            "seed {seed}: {:.2e} over {} coords ({} kink crossings excluded, {:.2e} including them, {t:.1} s)",
            r.max_rel_error, r.coordinates, r.kink_crossings, r.max_rel_error_all
        ));
    }
    outcome(
        pass,
        format!("max relative error {worst:.2e} < 1e-4; {}", notes.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// Operator oracles: plain scalar loops over Vec<Vec<f64>>

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn ref_matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

fn ref_softmax(a: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            let mut m = f64::NEG_INFINITY;
            for &x in row {
                if x > m {
                    m = x;
                }
            }
            let mut z = 0.0;
            for &x in row {
                z += (x - m).exp();
            }
            row.iter().map(|&x| (x - m).exp() / z).collect()
        })
        .collect()
}

fn ref_transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| (0..a.len()).map(|i| a[i][j]).collect())
        .collect()
}

fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((t.at(i, j) - v).abs());
        }
    }
    worst
}

fn oracle_matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = (
        rng.random_range(1..=16),
        rng.random_range(1..=16),
        rng.random_range(1..=16),
    );
    let (a, b) = (random_matrix(rng, m, k), random_matrix(rng, k, n));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let c = tape.matmul(va, vb).unwrap();
    max_diff(tape.value(c), &ref_matmul(&to_mat(&a), &to_mat(&b)))
}

fn oracle_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let mut a = random_matrix(rng, 8, 8);
    a = a.map(|x| 6.0 * x);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone()).unwrap();
    let s = tape.row_softmax(va).unwrap();
    max_diff(tape.value(s), &ref_softmax(&to_mat(&a)))
}

fn oracle_attention(rng: &mut ChaCha8Rng) -> f64 {
    let (t, d, h) = (8, 16, 4);
    let dh = d / h;
    let inputs: Vec<Tensor> = (0..3).map(|_| random_matrix(rng, t, d)).collect();
    let heads: Vec<[Tensor; 3]> = (0..h)
        .map(|_| {
            [
                random_matrix(rng, d, dh),
                random_matrix(rng, d, dh),
                random_matrix(rng, d, dh),
            ]
        })
        .collect();
    let wo = random_matrix(rng, d, d);

    let mut tape = Tape::new();
    let iv: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let hv: Vec<(Var, Var, Var)> = heads
        .iter()
        .map(|[q, k, v]| {
            (
                tape.constant(q.clone()).unwrap(),
                tape.constant(k.clone()).unwrap(),
                tape.constant(v.clone()).unwrap(),
            )
        })
        .collect();
    let wov = tape.constant(wo.clone()).unwrap();
    let out = multihead_path(&mut tape, iv[0], iv[1], iv[2], &hv, wov, d).unwrap();

    let (q_in, k_in, v_in) = (to_mat(&inputs[0]), to_mat(&inputs[1]), to_mat(&inputs[2]));
    let scale = 1.0 / ((d / h) as f64).sqrt();
    let mut concat = vec![Vec::new(); t];
    for [wq, wk, wv] in &heads {
        let q = ref_matmul(&q_in, &to_mat(wq));
        let k = ref_matmul(&k_in, &to_mat(wk));
        let v = ref_matmul(&v_in, &to_mat(wv));
        let scores: Mat = ref_matmul(&q, &ref_transpose(&k))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x * scale).collect())
            .collect();
        let o = ref_matmul(&ref_softmax(&scores), &v);
        for (c, r) in concat.iter_mut().zip(o) {
            c.extend(r);
        }
    }
    max_diff(tape.value(out.output), &ref_matmul(&concat, &to_mat(&wo)))
}

fn oracle_pair_gate(rng: &mut ChaCha8Rng) -> f64 {
    let (t, d) = (8, 16);
    let (sp, sq) = (random_matrix(rng, t, d), random_matrix(rng, t, d));
    let (w, b) = (random_matrix(rng, 4 * d, d), random_matrix(rng, 1, d));
    let mut tape = Tape::new();
    let vars: Vec<Var> = [&w, &b, &sp, &sq]
        .iter()
        .map(|x| tape.constant((*x).clone()).unwrap())
        .collect();
    let g = pair_gate(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();

    let mut expected = vec![vec![0.0; d]; t];
    for i in 0..t {
        let mut feat = Vec::with_capacity(4 * d);
        for j in 0..d {
            feat.push(sp.at(i, j));
        }
        for j in 0..d {
            feat.push(sq.at(i, j));
        }
        for j in 0..d {
            feat.push(sp.at(i, j) - sq.at(i, j));
        }
        for j in 0..d {
            feat.push(sp.at(i, j) * sq.at(i, j));
        }
        for o in 0..d {
            let mut s = b.at(0, o);
            for (k, f) in feat.iter().enumerate() {
                s += f * w.at(k, o);
            }
            expected[i][o] = if s > 0.0 { s } else { 0.0 };
        }
    }
    max_diff(tape.value(g), &expected)
}

fn ref_mmd(kernel: MmdKernel, w: &Tensor, b: &Tensor, x: &Mat, y: &Mat) -> f64 {
    let map = |rows: &Mat| -> Mat {
        rows.iter()
            .map(|r| {
                (0..w.cols())
                    .map(|o| b.at(0, o) + r.iter().enumerate().map(|(k, v)| v * w.at(k, o)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (fx, fy) = (map(x), map(y));
    match kernel {
        MmdKernel::Linear => {
            let mut total = 0.0;
            for j in 0..w.cols() {
                let mx = fx.iter().map(|r| r[j]).sum::<f64>() / fx.len() as f64;
                let my = fy.iter().map(|r| r[j]).sum::<f64>() / fy.len() as f64;
                total += (mx - my) * (mx - my);
            }
            total
        }
        MmdKernel::Rbf { bandwidth } => {
            let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            let mut pooled = Vec::new();
            for (u, v) in [(&fx, &fx), (&fy, &fy), (&fx, &fy)] {
                for a in u.iter() {
                    for c in v.iter() {
                        pooled.push(sq(a, c));
                    }
                }
            }
            let denom = match bandwidth {
                Some(s) => 2.0 * s * s,
                None => {
                    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let n = pooled.len();
                    let m = if n % 2 == 1 {
                        pooled[n / 2]
                    } else {
                        (pooled[n / 2 - 1] + pooled[n / 2]) / 2.0
                    };
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                }
            };
            let mean_k = |u: &Mat, v: &Mat| {
                let mut s = 0.0;
                for a in u {
                    for c in v {
                        s += (-sq(a, c) / denom).exp();
                    }
                }
                s / (u.len() * v.len()) as f64
            };
            (mean_k(&fx, &fx) + mean_k(&fy, &fy) - 2.0 * mean_k(&fx, &fy)).max(0.0)
        }
    }
}

const KERNELS: [MmdKernel; 3] = [
    MmdKernel::Linear,
    MmdKernel::Rbf { bandwidth: None },
    MmdKernel::Rbf { bandwidth: Some(2.0) },
];

fn tape_mmd(kernel: MmdKernel, w: &Tensor, b: &Tensor, xs: &[Tensor], ys: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let (vw, vb) = (tape.constant(w.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let vx: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let vy: Vec<Var> = ys.iter().map(|y| tape.constant(y.clone()).unwrap()).collect();
    let m = mmd_squared(&mut tape, vw, vb, kernel, &vx, &vy).unwrap();
    tape.value(m).item()
}

fn stacked(blocks: &[Tensor]) -> Mat {
    blocks.iter().flat_map(to_mat).collect()
}

fn oracle_mmd(rng: &mut ChaCha8Rng) -> f64 {
    let d = 16;
    let (w, b) = (random_matrix(rng, d, d), random_matrix(rng, 1, d));
    let xs: Vec<Tensor> = (0..2).map(|_| random_matrix(rng, 8, d)).collect();
    let ys: Vec<Tensor> = (0..4).map(|_| random_matrix(rng, 8, d)).collect();
    KERNELS
        .iter()
        .map(|&k| (tape_mmd(k, &w, &b, &xs, &ys) - ref_mmd(k, &w, &b, &stacked(&xs), &stacked(&ys))).abs())
        .fold(0.0, f64::max)
}

fn ref_class(score: f64, scheme: Scheme) -> i32 {
    let s = score.clamp(-1.0, 1.0);
    match scheme {
        Scheme::Mosi2 | Scheme::Sims2 => {
            if s < 0.0 {
                -1
            } else {
                1
            }
        }
        Scheme::Sims3 => {
            if s < -0.25 {
                -1
            } else if s < 0.25 {
                0
            } else {
                1
            }
        }
        Scheme::Sims5 => {
            // nearest of the five levels, ties rounding upward
            let levels = [-1.0, -0.5, 0.0, 0.5, 1.0];
            let mut best = 0;
            for (i, l) in levels.iter().enumerate() {
                if (s - l).abs() <= (s - levels[best]).abs() {
                    best = i;
                }
            }
            best as i32 - 2
        }
        Scheme::Mosi7 => {
            let bin = ((s + 1.0) / (2.0 / 7.0)).floor() as i32;
            bin.min(6) - 3
        }
    }
}

fn ref_f1(pred: &[i32], truth: &[i32]) -> f64 {
    let mut classes: Vec<i32> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for c in classes {
        let mut tp = 0.0;
        let mut pp = 0.0;
        let mut support = 0.0;
        for (p, t) in pred.iter().zip(truth) {
            if *p == c && *t == c {
                tp += 1.0;
            }
            if *p == c {
                pp += 1.0;
            }
            if *t == c {
                support += 1.0;
            }
        }
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = tp / support;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1 * support;
    }
    total / truth.len() as f64
}

fn ref_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Returns (exact-metric error, division-metric error).
fn oracle_metrics(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = rng.random_range(20..=64);
    let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let pred: Vec<f64> = truth.iter().map(|t| t * 0.7 + rng.random_range(-0.6..0.6)).collect();
    let mut exact: f64 = 0.0;
    let mut divided: f64 = 0.0;
    for scheme in Scheme::ALL {
        let pc: Vec<i32> = pred.iter().map(|&s| discretize(s, scheme)).collect();
        let tc: Vec<i32> = truth.iter().map(|&s| discretize(s, scheme)).collect();
        let rp: Vec<i32> = pred.iter().map(|&s| ref_class(s, scheme)).collect();
        let rt: Vec<i32> = truth.iter().map(|&s| ref_class(s, scheme)).collect();
        if pc != rp || tc != rt {
            exact = f64::INFINITY;
        }
        let hits = rp.iter().zip(&rt).filter(|(a, b)| a == b).count() as f64;
        divided = divided.max((accuracy(&pc, &tc).unwrap() - hits / n as f64).abs());
        divided = divided.max((f1_weighted(&pc, &tc).unwrap() - ref_f1(&rp, &rt)).abs());
    }
    let mut abs_sum = 0.0;
    for (p, t) in pred.iter().zip(&truth) {
        abs_sum += (p - t).abs();
    }
    divided = divided.max((mean_absolute_error(&pred, &truth).unwrap() - abs_sum / n as f64).abs());
    divided = divided.max((pearson_corr(&pred, &truth).unwrap().r - ref_pearson(&pred, &truth)).abs());
    (exact, divided)
}

fn operator_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances = 25;
    let mut worst = [0.0f64; 5];
    let mut metric_exact: f64 = 0.0;
    let mut metric_div: f64 = 0.0;
    for _ in 0..instances {
        worst[0] = worst[0].max(oracle_matmul(&mut rng));
        worst[1] = worst[1].max(oracle_softmax(&mut rng));
        worst[2] = worst[2].max(oracle_attention(&mut rng));
        worst[3] = worst[3].max(oracle_pair_gate(&mut rng));
        worst[4] = worst[4].max(oracle_mmd(&mut rng));
        let (e, d) = oracle_metrics(&mut rng);
        metric_exact = metric_exact.max(e);
        metric_div = metric_div.max(d);
    }
    let pass = worst.iter().all(|&e| e <= 1e-9) && metric_exact == 0.0 && metric_div <= 1e-6;
    outcome(
        pass,
        format!(
            "{instances} instances each; max |diff| matmul {:.1e}, softmax {:.1e}, attention {:.1e}, pair gate {:.1e}, \
             mmd {:.1e} (tol 1e-9); discretization mismatches {}; accuracy/F1/MAE/corr {:.1e} (tol 1e-6)",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            if metric_exact == 0.0 { "none" } else { "found" },
            metric_div
        ),
    )
}

// ---------------------------------------------------------------------------
// MMD properties

fn mmd_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d = 16;
    let mut violations = 0;
    let mut min_value = f64::INFINITY;
    let mut max_asym: f64 = 0.0;
    let mut max_self: f64 = 0.0;
    for _ in 0..100 {
        let (w, b) = (random_matrix(&mut rng, d, d), random_matrix(&mut rng, 1, d));
        let nx = rng.random_range(1..=3);
        let ny = rng.random_range(1..=3);
        let xs: Vec<Tensor> = (0..nx).map(|_| random_matrix(&mut rng, 8, d)).collect();
        let ys: Vec<Tensor> = (0..ny).map(|_| random_matrix(&mut rng, 8, d)).collect();
        for kernel in KERNELS {
            let xy = tape_mmd(kernel, &w, &b, &xs, &ys);
            let yx = tape_mmd(kernel, &w, &b, &ys, &xs);
            let xx = tape_mmd(kernel, &w, &b, &xs, &xs);
            min_value = min_value.min(xy);
            max_asym = max_asym.max((xy - yx).abs());
            max_self = max_self.max(xx.abs());
            if xy < 0.0 || (xy - yx).abs() > 1e-12 || xx.abs() > 1e-12 {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "100 pairs x {{linear, rbf median, rbf fixed}}: min value {min_value:.2e}, max |xy-yx| {max_asym:.1e}, \
             max |xx| {max_self:.1e}, violations {violations}"
        ),
    )
}

// ---------------------------------------------------------------------------
// AAE adversarial behavior

fn aae_probe() -> Outcome {
    let setup = ProbeSetup {
        input: DESK_SHAPES[1],
        latent: ModalShape::new(8, 16),
        inputs: 256,
        batch: 32,
        aae_steps: 2000,
        probe_steps: 1000,
    };
    let accs: Vec<f64> = (0..5).map(|seed| adversarial_probe_accuracy(&setup, seed)).collect();
    let within = accs.iter().filter(|a| (*a - 0.5).abs() <= 0.15).count();
    outcome(
        within >= 3,
        format!(
            "probe accuracy per seed {:?}; {within}/5 within 0.5 ± 0.15 (need 3)",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// Learning check

fn learning_check(histories: &mut Vec<History>) -> Outcome {
    let mut maes = Vec::new();
    for seed in 0..5u64 {
        let data = generate_synthetic(&SyntheticSpec::desk(32, 0.9, 100 + seed));
        let config = TrainConfig {
            batch_size: 32,
            max_epochs: 300,
            patience: 300,
            seed,
            shuffle_seed: seed,
            ..TrainConfig::default()
        };
        let (ck, h) = train(&config, &data, &data).unwrap();
        maes.push((evaluate(&ck, &data).unwrap().mae, ck.epoch));
        histories.push(h);
    }
    let ok = maes.iter().filter(|(m, _)| *m < 0.05).count();
    outcome(
        ok >= 4,
        format!(
            "train MAE per seed {:?}; {ok}/5 below 0.05 (need 4)",
            maes.iter().map(|(m, e)| format!("{m:.4}@{e}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// Ablation direction

fn ablation_direction() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec::desk(640, 0.5, 2024));
    let (train_set, valid) = data.split_at(512);
    let seeds = [0, 1, 2, 3, 4];
    let table = run_ablation_suite(&TrainConfig::default(), train_set, valid, &seeds).unwrap();
    let rivals = [
        Ablation::NoCgmm,
        Ablation::NoAudio,
        Ablation::NoText,
        Ablation::NoVisual,
    ];
    let wins = table.full_wins(&rivals);
    for &seed in &seeds {
        let line: Vec<String> = Ablation::TABLE
            .iter()
            .map(|&a| format!("{}={:.4}", a.tag(), table.run(a, seed).unwrap().best_val_mae))
            .collect();
        println!("     seed {seed}: {}", line.join(" "));
    }
    for row in table.to_text().lines() {
        println!("     {row}");
    }
    let over_no_aae = table.full_wins(&[Ablation::NoAae]);
    outcome(
        wins >= 3,
        format!(
            "full <= mcihn-2 and every bimodal variant on {wins}/5 seeds (need 3); full <= mcihn-1 on {over_no_aae}/5 (reported only)"
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism, persistence and the loss identity

fn determinism(histories: &mut Vec<History>) -> Outcome {
    let data = generate_synthetic(&SyntheticSpec::desk(48, 0.6, 31));
    let config = TrainConfig {
        batch_size: 8,
        max_epochs: 5,
        seed: 4,
        shuffle_seed: 9,
        ..TrainConfig::default()
    };
    let (ck_a, h_a) = train(&config, &data[..32], &data[32..]).unwrap();
    let (ck_b, h_b) = train(&config, &data[..32], &data[32..]).unwrap();
    let same_history = h_a == h_b && h_a.steps_jsonl() == h_b.steps_jsonl() && h_a.epochs_jsonl() == h_b.epochs_jsonl();
    let same_model = ck_a.model.store.bit_eq(&ck_b.model.store);

    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("checkpoint.json");
    ck_a.save(&ck_path).unwrap();
    let loaded = Checkpoint::load(&ck_path).unwrap();
    let resaved = dir.path().join("resaved.json");
    loaded.save(&resaved).unwrap();
    let ck_round_trip = loaded.model.store.bit_eq(&ck_a.model.store)
        && loaded.best_val_mae.to_bits() == ck_a.best_val_mae.to_bits()
        && std::fs::read(&ck_path).unwrap() == std::fs::read(&resaved).unwrap();

    let file = dir.path().join("data.mcih");
    let header = DatasetHeader::new(DESK_SHAPES, data.len(), LabelScheme::Mosi7);
    write_feature_file(&file, &header, &data).unwrap();
    let (h, back) = read_feature_file(&file).unwrap();
    let copy = dir.path().join("copy.mcih");
    write_feature_file(&copy, &h, &back).unwrap();
    let file_round_trip = h == header
        && back.len() == data.len()
        && back
            .iter()
            .zip(&data)
            .all(|(a, b): (&ModalSample, &ModalSample)| a.bit_eq(b))
        && std::fs::read(&file).unwrap() == std::fs::read(&copy).unwrap();

    for ablation in Ablation::TABLE {
        let (_, h) = train(
            &TrainConfig {
                ablation,
                max_epochs: 2,
                ..config.clone()
            },
            &data[..32],
            &data[32..],
        )
        .unwrap();
        histories.push(h);
    }
    histories.push(h_a);
    outcome(
        same_history && same_model && ck_round_trip && file_round_trip,
        format!(
            "history identical: {same_history}; weights identical: {same_model}; checkpoint round trip bitwise: \
             {ck_round_trip}; feature file round trip bitwise: {file_round_trip}"
        ),
    )
}

fn loss_identity(histories: &[History]) -> Outcome {
    let mut steps = 0;
    let mut broken = 0;
    for h in histories {
        for s in &h.steps {
            steps += 1;
            if s.l_combined != s.l_adp + s.l_mul {
                broken += 1;
            }
        }
        for e in &h.epochs {
            if e.l_combined != e.l_adp + e.l_mul {
                broken += 1;
            }
        }
    }
    outcome(
        broken == 0 && steps > 0,
        format!(
            "{steps} logged steps over {} runs; {broken} records violate combined == adp + mul",
            histories.len()
        ),
    )
}

fn main() -> ExitCode {
    println!(
        "NOT REPRODUCIBLE: the published benchmark accuracies (CH-SIMS Acc-2 82.8, CMU-MOSI Acc-2 84.4) and the \
         published ablation numbers need the real datasets and pretrained CLIP/BERT/Wav2Vec features; the \
         property-based criteria below replace them."
    );
    let mut histories = Vec::new();
    let results = [
        run("gradient integrity", secs(60 * 3), gradient_integrity),
        run("operator oracles", secs(30), operator_oracles),
        run("MMD properties", secs(10), mmd_properties),
        run("AAE adversarial behavior", secs(300), aae_probe),
        run("learning check", secs(300), || learning_check(&mut histories)),
        run("determinism and persistence", secs(120), || determinism(&mut histories)),
        run("loss identity", secs(10), || loss_identity(&histories)),
        run("ablation direction", secs(1800), ablation_direction),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
