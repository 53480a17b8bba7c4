//! Oracles: finite-difference gradient suites over every loss and block, and
//! a brute-force mAP scorer that shares no code with the retrieval module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::autodiff::{Mode, RunningStats, Tape, Tensor, Var};
use crate::data::{generate, make_eval_set, DataParams};
use crate::error::Result;
use crate::losses::{
    arcface_loss, bct_loss, classification_comp, contrastive_comp, fct_loss, regression_comp,
    CompKind, LossConfig, OldReference,
};
use crate::models::{ArcFaceHead, EncoderConfig, EncoderModel, UpgradeConfig, UpgradeModule};
use crate::par::{map_range, Exec};
use crate::retrieval::{evaluate_notations, mean_average_precision};
use crate::rng::{derive_seed, stream, tags};
use crate::training::{momentum_input, train_bct, OldGeneration, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuite {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

pub const GRAD_SUITES: [&str; 15] = [
    "linear",
    "relu",
    "batchnorm-train",
    "batchnorm-eval",
    "l2-normalize",
    "encoder",
    "upgrade-module",
    "arcface",
    "regression-comp",
    "classification-comp",
    "contrastive-comp",
    "fct",
    "bct-regression",
    "bct-classification",
    "bct-contrastive",
];

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Entries bounded away from zero so relu kinks sit far outside the FD step.
fn off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Parameters plus noise, so zero biases cannot collapse a row to exactly zero.
fn jittered(rng: &mut ChaCha8Rng, params: Vec<&Tensor>) -> Vec<Tensor> {
    params
        .into_iter()
        .map(|p| {
            let noise = gaussian(rng, p.rows(), p.cols(), 0.3);
            let data = p
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(p.rows(), p.cols(), data).expect("shape")
        })
        .collect()
}

/// Relu inputs closer to zero than this make an instance non-differentiable
/// at finite-difference resolution.
const KINK_MARGIN: f64 = 1e-3;

/// Redraws inputs until no relu input lies within [`KINK_MARGIN`] of zero.
fn away_from_kinks(
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<(Vec<Tensor>, Option<f64>)>,
) -> Result<Vec<Tensor>> {
    loop {
        let (inputs, margin) = draw(rng)?;
        if margin.is_none_or(|m| m > KINK_MARGIN) {
            return Ok(inputs);
        }
    }
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Labels where every class that appears has at least two members.
fn paired_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut out = labels(rng, n, classes);
    out[1] = out[0];
    out
}

fn unit(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.l2_normalize(v)
}

fn instance(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(3..7usize);
    let d = rng.random_range(2..6usize);
    let c = rng.random_range(2..5usize);
    let scale = rng.random_range(4.0..30.0);
    let margin = rng.random_range(0.0..0.5);
    let err = match name {
        "linear" => {
            let o = rng.random_range(1..5usize);
            let inputs = [
                gaussian(rng, n, d, 1.0),
                gaussian(rng, d, o, 1.0),
                gaussian(rng, 1, o, 1.0),
            ];
            check_gradients(&inputs, DEFAULT_STEP, |t, v| {
                let z = t.matmul(v[0], v[1])?;
                let y = t.add(z, v[2])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })?
        }
        "relu" => {
            let w = gaussian(rng, n, d, 1.0);
            check_gradients(&[off_zero(rng, n, d)], DEFAULT_STEP, move |t, v| {
                let r = t.relu(v[0]);
                let k = t.constant(w.clone());
                let p = t.mul(r, k)?;
                Ok(t.sum(p))
            })?
        }
        "batchnorm-train" | "batchnorm-eval" => {
            let mode = if name == "batchnorm-train" {
                Mode::Train
            } else {
                Mode::Eval
            };
            let w = gaussian(rng, n, d, 1.0);
            let mut stats = RunningStats::new(d);
            stats.mean = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            stats.var = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
            let inputs = [
                gaussian(rng, n, d, 1.0),
                gaussian(rng, 1, d, 1.0),
                gaussian(rng, 1, d, 1.0),
            ];
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let mut s = stats.clone();
                let y = t.batchnorm(v[0], v[1], v[2], &mut s, mode)?;
                let k = t.constant(w.clone());
                let p = t.mul(y, k)?;
                Ok(t.sum(p))
            })?
        }
        "l2-normalize" => {
            let w = gaussian(rng, n, d, 1.0);
            check_gradients(&[gaussian(rng, n, d, 1.0)], DEFAULT_STEP, move |t, v| {
                let y = unit(t, v[0])?;
                let k = t.constant(w.clone());
                let p = t.mul(y, k)?;
                Ok(t.sum(p))
            })?
        }
        "encoder" => {
            let enc = EncoderModel::new(EncoderConfig::mlp(d, 5, 3), rng.random())?;
            let w = gaussian(rng, n, 3, 1.0);
            let inputs = away_from_kinks(rng, |rng| {
                let mut inputs = vec![gaussian(rng, n, d, 1.0)];
                inputs.extend(jittered(rng, enc.mlp().parameters()));
                let mut t = Tape::new();
                let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                enc.clone().forward(&mut t, &v[1..], v[0], Mode::Train)?;
                Ok((inputs, t.relu_margin()))
            })?;
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let mut m = enc.clone();
                let y = m.forward(t, &v[1..], v[0], Mode::Train)?;
                let k = t.constant(w.clone());
                let p = t.mul(y, k)?;
                Ok(t.sum(p))
            })?
        }
        "upgrade-module" => {
            let cfg = UpgradeConfig {
                depth: rng.random_range(1..3usize),
                hidden_dim: 4,
                input_dim: d,
                output_dim: 3,
            };
            let psi = UpgradeModule::new(cfg, rng.random())?;
            let w = gaussian(rng, n, 3, 1.0);
            let inputs = away_from_kinks(rng, |rng| {
                let mut inputs = vec![gaussian(rng, n, d, 1.0)];
                inputs.extend(jittered(rng, psi.mlp().expect("mlp").parameters()));
                let mut t = Tape::new();
                let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                psi.clone().forward(&mut t, &v[1..], v[0], Mode::Train)?;
                Ok((inputs, t.relu_margin()))
            })?;
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let mut m = psi.clone();
                let y = m.forward(t, &v[1..], v[0], Mode::Train)?;
                let k = t.constant(w.clone());
                let p = t.mul(y, k)?;
                Ok(t.sum(p))
            })?
        }
        "arcface" => {
            let y = labels(rng, n, c);
            let inputs = [gaussian(rng, n, d, 1.0), gaussian(rng, c, d, 1.0)];
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let e = unit(t, v[0])?;
                arcface_loss(t, e, &y, v[1], scale, margin)
            })?
        }
        "regression-comp" | "fct" => {
            let fct = name == "fct";
            let inputs = [gaussian(rng, n, d, 1.0), gaussian(rng, n, d, 1.0)];
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let (a, b) = (unit(t, v[0])?, unit(t, v[1])?);
                if fct {
                    fct_loss(t, a, b)
                } else {
                    regression_comp(t, a, b)
                }
            })?
        }
        "classification-comp" => {
            // one label beyond the old classes exercises the exclusion path
            let mut y = labels(rng, n, c);
            y[n - 1] = c;
            let head = ArcFaceHead::new(c, d, scale, margin, rng.random())?;
            check_gradients(&[gaussian(rng, n, d, 1.0)], DEFAULT_STEP, move |t, v| {
                let e = unit(t, v[0])?;
                Ok(classification_comp(t, e, &y, &head)?.loss)
            })?
        }
        "contrastive-comp" => {
            let y = paired_labels(rng, n, c);
            let tau = rng.random_range(0.1..1.0);
            let inputs = [gaussian(rng, n, d, 1.0), gaussian(rng, n, d, 1.0)];
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let (a, b) = (unit(t, v[0])?, unit(t, v[1])?);
                Ok(contrastive_comp(t, a, b, &y, tau)?.loss)
            })?
        }
        _ => {
            let comp_kind = match name {
                "bct-regression" => CompKind::Regression,
                "bct-classification" => CompKind::Classification,
                _ => CompKind::Contrastive,
            };
            let cfg = LossConfig {
                lambda: rng.random_range(0.1..5.0),
                comp_kind,
                tau: rng.random_range(0.1..1.0),
                scale,
                margin,
            };
            let y = paired_labels(rng, n, c);
            let old_head = ArcFaceHead::new(c, d, scale, margin, rng.random())?;
            let old_feat = gaussian(rng, n, d, 1.0).l2_normalized()?;
            let inputs = [gaussian(rng, n, d, 1.0), gaussian(rng, c, d, 1.0)];
            check_gradients(&inputs, DEFAULT_STEP, move |t, v| {
                let e = unit(t, v[0])?;
                let f = t.constant(old_feat.clone());
                let old = OldReference {
                    features: Some(f),
                    head: Some(&old_head),
                };
                Ok(bct_loss(t, e, &y, v[1], old, &cfg)?.total)
            })?
        }
    };
    Ok(err.max_rel_err)
}

/// Runs `instances` random instances of every suite in [`GRAD_SUITES`].
pub fn gradient_suites(seed: u64, instances: usize, exec: Exec) -> Result<Vec<GradSuite>> {
    let results = map_range(exec, GRAD_SUITES.len(), |s| -> Result<GradSuite> {
        let name = GRAD_SUITES[s];
        let mut rng = stream(derive_seed(seed, s as u64), tags::VERIFY);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(instance(name, &mut rng)?);
        }
        Ok(GradSuite {
            name,
            instances,
            max_rel_err: worst,
        })
    });
    results.into_iter().collect()
}

/// mAP@k by full cosine scoring, a stable sort and the textbook AP sum.
/// Ties go to the smaller gallery id.
pub fn brute_force_map(
    queries: &Tensor,
    query_labels: &[usize],
    gallery_ids: &[u64],
    gallery_labels: &[usize],
    gallery: &Tensor,
    k: usize,
) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (qi, &y) in query_labels.iter().enumerate() {
        let q = queries.row_slice(qi);
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut order: Vec<(f64, u64, usize)> = (0..gallery.rows())
            .map(|g| {
                let s: f64 = q
                    .iter()
                    .zip(gallery.row_slice(g))
                    .map(|(a, b)| (a / qn) * b)
                    .sum();
                (s, gallery_ids[g], gallery_labels[g])
            })
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
        let positives = gallery_labels.iter().filter(|&&l| l == y).count();
        if positives == 0 {
            continue;
        }
        let mut ap = 0.0;
        for i in 0..k.min(order.len()) {
            if order[i].2 == y {
                let hits = order[..=i].iter().filter(|e| e.2 == y).count();
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / positives.min(k) as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Largest |module − brute force| over random instances with at most 50
/// gallery items. Some gallery rows are duplicated to force score ties.
pub fn map_oracle_gap(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = stream(seed, tags::VERIFY);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.random_range(2..8usize);
        let classes = rng.random_range(1..6usize);
        let g = rng.random_range(1..=50usize);
        let q = rng.random_range(1..12usize);
        let mut gallery = gaussian(&mut rng, g, dim, 1.0).l2_normalized()?;
        for r in 1..g {
            if rng.random_bool(0.2) {
                let src = rng.random_range(0..r);
                let row = gallery.row_slice(src).to_vec();
                gallery.row_slice_mut(r).copy_from_slice(&row);
            }
        }
        let mut ids: Vec<u64> = (0..g as u64).map(|i| i * 3 + 7).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let gallery_labels = labels(&mut rng, g, classes);
        let spread = rng.random_range(0.2..3.0);
        let queries = gaussian(&mut rng, q, dim, spread);
        let query_labels = labels(&mut rng, q, classes + 1);
        let k = rng.random_range(1..=g);
        let module = mean_average_precision(
            &queries,
            &query_labels,
            &ids,
            &gallery_labels,
            &gallery,
            k,
            Exec::Sequential,
        )?;
        let oracle = brute_force_map(&queries, &query_labels, &ids, &gallery_labels, &gallery, k);
        worst = worst.max((module.map - oracle).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// Degenerate settings that must collapse onto simpler computations.
pub fn reduction_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, tags::VERIFY);
    let mut out = Vec::new();

    // λ = 0: same value and gradients as plain ArcFace, for every kind
    let (n, d, c) = (8, 5, 4);
    let y = paired_labels(&mut rng, n, c);
    let emb = gaussian(&mut rng, n, d, 1.0).l2_normalized()?;
    let old_feat = gaussian(&mut rng, n, d, 1.0).l2_normalized()?;
    let w = gaussian(&mut rng, c, d, 1.0);
    let head = ArcFaceHead::new(c, d, 30.0, 0.3, rng.random())?;
    let mut same = true;
    for comp_kind in [
        CompKind::Regression,
        CompKind::Classification,
        CompKind::Contrastive,
    ] {
        let cfg = LossConfig {
            lambda: 0.0,
            comp_kind,
            ..LossConfig::default()
        };
        let mut t1 = Tape::new();
        let (e1, w1) = (t1.param(emb.clone()), t1.param(w.clone()));
        let f = t1.constant(old_feat.clone());
        let old = OldReference {
            features: Some(f),
            head: Some(&head),
        };
        let total = bct_loss(&mut t1, e1, &y, w1, old, &cfg)?.total;
        let g1 = t1.backward(total)?;
        let mut t2 = Tape::new();
        let (e2, w2) = (t2.param(emb.clone()), t2.param(w.clone()));
        let base = arcface_loss(&mut t2, e2, &y, w2, cfg.scale, cfg.margin)?;
        let g2 = t2.backward(base)?;
        same &= t1.value(total).item().to_bits() == t2.value(base).item().to_bits()
            && g1.get(e1) == g2.get(e2)
            && g1.get(w1) == g2.get(w2);
    }
    out.push(check(
        "bct(lambda=0) == arcface",
        same,
        "value and gradients bit-identical".into(),
    ));

    // λ = 0 training against an old model replays plain training exactly
    let data = generate(
        &DataParams {
            num_classes: 6,
            samples_per_class: 12,
            input_dim: 6,
            noise_sigma: 0.2,
        },
        seed,
    )?;
    let enc = EncoderConfig::mlp(6, 12, 6);
    let train = TrainConfig::new(0.1, 3, 16);
    let plain = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let old = train_bct(&data, None, &enc, &plain, &train, derive_seed(seed, 1))?;
    let alone = train_bct(&data, None, &enc, &plain, &train, derive_seed(seed, 2))?;
    let with_old = train_bct(
        &data,
        Some(OldGeneration {
            encoder: &old.encoder,
            head: &old.head,
        }),
        &enc,
        &plain,
        &train,
        derive_seed(seed, 2),
    )?;
    out.push(check(
        "lambda=0 training trace",
        with_old.log == alone.log
            && with_old.encoder == alone.encoder
            && with_old.head == alone.head,
        format!("{} epochs compared", alone.log.len()),
    ));

    // m = 0 ArcFace against a hand-rolled cosine softmax
    let s = 16.0;
    let mut t = Tape::new();
    let (e, wv) = (t.param(emb.clone()), t.param(w.clone()));
    let loss = arcface_loss(&mut t, e, &y, wv, s, 0.0)?;
    let cos = emb.matmul_nt(&w.l2_normalized()?)?;
    let expected = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let row = cos.row_slice(i);
            row.iter().map(|v| (s * v).exp()).sum::<f64>().ln() - s * row[yi]
        })
        .sum::<f64>()
        / n as f64;
    let diff = (t.value(loss).item() - expected).abs();
    out.push(check(
        "arcface(m=0) == cosine softmax",
        diff < 1e-10,
        format!("diff {diff:.2e}"),
    ));

    // identity ψ leaves the backward-compatible score unchanged
    let eval = make_eval_set(&data.prototypes, 24, 4, 0.2, derive_seed(seed, 3))?;
    let psi = UpgradeModule::identity(6, 6)?;
    let notes = evaluate_notations(
        &old.encoder,
        &alone.encoder,
        Some(&psi),
        &eval,
        5,
        Exec::Sequential,
    )?;
    let fct = notes.fct.unwrap_or(f64::NAN);
    out.push(check(
        "identity psi: M_FCT == M_BCT",
        fct.to_bits() == notes.bct.to_bits(),
        format!("M_BCT {:.6} M_FCT {:.6}", notes.bct, fct),
    ));

    // momentum limits
    let prev = gaussian(&mut rng, n, d, 1.0).l2_normalized()?;
    let prev2 = gaussian(&mut rng, n, d, 1.0).l2_normalized()?;
    let m0 = momentum_input(&prev, Some(&prev2), 2, 0.0)? == prev;
    let m1 = momentum_input(&prev, Some(&prev2), 2, 1.0)? == prev2;
    out.push(check(
        "momentum m=0 / m=1",
        m0 && m1,
        format!("m=0 {m0}, m=1 {m1}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_handles_a_hand_worked_case() {
        let gallery = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let queries = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        // ranking: id0 (1.0, label 0), id2 (0.6, label 0), id1 (0.0, label 1)
        let m = brute_force_map(&queries, &[0], &[0, 1, 2], &[0, 1, 0], &gallery, 3);
        assert_eq!(m, 1.0);
        let m = brute_force_map(&queries, &[1], &[0, 1, 2], &[0, 1, 0], &gallery, 3);
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
    }
}
