//! Two-stage compatible training: a backward-compatible encoder stage and a
//! forward-compatible upgrade stage, plus multi-generation orchestration.

mod optim;
mod sequence;

pub use optim::{lr_at, sgd_step, OptimizerConfig, OptimizerState, ScheduleConfig, TrainConfig};
pub use sequence::{
    run_sequence, GenerationReport, GenerationSpec, SequenceEvent, SequenceOutcome, SequenceReport,
    SequenceVariant, SequentialConfig,
};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Mode, Tape, Tensor, Var};
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::losses::{bct_loss, fct_loss, CompKind, LossConfig, OldReference};
use crate::models::{ArcFaceHead, EncoderConfig, EncoderModel, UpgradeConfig, UpgradeModule};
use crate::rng::{stream, tags};

/// Per-epoch training record. Loss columns are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub base: f64,
    pub comp: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,base,comp";

    pub fn csv_row(&self) -> String {
        let comp = self.comp.map(|c| format!("{c:.17e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{:.17e},{:.17e},{comp}",
            self.epoch, self.lr, self.loss, self.base
        )
    }
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

/// Shuffled minibatches for one epoch. A trailing single-sample batch is
/// dropped because batchnorm needs at least two rows.
fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn collect_grads(grads: &mut crate::autodiff::Gradients, vars: &[Var], tape: &Tape) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let t = tape.value(v);
                Tensor::zeros(t.rows(), t.cols())
            })
        })
        .collect()
}

fn check_loss(value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            epoch,
            param: "loss".into(),
            norm: value.abs(),
        })
    }
}

/// Frozen previous generation used as the compatibility reference.
#[derive(Clone, Copy, Debug)]
pub struct OldGeneration<'a> {
    pub encoder: &'a EncoderModel,
    pub head: &'a ArcFaceHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BctOutcome {
    pub encoder: EncoderModel,
    pub head: ArcFaceHead,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh encoder and head on `data` with the backward-compatible
/// loss against `old`. With `λ = 0` (or no old generation) this is plain
/// ArcFace training, and `old` is never touched.
///
/// Old-model features are computed once up front in eval mode; the old
/// model is frozen, so this equals recomputing them per batch.
pub fn train_bct(
    data: &SyntheticDataset,
    old: Option<OldGeneration<'_>>,
    encoder_cfg: &EncoderConfig,
    loss: &LossConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<BctOutcome> {
    loss.validate()?;
    train.validate()?;
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    if encoder_cfg.input_dim != data.input_dim() {
        return Err(Error::Config(format!(
            "encoder expects {} inputs, data has {}",
            encoder_cfg.input_dim,
            data.input_dim()
        )));
    }
    let compat = loss.lambda > 0.0;
    let old = match (compat, old) {
        (true, None) => return Err(Error::Config("λ > 0 needs an old generation".into())),
        (true, Some(o)) => Some(o),
        (false, _) => None,
    };
    let old_features = match old {
        Some(o) if loss.comp_kind != CompKind::Classification => {
            if o.encoder.embed_dim() != encoder_cfg.embed_dim {
                return Err(Error::Config(format!(
                    "{} compatibility needs equal embedding dims, old {} vs new {}",
                    loss.comp_kind,
                    o.encoder.embed_dim(),
                    encoder_cfg.embed_dim
                )));
            }
            Some(o.encoder.embed(&data.inputs)?)
        }
        _ => None,
    };

    let mut encoder = EncoderModel::new(encoder_cfg.clone(), seed)?;
    let mut head = ArcFaceHead::new(
        data.num_classes,
        encoder_cfg.embed_dim,
        loss.scale,
        loss.margin,
        seed,
    )?;
    let mut names: Vec<String> = encoder
        .mlp()
        .parameter_names()
        .into_iter()
        .map(|n| format!("encoder.{n}"))
        .collect();
    names.push("head.weight".into());
    let mut opt = {
        let mut ps = encoder.mlp().parameters();
        ps.push(&head.weight);
        OptimizerState::new(train.optimizer.clone(), &ps)
    };

    let mut rng = stream(seed, tags::SHUFFLE);
    let epochs = train.schedule.total_epochs;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = epoch_batches(data.len(), train.batch_size, &mut rng);
        let steps = batches.len();
        let (mut sum, mut sum_base, mut sum_comp, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            lr = lr_at(
                &train.schedule,
                (epoch as f64 + b as f64 / steps as f64) / epochs as f64,
            );
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let mut vars = encoder.bind(&mut tape, true);
            let w = head.bind(&mut tape, true);
            vars.push(w);
            let x = tape.constant(data.inputs.select_rows(idx));
            let emb = encoder.forward(&mut tape, &vars[..vars.len() - 1], x, Mode::Train)?;
            let features = old_features
                .as_ref()
                .map(|f| tape.constant(f.select_rows(idx)));
            let reference = OldReference {
                features,
                head: old.map(|o| o.head),
            };
            let terms = bct_loss(&mut tape, emb, &labels, w, reference, loss)?;
            let value = tape.value(terms.total).item();
            check_loss(value, epoch + 1)?;
            sum += value;
            sum_base += tape.value(terms.base).item();
            if let Some(c) = terms.comp {
                sum_comp += tape.value(c.loss).item();
            }
            let mut grads = tape.backward(terms.total)?;
            let g = collect_grads(&mut grads, &vars, &tape);
            let mut params = encoder.mlp_mut().parameters_mut();
            params.push(&mut head.weight);
            sgd_step(&mut opt, &mut params, &g, &names, lr, epoch + 1)?;
        }
        let n = steps as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sum / n,
            base: sum_base / n,
            comp: compat.then(|| sum_comp / n),
        });
    }
    Ok(BctOutcome { encoder, head, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FctOutcome {
    pub psi: UpgradeModule,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh upgrade module mapping `inputs` (old-space features) onto
/// `targets` (frozen new-model embeddings of the same samples).
pub fn train_fct(
    inputs: &Tensor,
    targets: &Tensor,
    psi_cfg: &UpgradeConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<FctOutcome> {
    train.validate()?;
    if inputs.cols() != psi_cfg.input_dim || targets.cols() != psi_cfg.output_dim {
        return Err(Error::Config(format!(
            "upgrade module maps {} → {}, features are {} → {}",
            psi_cfg.input_dim,
            psi_cfg.output_dim,
            inputs.cols(),
            targets.cols()
        )));
    }
    if inputs.rows() != targets.rows() || inputs.rows() < 2 {
        return Err(Error::Config(format!(
            "need matching feature rows (≥ 2), got {} and {}",
            inputs.rows(),
            targets.rows()
        )));
    }
    let mut psi = UpgradeModule::new(psi_cfg.clone(), seed)?;
    let names: Vec<String> = psi
        .mlp()
        .map(|m| {
            m.parameter_names()
                .into_iter()
                .map(|n| format!("psi.{n}"))
                .collect()
        })
        .unwrap_or_default();
    let mut opt = OptimizerState::new(
        train.optimizer.clone(),
        &psi.mlp().map(|m| m.parameters()).unwrap_or_default(),
    );
    let mut rng = stream(seed, tags::SHUFFLE);
    let epochs = train.schedule.total_epochs;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = epoch_batches(inputs.rows(), train.batch_size, &mut rng);
        let steps = batches.len();
        let (mut sum, mut lr) = (0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            lr = lr_at(
                &train.schedule,
                (epoch as f64 + b as f64 / steps as f64) / epochs as f64,
            );
            let mut tape = Tape::new();
            let vars = psi.bind(&mut tape, true);
            let x = tape.constant(inputs.select_rows(idx));
            let up = psi.forward(&mut tape, &vars, x, Mode::Train)?;
            let target = tape.constant(targets.select_rows(idx));
            let l = fct_loss(&mut tape, up, target)?;
            let value = tape.value(l).item();
            check_loss(value, epoch + 1)?;
            sum += value;
            let mut grads = tape.backward(l)?;
            let g = collect_grads(&mut grads, &vars, &tape);
            if let Some(m) = psi.mlp_mut() {
                sgd_step(&mut opt, &mut m.parameters_mut(), &g, &names, lr, epoch + 1)?;
            }
        }
        let mean = sum / steps as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            loss: mean,
            base: mean,
            comp: None,
        });
    }
    Ok(FctOutcome { psi, log })
}

/// Mean row-wise cosine between `ψ(inputs)` and `targets`.
pub fn mean_alignment(psi: &UpgradeModule, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
    let up = psi.upgrade(inputs)?;
    if up.shape() != targets.shape() {
        return Err(Error::shape(
            "mean_alignment",
            &up.shape(),
            &targets.shape(),
        ));
    }
    let total: f64 = (0..up.rows())
        .map(|i| dot(up.row_slice(i), targets.row_slice(i)))
        .sum();
    Ok(total / up.rows().max(1) as f64)
}

/// Upgrade input for generation `i`: the previous features for `i = 1`,
/// otherwise `normalize((1 − m)·F_{i−1} + m·F_{i−2})`. The limits `m = 0`
/// and `m = 1` return the respective generation unchanged.
pub fn momentum_input(prev: &Tensor, prev2: Option<&Tensor>, i: usize, m: f64) -> Result<Tensor> {
    if i == 0 {
        return Err(Error::Config("generation 0 has no upgrade input".into()));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!(
            "momentum m must lie in [0, 1], got {m}"
        )));
    }
    if i == 1 {
        return Ok(prev.clone());
    }
    let older = prev2.ok_or_else(|| {
        Error::Contract(format!(
            "generation {i} momentum input needs generation {} features retained",
            i - 2
        ))
    })?;
    if older.shape() != prev.shape() {
        return Err(Error::shape(
            "momentum_input",
            &prev.shape(),
            &older.shape(),
        ));
    }
    if m == 0.0 {
        return Ok(prev.clone());
    }
    if m == 1.0 {
        return Ok(older.clone());
    }
    let mixed = Tensor::new(
        prev.rows(),
        prev.cols(),
        prev.data()
            .iter()
            .zip(older.data())
            .map(|(a, b)| (1.0 - m) * a + m * b)
            .collect(),
    )?;
    mixed.l2_normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataParams};

    fn tiny() -> SyntheticDataset {
        let params = DataParams {
            num_classes: 6,
            samples_per_class: 12,
            input_dim: 8,
            noise_sigma: 0.3,
        };
        generate(&params, 3).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig::new(0.1, 4, 16)
    }

    #[test]
    fn momentum_input_examples() {
        let f1 = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let f0 = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let mixed = momentum_input(&f1, Some(&f0), 2, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mixed.get(0, 0) - h).abs() < 1e-12 && (mixed.get(0, 1) - h).abs() < 1e-12);
        assert_eq!(momentum_input(&f1, Some(&f0), 2, 0.0).unwrap(), f1);
        assert_eq!(momentum_input(&f1, Some(&f0), 2, 1.0).unwrap(), f0);
        assert_eq!(momentum_input(&f1, None, 1, 0.5).unwrap(), f1);
        assert!(momentum_input(&f1, None, 2, 0.5).is_err());
        assert!(momentum_input(&f1, Some(&f0), 0, 0.5).is_err());
        assert!(momentum_input(&f1, Some(&f0), 2, 1.5).is_err());
    }

    #[test]
    fn bct_loss_decreases_and_lambda_zero_ignores_old() {
        let data = tiny();
        let cfg = EncoderConfig::mlp(8, 16, 4);
        let plain = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let a = train_bct(&data, None, &cfg, &plain, &quick(), 5).unwrap();
        assert!(a.log.last().unwrap().loss < a.log[0].loss);
        let b = train_bct(
            &data,
            Some(OldGeneration {
                encoder: &a.encoder,
                head: &a.head,
            }),
            &cfg,
            &plain,
            &quick(),
            5,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(train_bct(&data, None, &cfg, &LossConfig::default(), &quick(), 5).is_err());
    }

    #[test]
    fn fct_improves_alignment_and_checks_dims() {
        let mut rng = stream(1, 99);
        let inputs = Tensor::new(
            64,
            4,
            (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
        .l2_normalized()
        .unwrap();
        let cfg = UpgradeConfig {
            depth: 1,
            hidden_dim: 16,
            input_dim: 4,
            output_dim: 4,
        };
        let before = mean_alignment(
            &UpgradeModule::new(cfg.clone(), 2).unwrap(),
            &inputs,
            &inputs,
        )
        .unwrap();
        let out = train_fct(&inputs, &inputs, &cfg, &TrainConfig::new(1.0, 10, 16), 2).unwrap();
        let after = mean_alignment(&out.psi, &inputs, &inputs).unwrap();
        assert!(after > before, "{before} → {after}");
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
        let wrong = UpgradeConfig {
            input_dim: 5,
            ..cfg
        };
        assert!(matches!(
            train_fct(&inputs, &inputs, &wrong, &quick(), 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn epoch_log_csv_shape() {
        let rows = [EpochLog {
            epoch: 1,
            lr: 0.5,
            loss: 2.0,
            base: 1.5,
            comp: None,
        }];
        let csv = epoch_log_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EpochLog::CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 5);
    }
}
