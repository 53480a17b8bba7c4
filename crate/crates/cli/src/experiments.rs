//! Experiment drivers behind the subcommands. Seeds and sweep points run as
//! independent tasks; rows come back in a fixed order regardless of
//! scheduling.

use bict::autodiff::Tensor;
use bict::data::{generate, make_eval_set, DataParams, EvalSet, SyntheticDataset};
use bict::models::{EncoderModel, UpgradeModule};
use bict::par::{map_range, Exec};
use bict::retrieval::{
    evaluate_notations, hot_refresh, Gallery, MetricReport, Notations, RefreshPoint,
};
use bict::rng::derive_seed;
use bict::training::{
    mean_alignment, run_sequence, train_bct, train_fct, BctOutcome, FctOutcome, GenerationSpec,
    OldGeneration, SequenceOutcome, SequenceVariant, SequentialConfig,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliResult;

/// Stream ids for seeds derived from the run seed.
pub mod streams {
    pub const EVAL_SET: u64 = 500;
    pub const OLD_MODEL: u64 = 1000;
    pub const NEW_MODEL: u64 = 1001;
    pub const PSI: u64 = 2001;
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn collect<T>(results: Vec<CliResult<T>>) -> CliResult<Vec<T>> {
    results.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub data: SyntheticDataset,
    pub eval: EvalSet,
}

pub fn data_params(cfg: &ExperimentConfig) -> DataParams {
    DataParams {
        num_classes: cfg.data.num_classes,
        samples_per_class: cfg.data.samples_per_class,
        input_dim: cfg.data.input_dim,
        noise_sigma: cfg.data.noise_sigma,
    }
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> CliResult<Prepared> {
    let data = generate(&data_params(cfg), seed)?;
    let eval = make_eval_set(
        &data.prototypes,
        cfg.data.num_queries,
        cfg.data.gallery_per_class,
        cfg.data.noise_sigma,
        derive_seed(seed, streams::EVAL_SET),
    )?;
    Ok(Prepared { seed, data, eval })
}

pub fn train_old(cfg: &ExperimentConfig, prep: &Prepared) -> CliResult<BctOutcome> {
    let d = prep.data.split(cfg.split.mode, cfg.split.old_fraction)?;
    Ok(train_bct(
        &d,
        None,
        &cfg.old_encoder(),
        &cfg.old_loss(),
        &cfg.train.to_train_config(),
        derive_seed(prep.seed, streams::OLD_MODEL),
    )?)
}

pub fn train_new(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    old: &BctOutcome,
    lambda: f64,
) -> CliResult<BctOutcome> {
    let d = prep.data.split(cfg.split.mode, cfg.split.new_fraction)?;
    Ok(train_bct(
        &d,
        Some(OldGeneration {
            encoder: &old.encoder,
            head: &old.head,
        }),
        &cfg.new_encoder(),
        &cfg.new_loss(lambda),
        &cfg.train.to_train_config(),
        derive_seed(prep.seed, streams::NEW_MODEL),
    )?)
}

/// ψ trained on the new allocation: old-model features in, frozen
/// new-model features as targets.
pub fn train_psi(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    old: &EncoderModel,
    new: &EncoderModel,
    hidden: usize,
) -> CliResult<FctOutcome> {
    let d = prep.data.split(cfg.split.mode, cfg.split.new_fraction)?;
    Ok(train_fct(
        &old.embed(&d.inputs)?,
        &new.embed(&d.inputs)?,
        &cfg.psi_config(hidden),
        &cfg.psi_train.to_train_config(),
        derive_seed(prep.seed, streams::PSI),
    )?)
}

/// Mean cosine between ψ(old) and new embeddings on the eval gallery, which
/// no model saw during training.
pub fn held_out_alignment(
    prep: &Prepared,
    old: &EncoderModel,
    new: &EncoderModel,
    psi: &UpgradeModule,
) -> CliResult<f64> {
    Ok(mean_alignment(
        psi,
        &old.embed(&prep.eval.gallery)?,
        &new.embed(&prep.eval.gallery)?,
    )?)
}

pub struct UpgradeRun {
    pub prep: Prepared,
    pub old: BctOutcome,
    pub new: BctOutcome,
    pub psi: FctOutcome,
    pub notations: Notations,
    pub alignment: f64,
}

pub fn run_upgrade_seed(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> CliResult<UpgradeRun> {
    let prep = prepare(cfg, seed)?;
    let old = train_old(cfg, &prep)?;
    let new = train_new(cfg, &prep, &old, cfg.loss.lambda)?;
    let psi = train_psi(cfg, &prep, &old.encoder, &new.encoder, cfg.model.psi_hidden)?;
    let notations = evaluate_notations(
        &old.encoder,
        &new.encoder,
        Some(&psi.psi),
        &prep.eval,
        cfg.k,
        exec,
    )?;
    let alignment = held_out_alignment(&prep, &old.encoder, &new.encoder, &psi.psi)?;
    Ok(UpgradeRun {
        prep,
        old,
        new,
        psi,
        notations,
        alignment,
    })
}

pub fn run_upgrade(cfg: &ExperimentConfig, exec: Exec) -> CliResult<Vec<UpgradeRun>> {
    collect(map_range(exec, cfg.seeds.len(), |i| {
        run_upgrade_seed(cfg, cfg.seeds[i], exec)
    }))
}

pub fn metric_report(cfg: &ExperimentConfig, run: &UpgradeRun) -> MetricReport {
    MetricReport::new(&run.notations, cfg.k, &run.prep.eval, vec![run.prep.seed])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Medians {
    pub m_o2o: f64,
    pub m_bct: f64,
    pub m_fct: f64,
    pub m_n2n: f64,
}

pub fn notation_medians(runs: &[&Notations]) -> Medians {
    let pick =
        |f: &dyn Fn(&Notations) -> f64| median(&runs.iter().map(|n| f(n)).collect::<Vec<_>>());
    Medians {
        m_o2o: pick(&|n| n.o2o),
        m_bct: pick(&|n| n.bct),
        m_fct: pick(&|n| n.fct.unwrap_or(f64::NAN)),
        m_n2n: pick(&|n| n.n2n),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub seed: u64,
    pub psi_dim: usize,
    pub m_o2o: f64,
    pub m_bct: f64,
    pub m_fct: f64,
    pub m_n2n: f64,
}

/// One new model per (seed, λ) against the seed's shared old model, and
/// one ψ per configured hidden width on top of it.
pub fn sweep_lambda(cfg: &ExperimentConfig, exec: Exec) -> CliResult<Vec<LambdaRow>> {
    let bases = collect(map_range(exec, cfg.seeds.len(), |i| {
        let prep = prepare(cfg, cfg.seeds[i])?;
        let old = train_old(cfg, &prep)?;
        Ok((prep, old))
    }))?;
    let lambdas = &cfg.sweep.lambdas;
    let tasks = bases.len() * lambdas.len();
    let rows = collect(map_range(exec, tasks, |t| -> CliResult<Vec<LambdaRow>> {
        let (prep, old) = &bases[t / lambdas.len()];
        let lambda = lambdas[t % lambdas.len()];
        let new = train_new(cfg, prep, old, lambda)?;
        let mut out = Vec::new();
        for &dim in &cfg.sweep.lambda_psi_dims {
            let psi = train_psi(cfg, prep, &old.encoder, &new.encoder, dim)?;
            let n = evaluate_notations(
                &old.encoder,
                &new.encoder,
                Some(&psi.psi),
                &prep.eval,
                cfg.k,
                exec,
            )?;
            out.push(LambdaRow {
                lambda,
                seed: prep.seed,
                psi_dim: dim,
                m_o2o: n.o2o,
                m_bct: n.bct,
                m_fct: n.fct.unwrap_or(f64::NAN),
                m_n2n: n.n2n,
            });
        }
        Ok(out)
    }))?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub psi_dim: usize,
    pub median_m_o2o: f64,
    pub median_m_bct: f64,
    pub median_m_fct: f64,
    pub median_m_n2n: f64,
}

pub fn summarize_lambda(rows: &[LambdaRow]) -> Vec<LambdaSummary> {
    let mut keys: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.lambda, r.psi_dim)) {
            keys.push((r.lambda, r.psi_dim));
        }
    }
    keys.into_iter()
        .map(|(lambda, psi_dim)| {
            let sel: Vec<&LambdaRow> = rows
                .iter()
                .filter(|r| r.lambda == lambda && r.psi_dim == psi_dim)
                .collect();
            let m =
                |f: fn(&LambdaRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            LambdaSummary {
                lambda,
                psi_dim,
                median_m_o2o: m(|r| r.m_o2o),
                median_m_bct: m(|r| r.m_bct),
                median_m_fct: m(|r| r.m_fct),
                median_m_n2n: m(|r| r.m_n2n),
            }
        })
        .collect()
}

/// λ with the highest median M_BCT (first on ties).
pub fn lambda_peak(summary: &[LambdaSummary]) -> Option<f64> {
    let mut best: Option<&LambdaSummary> = None;
    for s in summary {
        if best.is_none_or(|b| s.median_m_bct > b.median_m_bct) {
            best = Some(s);
        }
    }
    best.map(|s| s.lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimRow {
    pub dim: usize,
    pub seed: u64,
    pub m_bct: f64,
    pub m_fct: f64,
    pub gain: f64,
    /// FCT loss in the final ψ training epoch.
    pub psi_loss: f64,
}

/// Fixes the BCT model per seed and trains one ψ per hidden width.
pub fn sweep_dim(cfg: &ExperimentConfig, exec: Exec) -> CliResult<Vec<DimRow>> {
    let bases = collect(map_range(exec, cfg.seeds.len(), |i| {
        let prep = prepare(cfg, cfg.seeds[i])?;
        let old = train_old(cfg, &prep)?;
        let new = train_new(cfg, &prep, &old, cfg.loss.lambda)?;
        let queries = new.encoder.embed(&prep.eval.queries)?;
        let old_gallery = old.encoder.embed(&prep.eval.gallery)?;
        Ok((prep, old, new, queries, old_gallery))
    }))?;
    let dims = &cfg.sweep.dims;
    collect(map_range(exec, bases.len() * dims.len(), |t| {
        let (prep, old, new, queries, old_gallery) = &bases[t / dims.len()];
        let dim = dims[t % dims.len()];
        let psi = train_psi(cfg, prep, &old.encoder, &new.encoder, dim)?;
        let score = |g: &Tensor| -> CliResult<f64> {
            Ok(bict::retrieval::mean_average_precision(
                queries,
                &prep.eval.query_labels,
                &prep.eval.gallery_ids,
                &prep.eval.gallery_labels,
                g,
                cfg.k,
                exec,
            )?
            .map)
        };
        let m_bct = score(old_gallery)?;
        let m_fct = score(&psi.psi.upgrade(old_gallery)?)?;
        Ok(DimRow {
            dim,
            seed: prep.seed,
            m_bct,
            m_fct,
            gain: m_fct - m_bct,
            psi_loss: psi.log.last().map_or(f64::NAN, |l| l.loss),
        })
    }))
}

pub fn sequential_config(cfg: &ExperimentConfig, variant: SequenceVariant) -> SequentialConfig {
    let n = cfg.sequential.fractions.len();
    let generations = cfg
        .sequential
        .fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| GenerationSpec {
            fraction,
            encoder: if i == 0 {
                cfg.old_encoder()
            } else {
                cfg.new_encoder()
            },
            loss: if i == 0 {
                cfg.old_loss()
            } else {
                cfg.new_loss(cfg.sequential.lambda)
            },
        })
        .collect::<Vec<_>>();
    debug_assert_eq!(generations.len(), n);
    SequentialConfig {
        split_mode: cfg.split.mode,
        generations,
        momentum_m: cfg.sequential.momentum_m,
        variant,
        psi: cfg.psi_config(cfg.model.psi_hidden),
        train: cfg.train.to_train_config(),
        psi_train: cfg.psi_train.to_train_config(),
        k: cfg.k,
    }
}

/// Every (variant, seed) sequence, variants in [`SequenceVariant::ALL`]
/// order.
pub fn sequential(cfg: &ExperimentConfig, exec: Exec) -> CliResult<Vec<(u64, SequenceOutcome)>> {
    let variants = SequenceVariant::ALL;
    let preps = collect(map_range(exec, cfg.seeds.len(), |i| {
        prepare(cfg, cfg.seeds[i])
    }))?;
    collect(map_range(exec, variants.len() * preps.len(), |t| {
        let variant = variants[t / preps.len()];
        let prep = &preps[t % preps.len()];
        let seq = sequential_config(cfg, variant);
        let out = run_sequence(&prep.data, &prep.eval, &seq, prep.seed, exec, &mut |_| {})?;
        Ok((prep.seed, out))
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefreshRun {
    pub seed: u64,
    pub order_seed: u64,
    pub m_o2o: f64,
    pub m_bct: f64,
    pub m_fct: f64,
    pub curve: Vec<RefreshPoint>,
}

/// One trained upgrade per seed, refreshed under every backfill order.
pub fn refresh(cfg: &ExperimentConfig, exec: Exec) -> CliResult<Vec<RefreshRun>> {
    refresh_runs(cfg, &run_upgrade(cfg, exec)?, exec)
}

pub fn refresh_runs(
    cfg: &ExperimentConfig,
    runs: &[UpgradeRun],
    exec: Exec,
) -> CliResult<Vec<RefreshRun>> {
    let mut out = Vec::new();
    for run in runs {
        let old_gallery = run.old.encoder.embed(&run.prep.eval.gallery)?;
        let gallery = Gallery::new(
            run.prep.eval.gallery_ids.clone(),
            run.prep.eval.gallery_labels.clone(),
            old_gallery,
            0,
        )?;
        let queries = run.new.encoder.embed(&run.prep.eval.queries)?;
        let curves = collect(map_range(exec, cfg.refresh.order_seeds.len(), |j| {
            Ok(hot_refresh(
                &gallery,
                &run.psi.psi,
                &queries,
                &run.prep.eval.query_labels,
                &cfg.refresh.fractions,
                cfg.refresh.order_seeds[j],
                1,
                cfg.k,
                exec,
            )?)
        }))?;
        for (curve, &order_seed) in curves.into_iter().zip(&cfg.refresh.order_seeds) {
            out.push(RefreshRun {
                seed: run.prep.seed,
                order_seed,
                m_o2o: run.notations.o2o,
                m_bct: run.notations.bct,
                m_fct: run.notations.fct.unwrap_or(f64::NAN),
                curve,
            });
        }
    }
    Ok(out)
}
