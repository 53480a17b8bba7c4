use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{EvalSet, SplitMode, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::{EncoderConfig, EncoderModel, ModelGeneration, UpgradeConfig, UpgradeModule};
use crate::par::Exec;
use crate::retrieval::Gallery;
use crate::rng::derive_seed;

use super::{momentum_input, train_bct, train_fct, OldGeneration, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceVariant {
    /// Backward-compatible encoders only; the gallery is never touched.
    BctOnly,
    Bict,
    BictMomentum,
}

impl SequenceVariant {
    pub const ALL: [SequenceVariant; 3] = [Self::BctOnly, Self::Bict, Self::BictMomentum];

    pub fn name(self) -> &'static str {
        match self {
            Self::BctOnly => "bct-only",
            Self::Bict => "bict",
            Self::BictMomentum => "bict-momentum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    /// Training allocation for this generation.
    pub fraction: f64,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialConfig {
    pub split_mode: SplitMode,
    /// Generation 0 first; its loss is always trained without compatibility.
    pub generations: Vec<GenerationSpec>,
    pub momentum_m: f64,
    pub variant: SequenceVariant,
    /// Depth and hidden width of every ψ; its dims follow the encoders.
    pub psi: UpgradeConfig,
    pub train: TrainConfig,
    pub psi_train: TrainConfig,
    pub k: usize,
}

impl SequentialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generations.len() < 2 {
            return Err(Error::Config(
                "a sequence needs at least two generations".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return Err(Error::Config(format!(
                "momentum m must lie in [0, 1], got {}",
                self.momentum_m
            )));
        }
        Ok(())
    }

    fn uses_psi(&self) -> bool {
        self.variant != SequenceVariant::BctOnly
    }

    fn uses_momentum(&self) -> bool {
        self.variant == SequenceVariant::BictMomentum
    }
}

/// Observation points inside [`run_sequence`].
#[derive(Debug)]
pub enum SequenceEvent<'a> {
    PsiTrainInput {
        generation: usize,
        features: &'a Tensor,
    },
    BackfillInput {
        generation: usize,
        features: &'a Tensor,
    },
    GalleryUpdated {
        generation: usize,
        gallery: &'a Gallery,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    pub train_size: usize,
    pub m_bct: f64,
    pub m_fct: Option<f64>,
    pub m_n2n: f64,
    pub gallery_checksum: u64,
    pub retains_previous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub variant: SequenceVariant,
    pub m_o2o: f64,
    pub generations: Vec<GenerationReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutcome {
    pub report: SequenceReport,
    pub models: Vec<ModelGeneration>,
    pub gallery: Gallery,
}

/// Replays the stored-feature history of `inputs` through every upgrade so
/// far, the same way the gallery was upgraded. Returns `F_0 … F_{n}`.
fn feature_history(
    base: &EncoderModel,
    psis: &[&UpgradeModule],
    inputs: &Tensor,
    momentum: Option<f64>,
) -> Result<Vec<Tensor>> {
    let mut hist = vec![base.embed(inputs)?];
    for (j, psi) in psis.iter().enumerate() {
        let i = j + 1;
        let input = upgrade_input(&hist, i, momentum)?;
        hist.push(psi.upgrade(&input)?);
    }
    Ok(hist)
}

fn upgrade_input(hist: &[Tensor], i: usize, momentum: Option<f64>) -> Result<Tensor> {
    let prev = &hist[i - 1];
    match momentum {
        Some(m) => momentum_input(prev, (i >= 2).then(|| &hist[i - 2]), i, m),
        None => Ok(prev.clone()),
    }
}

/// Trains generation 0 plainly, then for each later generation: a
/// backward-compatible encoder against the previous encoder, and (unless
/// BCT-only) an upgrade module that backfills the gallery.
pub fn run_sequence(
    data: &SyntheticDataset,
    eval: &EvalSet,
    cfg: &SequentialConfig,
    seed: u64,
    exec: Exec,
    observer: &mut dyn FnMut(SequenceEvent<'_>),
) -> Result<SequenceOutcome> {
    cfg.validate()?;
    let momentum = cfg.uses_momentum().then_some(cfg.momentum_m);
    let score = |queries: &Tensor, gallery: &Gallery| -> Result<f64> {
        Ok(gallery
            .map_at_k(queries, &eval.query_labels, cfg.k, exec)?
            .map)
    };

    let spec0 = &cfg.generations[0];
    let d0 = data.split(cfg.split_mode, spec0.fraction)?;
    let plain = LossConfig {
        lambda: 0.0,
        ..spec0.loss.clone()
    };
    let g0 = train_bct(
        &d0,
        None,
        &spec0.encoder,
        &plain,
        &cfg.train,
        derive_seed(seed, 1000),
    )?;
    let mut gallery = Gallery::new(
        eval.gallery_ids.clone(),
        eval.gallery_labels.clone(),
        g0.encoder.embed(&eval.gallery)?,
        0,
    )?;
    if momentum.is_some() {
        gallery.enable_momentum();
    }
    let m_o2o = score(&g0.encoder.embed(&eval.queries)?, &gallery)?;
    let mut models = vec![ModelGeneration::new(0, g0.encoder, g0.head, None)?];
    let mut reports = Vec::new();

    for (i, spec) in cfg.generations.iter().enumerate().skip(1) {
        let di = data.split(cfg.split_mode, spec.fraction)?;
        let prev = &models[i - 1];
        let out = train_bct(
            &di,
            Some(OldGeneration {
                encoder: &prev.encoder,
                head: &prev.head,
            }),
            &spec.encoder,
            &spec.loss,
            &cfg.train,
            derive_seed(seed, 1000 + i as u64),
        )?;
        let queries = out.encoder.embed(&eval.queries)?;
        let m_bct = score(&queries, &gallery)?;
        let new_gallery = out.encoder.embed(&eval.gallery)?;
        let m_n2n = crate::retrieval::mean_average_precision(
            &queries,
            &eval.query_labels,
            &eval.gallery_ids,
            &eval.gallery_labels,
            &new_gallery,
            cfg.k,
            exec,
        )?
        .map;

        let mut upgrade = None;
        let mut m_fct = None;
        if cfg.uses_psi() {
            let psis: Vec<&UpgradeModule> = models[1..]
                .iter()
                .filter_map(|g| g.upgrade.as_ref())
                .collect();
            let hist = feature_history(&models[0].encoder, &psis, &di.inputs, momentum)?;
            let train_input = upgrade_input(&hist, i, momentum)?;
            observer(SequenceEvent::PsiTrainInput {
                generation: i,
                features: &train_input,
            });
            let targets = out.encoder.embed(&di.inputs)?;
            let psi_cfg = UpgradeConfig {
                input_dim: train_input.cols(),
                output_dim: targets.cols(),
                ..cfg.psi.clone()
            };
            let fct = train_fct(
                &train_input,
                &targets,
                &psi_cfg,
                &cfg.psi_train,
                derive_seed(seed, 2000 + i as u64),
            )?;
            let backfill_input = match momentum {
                Some(m) => momentum_input(gallery.embeddings(), gallery.previous(), i, m)?,
                None => gallery.embeddings().clone(),
            };
            observer(SequenceEvent::BackfillInput {
                generation: i,
                features: &backfill_input,
            });
            gallery.backfill_all(&fct.psi.upgrade(&backfill_input)?, i as u32)?;
            observer(SequenceEvent::GalleryUpdated {
                generation: i,
                gallery: &gallery,
            });
            m_fct = Some(score(&queries, &gallery)?);
            upgrade = Some(fct.psi);
        }
        reports.push(GenerationReport {
            generation: i,
            train_size: di.len(),
            m_bct,
            m_fct,
            m_n2n,
            gallery_checksum: gallery.checksum(),
            retains_previous: gallery.momentum_active(),
        });
        models.push(ModelGeneration::new(i, out.encoder, out.head, upgrade)?);
    }
    Ok(SequenceOutcome {
        report: SequenceReport {
            variant: cfg.variant,
            m_o2o,
            generations: reports,
        },
        models,
        gallery,
    })
}
