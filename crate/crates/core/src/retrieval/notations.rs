use serde::{Deserialize, Serialize};

use crate::data::EvalSet;
use crate::error::{Error, Result};
use crate::models::{EncoderModel, UpgradeModule};
use crate::par::Exec;

use super::metrics::mean_average_precision;
use super::refresh::{validate_fractions, RefreshPoint};

/// mAP@k under each query/gallery pairing.
///
/// * `o2o`: old queries, old gallery.
/// * `bct`: new queries, old gallery.
/// * `fct`: new queries, gallery upgraded by ψ (absent without ψ).
/// * `n2n`: new queries, gallery re-embedded by the new model. This needs the
///   raw gallery images and serves only as an upper reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notations {
    pub o2o: f64,
    pub bct: f64,
    pub fct: Option<f64>,
    pub n2n: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn evaluate_notations(
    old: &EncoderModel,
    new: &EncoderModel,
    psi: Option<&UpgradeModule>,
    eval: &EvalSet,
    k: usize,
    exec: Exec,
) -> Result<Notations> {
    let old_q = old.embed(&eval.queries)?;
    let old_g = old.embed(&eval.gallery)?;
    let new_q = new.embed(&eval.queries)?;
    let new_g = new.embed(&eval.gallery)?;
    let score = |q, g| {
        mean_average_precision(
            q,
            &eval.query_labels,
            &eval.gallery_ids,
            &eval.gallery_labels,
            g,
            k,
            exec,
        )
    };
    let o2o = score(&old_q, &old_g)?;
    let bct = score(&new_q, &old_g)?;
    let n2n = score(&new_q, &new_g)?;
    let fct = match psi {
        Some(psi) => Some(score(&new_q, &psi.upgrade(&old_g)?)?.map),
        None => None,
    };
    Ok(Notations {
        o2o: o2o.map,
        bct: bct.map,
        fct,
        n2n: n2n.map,
        evaluated: n2n.evaluated,
        excluded: n2n.excluded,
    })
}

/// Serialized evaluation summary of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "M_o2o")]
    pub m_o2o: f64,
    #[serde(rename = "M_BCT")]
    pub m_bct: f64,
    #[serde(rename = "M_FCT")]
    pub m_fct: Option<f64>,
    /// Upper reference only; not reachable without re-embedding raw images.
    #[serde(rename = "M_n2n_oracle")]
    pub m_n2n_oracle: f64,
    pub k: usize,
    pub num_queries: usize,
    pub gallery_size: usize,
    pub excluded_queries: usize,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refresh: Option<Vec<RefreshPoint>>,
}

impl MetricReport {
    pub fn new(n: &Notations, k: usize, eval: &EvalSet, seeds: Vec<u64>) -> Self {
        Self {
            m_o2o: n.o2o,
            m_bct: n.bct,
            m_fct: n.fct,
            m_n2n_oracle: n.n2n,
            k,
            num_queries: eval.query_labels.len(),
            gallery_size: eval.gallery_labels.len(),
            excluded_queries: n.excluded,
            seeds,
            refresh: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let maps = [
            Some(self.m_o2o),
            Some(self.m_bct),
            self.m_fct,
            Some(self.m_n2n_oracle),
        ];
        if let Some(bad) = maps
            .into_iter()
            .flatten()
            .find(|m| !(0.0..=1.0).contains(m))
        {
            return Err(Error::Retrieval(format!("mAP {bad} outside [0, 1]")));
        }
        if let Some(curve) = &self.refresh {
            let fr: Vec<f64> = curve.iter().map(|p| p.fraction).collect();
            validate_fractions(&fr)?;
            if let Some(p) = curve.iter().find(|p| !(0.0..=1.0).contains(&p.map)) {
                return Err(Error::Retrieval(format!(
                    "refresh mAP {} outside [0, 1]",
                    p.map
                )));
            }
        }
        Ok(())
    }
}
