//! Training objectives: ArcFace base loss, the three backward-compatibility
//! regularizers, and the combined backward/forward compatible losses.
//!
//! Every function records onto a caller-owned [`Tape`]. Frozen quantities
//! (old features, old classifier) are expected as non-trainable leaves.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::ArcFaceHead;

/// Embedding rows passed to a loss must be unit-norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompKind {
    Regression,
    Classification,
    Contrastive,
}

impl std::str::FromStr for CompKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Self::Regression),
            "classification" => Ok(Self::Classification),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(Error::Config(format!(
                "unknown compatibility loss {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for CompKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Regression => "regression",
            Self::Classification => "classification",
            Self::Contrastive => "contrastive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub comp_kind: CompKind,
    pub tau: f64,
    pub scale: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            comp_kind: CompKind::Regression,
            tau: 0.1,
            scale: 30.0,
            margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "arcface scale must be > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWarning {
    /// No sample could contribute; the term evaluates to 0.
    AllExcluded,
}

#[derive(Clone, Copy, Debug)]
pub struct CompTerm {
    pub loss: Var,
    pub warning: Option<LossWarning>,
}

fn check_unit_rows(op: &str, t: &Tensor) -> Result<()> {
    for (r, row) in t.iter_rows().enumerate() {
        let n = dot(row, row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{op}: embedding row {r} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Mean ArcFace loss of unit embeddings against the classifier `weight`.
pub fn arcface_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    weight: Var,
    scale: f64,
    margin: f64,
) -> Result<Var> {
    check_unit_rows("arcface_loss", tape.value(emb))?;
    let w = tape.l2_normalize(weight)?;
    let cos = tape.matmul_nt(emb, w)?;
    let logits = tape.arc_margin(cos, labels, scale, margin)?;
    tape.cross_entropy(logits, labels)
}

/// Mean of `1 − cos⟨new_i, old_i⟩`, always within `[0, 2]`.
pub fn regression_comp(tape: &mut Tape, new: Var, old: Var) -> Result<Var> {
    let (a, b) = (tape.value(new), tape.value(old));
    if a.shape() != b.shape() {
        return Err(Error::shape("regression_comp", &a.shape(), &b.shape()));
    }
    check_unit_rows("regression_comp", a)?;
    check_unit_rows("regression_comp", b)?;
    let prod = tape.mul(new, old)?;
    let cos = tape.row_sum(prod);
    let cos = tape.clamp(cos, -1.0, 1.0);
    let neg = tape.scalar_mul(cos, -1.0);
    let gap = tape.add_scalar(neg, 1.0);
    Ok(tape.mean(gap))
}

/// ArcFace of the new embeddings against the frozen old classifier. Samples
/// whose label the old head never saw are left out.
pub fn classification_comp(
    tape: &mut Tape,
    new: Var,
    labels: &[usize],
    old_head: &ArcFaceHead,
) -> Result<CompTerm> {
    let rows = tape.value(new).rows();
    if rows != labels.len() {
        return Err(Error::shape(
            "classification_comp",
            &[rows],
            &[labels.len()],
        ));
    }
    let keep: Vec<usize> = (0..rows)
        .filter(|&i| labels[i] < old_head.num_classes())
        .collect();
    if keep.is_empty() {
        return Ok(CompTerm {
            loss: tape.constant(Tensor::scalar(0.0)),
            warning: Some(LossWarning::AllExcluded),
        });
    }
    let weight = old_head.bind(tape, false);
    let (emb, kept_labels) = if keep.len() == rows {
        (new, labels.to_vec())
    } else {
        let sel = tape.select_rows(new, &keep)?;
        (sel, keep.iter().map(|&i| labels[i]).collect())
    };
    let loss = arcface_loss(
        tape,
        emb,
        &kept_labels,
        weight,
        old_head.scale,
        old_head.margin,
    )?;
    Ok(CompTerm {
        loss,
        warning: None,
    })
}

/// Supervised contrastive loss between new-model anchors and old-model
/// candidates at temperature `tau`.
pub fn contrastive_comp(
    tape: &mut Tape,
    new: Var,
    old: Var,
    labels: &[usize],
    tau: f64,
) -> Result<CompTerm> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let (a, b) = (tape.value(new), tape.value(old));
    if a.shape() != b.shape() {
        return Err(Error::shape("contrastive_comp", &a.shape(), &b.shape()));
    }
    check_unit_rows("contrastive_comp", a)?;
    check_unit_rows("contrastive_comp", b)?;
    let sim = tape.matmul_nt(new, old)?;
    let logits = tape.scalar_mul(sim, 1.0 / tau);
    let (loss, anchors) = tape.supcon(logits, labels)?;
    Ok(CompTerm {
        loss,
        warning: (anchors == 0).then_some(LossWarning::AllExcluded),
    })
}

/// What the old generation contributes to the backward-compatible loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct OldReference<'a> {
    /// Frozen old embeddings of the current batch.
    pub features: Option<Var>,
    pub head: Option<&'a ArcFaceHead>,
}

#[derive(Clone, Copy, Debug)]
pub struct BctTerms {
    pub total: Var,
    pub base: Var,
    pub comp: Option<CompTerm>,
}

/// `arcface(new) + λ·ℓ_comp`. With `λ = 0` the compatibility term is not
/// recorded at all and `total` is the base loss node itself.
pub fn bct_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    new_weight: Var,
    old: OldReference<'_>,
    cfg: &LossConfig,
) -> Result<BctTerms> {
    cfg.validate()?;
    let base = arcface_loss(tape, emb, labels, new_weight, cfg.scale, cfg.margin)?;
    if cfg.lambda == 0.0 {
        return Ok(BctTerms {
            total: base,
            base,
            comp: None,
        });
    }
    let missing =
        |what: &str| Error::Config(format!("{} compatibility needs old {what}", cfg.comp_kind));
    let comp = match cfg.comp_kind {
        CompKind::Regression => {
            let old_feat = old.features.ok_or_else(|| missing("features"))?;
            CompTerm {
                loss: regression_comp(tape, emb, old_feat)?,
                warning: None,
            }
        }
        CompKind::Classification => {
            let head = old.head.ok_or_else(|| missing("classifier"))?;
            // the frozen old weights under the configured scale and margin
            let view = ArcFaceHead {
                weight: head.weight.clone(),
                scale: cfg.scale,
                margin: cfg.margin,
            };
            classification_comp(tape, emb, labels, &view)?
        }
        CompKind::Contrastive => {
            let old_feat = old.features.ok_or_else(|| missing("features"))?;
            contrastive_comp(tape, emb, old_feat, labels, cfg.tau)?
        }
    };
    let weighted = tape.scalar_mul(comp.loss, cfg.lambda);
    let total = tape.add(base, weighted)?;
    Ok(BctTerms {
        total,
        base,
        comp: Some(comp),
    })
}

/// Forward-compatible loss: regression of the upgraded embeddings onto the
/// frozen new-model embeddings.
pub fn fct_loss(tape: &mut Tape, upgraded: Var, new_target: Var) -> Result<Var> {
    regression_comp(tape, new_target, upgraded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        random(rng, r, c).l2_normalized().unwrap()
    }

    /// −log(e/(e+1)) for an aligned, orthogonal two-class setup with s=1, m=0.
    fn two_class_closed_form() -> f64 {
        let e = 1f64.exp();
        -(e / (e + 1.0)).ln()
    }

    #[test]
    fn arcface_two_class_closed_form() {
        let mut t = Tape::new();
        let emb = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let w = t.constant(Tensor::identity(2));
        let l = arcface_loss(&mut t, emb, &[0], w, 1.0, 0.0).unwrap();
        let v = t.value(l).item();
        assert!((v - two_class_closed_form()).abs() < 1e-6);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn zero_margin_is_cosine_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let emb = unit(&mut rng, 6, 4);
            let w = random(&mut rng, 5, 4);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            let mut t = Tape::new();
            let e = t.constant(emb.clone());
            let wv = t.constant(w.clone());
            let l = arcface_loss(&mut t, e, &labels, wv, 30.0, 0.0).unwrap();
            // independent softmax cross-entropy over scaled cosines
            let wn = w.l2_normalized().unwrap();
            let mut expect = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let logits: Vec<f64> = (0..5)
                    .map(|j| 30.0 * dot(emb.row_slice(i), wn.row_slice(j)))
                    .collect();
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                expect += lse - logits[y];
            }
            expect /= 6.0;
            assert!((t.value(l).item() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn arcface_rejects_unnormalized_rows() {
        let mut t = Tape::new();
        let emb = t.constant(Tensor::from_rows(&[[2.0, 0.0]]).unwrap());
        let w = t.constant(Tensor::identity(2));
        assert!(matches!(
            arcface_loss(&mut t, emb, &[0], w, 1.0, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn arcface_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random(&mut rng, 5, 4);
        let w = random(&mut rng, 3, 4);
        let labels = [0, 2, 1, 1, 0];
        let report = check_gradients(&[raw, w], DEFAULT_STEP, |t, v| {
            let e = t.l2_normalize(v[0])?;
            arcface_loss(t, e, &labels, v[1], 30.0, 0.3)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    #[test]
    fn regression_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap());
        let same = regression_comp(&mut t, a, a).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
        let anti = t.constant(Tensor::from_rows(&[[-1.0, 0.0]]).unwrap());
        let one = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let l = regression_comp(&mut t, one, anti).unwrap();
        assert_eq!(t.value(l).item(), 2.0);
        let orth = t.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        let l = regression_comp(&mut t, one, orth).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let mixed = regression_comp(&mut t, a, b).unwrap();
        assert_eq!(t.value(mixed).item(), 1.5);
        let short = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        assert!(regression_comp(&mut t, a, short).is_err());
    }

    #[test]
    fn regression_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3));
        let report = check_gradients(&[x, y], DEFAULT_STEP, |t, v| {
            let a = t.l2_normalize(v[0])?;
            let b = t.l2_normalize(v[1])?;
            regression_comp(t, a, b)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn classification_comp_matches_arcface_and_freezes_old_head() {
        let head = ArcFaceHead::from_weight(Tensor::identity(2), 1.0, 0.0).unwrap();
        let mut t = Tape::new();
        let emb = t.param(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let term = classification_comp(&mut t, emb, &[0], &head).unwrap();
        assert!((t.value(term.loss).item() - two_class_closed_form()).abs() < 1e-6);
        assert!(term.warning.is_none());
        let g = t.backward(term.loss).unwrap();
        assert!(g.get(emb).is_some());
        // emb is leaf 0; the bound old weight comes next and stays frozen
        let w = head.bind(&mut t, false);
        assert!(!t.requires_grad(w));
    }

    #[test]
    fn classification_comp_excludes_unseen_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ArcFaceHead::new(2, 3, 30.0, 0.3, 1).unwrap();
        let emb = unit(&mut rng, 4, 3);
        let mut t = Tape::new();
        let e = t.constant(emb.clone());
        let part = classification_comp(&mut t, e, &[0, 5, 1, 7], &head).unwrap();
        let sub = t.constant(emb.select_rows(&[0, 2]));
        let w = head.bind(&mut t, false);
        let direct = arcface_loss(&mut t, sub, &[0, 1], w, 30.0, 0.3).unwrap();
        assert_eq!(t.value(part.loss).item(), t.value(direct).item());
        let none = classification_comp(&mut t, e, &[3, 5, 4, 7], &head).unwrap();
        assert_eq!(t.value(none.loss).item(), 0.0);
        assert_eq!(none.warning, Some(LossWarning::AllExcluded));
    }

    /// Independent scalar evaluation of the supervised contrastive formula.
    fn supcon_oracle(new: &Tensor, old: &Tensor, labels: &[usize], tau: f64) -> Option<f64> {
        let b = labels.len();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b)
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let sim = |j: usize| dot(new.row_slice(i), old.row_slice(j)) / tau;
            let denom: f64 = (0..b).filter(|&j| j != i).map(|j| sim(j).exp()).sum();
            let mut s = 0.0;
            for &p in &pos {
                s += -(sim(p).exp() / denom).ln();
            }
            total += s / pos.len() as f64;
        }
        (anchors > 0).then(|| total / anchors as f64)
    }

    #[test]
    fn contrastive_examples() {
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut t = Tape::new();
        let n = t.constant(x.clone());
        let o = t.constant(x.clone());
        let same = contrastive_comp(&mut t, n, o, &[3, 3], 1.0).unwrap();
        assert_eq!(t.value(same.loss).item(), 0.0);
        assert!(same.warning.is_none());
        let diff = contrastive_comp(&mut t, n, o, &[0, 1], 1.0).unwrap();
        assert_eq!(t.value(diff.loss).item(), 0.0);
        assert_eq!(diff.warning, Some(LossWarning::AllExcluded));
    }

    #[test]
    fn contrastive_matches_scalar_oracle_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let new = unit(&mut rng, 4, 3);
            let old = unit(&mut rng, 4, 3);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
            let mut t = Tape::new();
            let (n, o) = (t.constant(new.clone()), t.constant(old.clone()));
            let term = contrastive_comp(&mut t, n, o, &labels, 0.1).unwrap();
            match supcon_oracle(&new, &old, &labels, 0.1) {
                Some(expect) => assert!((t.value(term.loss).item() - expect).abs() < 1e-10),
                None => assert_eq!(term.warning, Some(LossWarning::AllExcluded)),
            }
        }
        let raw_n = random(&mut rng, 5, 3);
        let raw_o = random(&mut rng, 5, 3);
        let labels = [0, 1, 0, 1, 1];
        let report = check_gradients(&[raw_n, raw_o], DEFAULT_STEP, |t, v| {
            let a = t.l2_normalize(v[0])?;
            let b = t.l2_normalize(v[1])?;
            Ok(contrastive_comp(t, a, b, &labels, 0.5)?.loss)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    fn bct_value(
        lambda: f64,
        kind: CompKind,
        emb: &Tensor,
        old: &Tensor,
        w: &Tensor,
        labels: &[usize],
    ) -> f64 {
        let head = ArcFaceHead::from_weight(w.clone(), 30.0, 0.3).unwrap();
        let mut t = Tape::new();
        let e = t.constant(emb.clone());
        let o = t.constant(old.clone());
        let wv = t.constant(w.clone());
        let cfg = LossConfig {
            lambda,
            comp_kind: kind,
            ..LossConfig::default()
        };
        let terms = bct_loss(
            &mut t,
            e,
            labels,
            wv,
            OldReference {
                features: Some(o),
                head: Some(&head),
            },
            &cfg,
        )
        .unwrap();
        t.value(terms.total).item()
    }

    #[test]
    fn bct_reductions_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = unit(&mut rng, 6, 4);
        let old = unit(&mut rng, 6, 4);
        let w = random(&mut rng, 3, 4);
        let labels = [0, 1, 2, 0, 1, 2];

        let mut t = Tape::new();
        let e = t.constant(emb.clone());
        let wv = t.constant(w.clone());
        let base = arcface_loss(&mut t, e, &labels, wv, 30.0, 0.3).unwrap();
        let base = t.value(base).item();
        for kind in [
            CompKind::Regression,
            CompKind::Classification,
            CompKind::Contrastive,
        ] {
            assert_eq!(
                bct_value(0.0, kind, &emb, &old, &w, &labels).to_bits(),
                base.to_bits()
            );
            let (l1, l2, l4) = (
                bct_value(1.0, kind, &emb, &old, &w, &labels),
                bct_value(2.0, kind, &emb, &old, &w, &labels),
                bct_value(4.0, kind, &emb, &old, &w, &labels),
            );
            assert!(((l4 - l2) - 2.0 * (l2 - l1)).abs() < 1e-10, "{kind}");
        }
        // identical old features make the regression term vanish
        let same = bct_value(2.0, CompKind::Regression, &emb, &emb, &w, &labels);
        assert!((same - base).abs() < 1e-12);
    }

    #[test]
    fn bct_requires_matching_old_reference() {
        let mut t = Tape::new();
        let e = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let w = t.constant(Tensor::identity(2));
        let cfg = LossConfig {
            comp_kind: CompKind::Classification,
            ..LossConfig::default()
        };
        assert!(matches!(
            bct_loss(&mut t, e, &[0], w, OldReference::default(), &cfg),
            Err(Error::Config(_))
        ));
        let neg = LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        };
        assert!(bct_loss(&mut t, e, &[0], w, OldReference::default(), &neg).is_err());
    }

    #[test]
    fn fct_loss_examples_and_frozen_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = unit(&mut rng, 5, 3);
        let mut t = Tape::new();
        let up = t.param(x.clone());
        let target = t.constant(x.clone());
        let l = fct_loss(&mut t, up, target).unwrap();
        assert!(t.value(l).item().abs() < 1e-15);

        let y = unit(&mut rng, 5, 3);
        let mut t = Tape::new();
        let up = t.param(x.clone());
        let target = t.constant(y.clone());
        let l = fct_loss(&mut t, up, target).unwrap();
        let mean_cos: f64 = (0..5)
            .map(|i| dot(x.row_slice(i), y.row_slice(i)))
            .sum::<f64>()
            / 5.0;
        assert!((t.value(l).item() - (1.0 - mean_cos)).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert!(g.get(up).is_some());
        assert!(g.get(target).is_none());
    }

    #[test]
    fn losses_are_invariant_to_pre_normalization_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = random(&mut rng, 4, 3);
        let other = unit(&mut rng, 4, 3);
        let w = random(&mut rng, 2, 3);
        let labels = [0, 1, 1, 0];
        let eval = |scale: f64| {
            let mut t = Tape::new();
            let r = t.constant(raw.map(|v| v * scale));
            let e = t.l2_normalize(r).unwrap();
            let o = t.constant(other.clone());
            let wv = t.constant(w.clone());
            let a = arcface_loss(&mut t, e, &labels, wv, 30.0, 0.3).unwrap();
            let b = regression_comp(&mut t, e, o).unwrap();
            let c = contrastive_comp(&mut t, e, o, &labels, 0.1).unwrap().loss;
            [t.value(a).item(), t.value(b).item(), t.value(c).item()]
        };
        let base = eval(1.0);
        for s in [0.01, 3.0, 250.0] {
            for (x, y) in eval(s).iter().zip(&base) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
