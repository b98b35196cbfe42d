//! Training objectives.
//!
//! Each function here evaluates one loss term for one decision. The batched
//! objective and its gradients live in [`crate::objective`]; these functions
//! are the reference definitions it is tested against.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::concept_attribution;
use crate::error::{Error, Result};
use crate::kernels::{
    kappa_act, kappa_attr, kappa_param, kappa_param_raw, profile_concept, KernelConfig, KernelKind, ReferenceSet,
};
use crate::memory::{ConceptSnapshot, Memory};
use crate::model::{ConceptActivations, PrototypeModel};
use crate::raster::{Mask, Raster};
use crate::shapes::ImageId;

pub const PROB_FLOOR: f64 = 1e-12;
pub const BCE_CLAMP: f64 = 1e-6;

/// Coefficients of the corrective terms. Cross-entropy always has weight one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub lambda_attr: f64,
    pub lambda_aggr: f64,
    pub lambda_relevance: f64,
    pub lambda_concept_label: f64,
    pub lambda_concept_region: f64,
    pub epsilon_rel: f64,
    pub kernel: KernelConfig,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            lambda_attr: 1.0,
            lambda_aggr: 1.0,
            lambda_relevance: 0.1,
            lambda_concept_label: 0.1,
            lambda_concept_region: 0.1,
            epsilon_rel: 0.1,
            kernel: KernelConfig::default(),
        }
    }
}

impl LossSpec {
    pub fn cross_entropy_only() -> Self {
        Self {
            lambda_attr: 0.0,
            lambda_aggr: 0.0,
            lambda_relevance: 0.0,
            lambda_concept_label: 0.0,
            lambda_concept_region: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_attr,
            self.lambda_aggr,
            self.lambda_relevance,
            self.lambda_concept_label,
            self.lambda_concept_region,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss coefficients must be finite and nonnegative".into()));
        }
        if !(self.epsilon_rel > 0.0) {
            return Err(Error::Config(format!("epsilon_rel must be positive, got {}", self.epsilon_rel)));
        }
        if !(self.kernel.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.kernel.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTarget {
    pub concept: usize,
    /// Desired activation, 0 or 1.
    pub desired: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTarget {
    pub concept: usize,
    /// Pixels where the concept may activate.
    pub region: Mask,
}

/// Per-example and per-class supervision collected from feedback.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Supervision {
    /// Explicit concept-index relevance masks (`true` = relevant).
    pub concept_masks: BTreeMap<ImageId, Vec<bool>>,
    pub concept_labels: BTreeMap<ImageId, Vec<ConceptTarget>>,
    pub regions: BTreeMap<ImageId, Vec<RegionTarget>>,
    /// Concepts that must keep a non-negligible weight for a class.
    pub relevant: BTreeMap<usize, BTreeSet<usize>>,
}

impl Supervision {
    /// Index mask for decision `(image, class)`: explicit masks combined with
    /// the source indices of memory entries covering the decision.
    pub fn concept_mask(&self, k: usize, image: ImageId, class: usize, memory: Option<&Memory>) -> Vec<bool> {
        let mut m = self
            .concept_masks
            .get(&image)
            .cloned()
            .unwrap_or_else(|| vec![true; k]);
        m.resize(k, true);
        for e in memory.map(|m| m.query(image, class)).unwrap_or_default() {
            if e.source_index < k {
                m[e.source_index] = false;
            }
        }
        m
    }
}

pub fn cross_entropy(probs: &[f64], y: usize) -> Result<f64> {
    let p = probs.get(y).ok_or(Error::InvalidIndex {
        what: "class",
        index: y,
        len: probs.len(),
    })?;
    if p.is_nan() {
        return Err(Error::NonFinite { term: "cross_entropy" });
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `Σ_j (1 - m_j) (w_j^(y))²`: penalizes weights by concept index.
pub fn attr_index_loss(model: &PrototypeModel, y: usize, mask: &[bool]) -> Result<f64> {
    model.check_class(y)?;
    if mask.len() != model.k() {
        return Err(Error::Dimension(format!("mask has {} entries for {} concepts", mask.len(), model.k())));
    }
    Ok(model
        .weight_row(y)
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(w, _)| w * w)
        .sum())
}

/// Similarity between a frozen snapshot and live concept `j`.
pub fn snapshot_kernel(
    snapshot: &ConceptSnapshot,
    model: &PrototypeModel,
    j: usize,
    reference: Option<&ReferenceSet>,
    kernel: &KernelConfig,
) -> Result<f64> {
    match kernel.kind {
        KernelKind::Param => kappa_param(&snapshot.frozen_p, model.prototype(j), kernel.sigma_for(model.q())),
        KernelKind::ParamRaw => kappa_param_raw(&snapshot.frozen_p, model.prototype(j)),
        KernelKind::Act | KernelKind::Attr => {
            let reference = reference.ok_or_else(|| Error::Profile("kernel needs a reference set".into()))?;
            let live = profile_concept(model, j, reference, kernel.kind == KernelKind::Attr)?;
            if kernel.kind == KernelKind::Act {
                kappa_act(snapshot, &live, kernel.rho)
            } else {
                kappa_attr(snapshot, &live, kernel.rho)
            }
        }
    }
}

/// `Σ_{c̄ ∈ M(x, y)} Σ_j κ(c̄, c_j) (w_j^(y))²`.
pub fn aggr_loss(
    model: &PrototypeModel,
    image: ImageId,
    y: usize,
    memory: &Memory,
    reference: Option<&ReferenceSet>,
    kernel: &KernelConfig,
) -> Result<f64> {
    model.check_class(y)?;
    if let Some(r) = reference {
        if kernel.needs_reference() && r.id() != memory.reference_set_id {
            return Err(Error::Profile("memory was built on a different reference set".into()));
        }
    }
    let mut total = 0.0;
    for snapshot in memory.query(image, y) {
        for j in 0..model.k() {
            let w = model.weight(y, j);
            total += snapshot_kernel(snapshot, model, j, reference, kernel)? * w * w;
        }
    }
    Ok(total)
}

/// Hinge penalty keeping relevant concepts' weights away from zero.
pub fn relevance_penalty(model: &PrototypeModel, y: usize, relevant: &BTreeSet<usize>, epsilon_rel: f64) -> Result<f64> {
    model.check_class(y)?;
    let mut total = 0.0;
    for &j in relevant {
        model.check_concept(j)?;
        let gap = (epsilon_rel - model.weight(y, j).abs()).max(0.0);
        total += gap * gap;
    }
    Ok(total)
}

pub(crate) fn clamp_activation(c: f64) -> (f64, bool) {
    let lo = BCE_CLAMP;
    let hi = 1.0 - BCE_CLAMP;
    if c < lo {
        (lo, true)
    } else if c > hi {
        (hi, true)
    } else {
        (c, false)
    }
}

pub(crate) fn bce(c: f64, target: f64) -> f64 {
    let (c, _) = clamp_activation(c);
    -(target * c.ln() + (1.0 - target) * (1.0 - c).ln())
}

/// Mean binary cross-entropy between concept activations and desired values.
pub fn concept_label_loss(acts: &ConceptActivations, targets: &[ConceptTarget]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("concept label targets"));
    }
    let mut total = 0.0;
    for t in targets {
        if t.concept >= acts.len() {
            return Err(Error::InvalidIndex {
                what: "concept",
                index: t.concept,
                len: acts.len(),
            });
        }
        total += bce(acts.value(t.concept), t.desired);
    }
    Ok(total / targets.len() as f64)
}

/// `Σ_i (1 - region_i) attr_i(c_j, x)²`.
pub fn concept_region_loss(model: &PrototypeModel, image: &Raster, j: usize, region: &Mask) -> Result<f64> {
    if (region.height(), region.width()) != (image.height(), image.width()) {
        return Err(Error::Dimension(format!(
            "region {}x{} for image {}x{}",
            region.height(),
            region.width(),
            image.height(),
            image.width()
        )));
    }
    let map = concept_attribution(model, j, image)?;
    let mut total = 0.0;
    for y in 0..map.patch.0 {
        for x in 0..map.patch.1 {
            if !region.get(map.origin.0 + y, map.origin.1 + x) {
                let a = map.window[y * map.patch.1 + x];
                total += a * a;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Match, PatchGeometry};

    const G: PatchGeometry = PatchGeometry {
        height: 4,
        width: 4,
        stride: 2,
    };

    fn tiny(weights: Vec<f64>) -> PrototypeModel {
        let k = weights.len();
        PrototypeModel::from_parts(1, k, G, 6.0, vec![0.5; k * 48], weights).unwrap()
    }

    fn acts(values: &[f64]) -> ConceptActivations {
        ConceptActivations {
            matches: values
                .iter()
                .map(|&a| Match {
                    position: 0,
                    origin: (0, 0),
                    sq_dist: 0.0,
                    activation: a,
                })
                .collect(),
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.2; 5], 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&[1.0, 1e-20], 1).unwrap(), -(1e-12f64).ln());
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn attr_index_cases() {
        let m = tiny(vec![1.0, -2.0]);
        assert_eq!(attr_index_loss(&m, 0, &[true, true]).unwrap(), 0.0);
        assert_eq!(attr_index_loss(&m, 0, &[false, false]).unwrap(), 5.0);
        assert!(attr_index_loss(&m, 0, &[false]).is_err());
    }

    #[test]
    fn relevance_cases() {
        let m = tiny(vec![0.0, 0.7]);
        let rel = |js: &[usize]| js.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(relevance_penalty(&m, 0, &rel(&[0]), 0.5).unwrap(), 0.25);
        assert_eq!(relevance_penalty(&m, 0, &rel(&[1]), 0.5).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for w in [0.0, 0.1, 0.2, 0.4, 0.6] {
            let m = tiny(vec![w, 0.0]);
            let p = relevance_penalty(&m, 0, &rel(&[0]), 0.5).unwrap();
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn concept_label_cases() {
        let t = |desired| vec![ConceptTarget { concept: 0, desired }];
        assert!(concept_label_loss(&acts(&[1.0]), &t(1.0)).unwrap() < 1.1e-6);
        assert!((concept_label_loss(&acts(&[0.5]), &t(1.0)).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(
            concept_label_loss(&acts(&[0.5]), &t(0.0)).unwrap(),
            concept_label_loss(&acts(&[0.5]), &t(1.0)).unwrap()
        );
        assert!(concept_label_loss(&acts(&[0.5]), &[]).is_err());
    }

    #[test]
    fn concept_region_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let img = Raster::from_values(10, 10, (0..300).map(|_| rng.gen()).collect()).unwrap();
        let m = PrototypeModel::from_parts(1, 1, G, 6.0, (0..48).map(|_| rng.gen()).collect(), vec![1.0]).unwrap();
        assert_eq!(concept_region_loss(&m, &img, 0, &Mask::filled(10, 10, true)).unwrap(), 0.0);
        assert!(concept_region_loss(&m, &img, 0, &Mask::new(10, 10)).unwrap() > 0.0);
        let map = concept_attribution(&m, 0, &img).unwrap();
        let mut field = Mask::new(10, 10);
        for y in 0..4 {
            for x in 0..4 {
                field.set(map.origin.0 + y, map.origin.1 + x, true);
            }
        }
        assert_eq!(concept_region_loss(&m, &img, 0, &field).unwrap(), 0.0);
        assert!(concept_region_loss(&m, &img, 0, &Mask::new(9, 10)).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::default().validate().is_ok());
        let bad = LossSpec {
            lambda_aggr: -1.0,
            ..LossSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
