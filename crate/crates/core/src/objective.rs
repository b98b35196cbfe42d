//! Batched training objective with analytic gradients.
//!
//! Gradients reach prototypes through activations, through attribution maps
//! (region term and the co-localization kernel) and through the kernel
//! matrix of the aggregation term. Weights receive gradients from every term
//! that reads them.

use serde::{Deserialize, Serialize};

use crate::attribution::{attribution_backward, prototype_attribution};
use crate::error::{Error, Result};
use crate::kernels::{profile_concept, ConceptProfile, KernelConfig, KernelKind, ReferenceSet};
use crate::losses::{bce, clamp_activation, LossSpec, Supervision, PROB_FLOOR};
use crate::memory::Memory;
use crate::model::{predict_proba, ConceptActivations, PatchBank, PrototypeModel};
use crate::shapes::ImageId;

/// One labelled training decision with its precomputed patch bank.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub id: ImageId,
    pub label: usize,
    pub bank: &'a PatchBank,
    pub image_height: usize,
}

/// Everything besides the model that the loss depends on.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub spec: &'a LossSpec,
    pub memory: Option<&'a Memory>,
    pub supervision: &'a Supervision,
    pub reference: Option<&'a ReferenceSet>,
}

/// Unweighted term values averaged over a batch, plus the weighted total.
///
/// Terms whose coefficient is zero are not evaluated and read as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cross_entropy: f64,
    pub attr: f64,
    pub aggr: f64,
    pub relevance: f64,
    pub concept_label: f64,
    pub concept_region: f64,
    pub total: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, other: &LossTerms, s: f64) {
        self.cross_entropy += s * other.cross_entropy;
        self.attr += s * other.attr;
        self.aggr += s * other.aggr;
        self.relevance += s * other.relevance;
        self.concept_label += s * other.concept_label;
        self.concept_region += s * other.concept_region;
        self.total += s * other.total;
    }

    fn check_finite(&self) -> Result<()> {
        let named = [
            ("cross_entropy", self.cross_entropy),
            ("attr", self.attr),
            ("aggr", self.aggr),
            ("relevance", self.relevance),
            ("concept_label", self.concept_label),
            ("concept_region", self.concept_region),
            ("total", self.total),
        ];
        match named.iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite { term }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub prototypes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &PrototypeModel) -> Self {
        Self {
            prototypes: vec![0.0; model.prototypes().len()],
            weights: vec![0.0; model.weights().len()],
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "prototype gradient" });
        }
        if self.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "weight gradient" });
        }
        Ok(())
    }
}

/// Which parameter groups need gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wants {
    pub prototypes: bool,
    pub weights: bool,
}

impl Wants {
    pub const ALL: Wants = Wants {
        prototypes: true,
        weights: true,
    };
    pub const NONE: Wants = Wants {
        prototypes: false,
        weights: false,
    };
}

/// `κ(c̄_e, c_j)` for every memory entry `e` and live concept `j`.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub kernel: KernelConfig,
    pub values: Vec<Vec<f64>>,
    live: Vec<ConceptProfile>,
}

impl KernelMatrix {
    pub fn compute(
        model: &PrototypeModel,
        memory: &Memory,
        reference: Option<&ReferenceSet>,
        kernel: &KernelConfig,
    ) -> Result<Self> {
        let k = model.k();
        let live = if kernel.needs_reference() && !memory.is_empty() {
            let reference = reference.ok_or_else(|| Error::Profile("kernel needs a reference set".into()))?;
            if reference.id() != memory.reference_set_id {
                return Err(Error::Profile("memory was built on a different reference set".into()));
            }
            (0..k)
                .map(|j| profile_concept(model, j, reference, kernel.needs_attributions()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut values = Vec::with_capacity(memory.len());
        for entry in &memory.entries {
            let snap = &entry.snapshot;
            if snap.frozen_p.len() != model.q() {
                return Err(Error::Dimension(format!(
                    "memory prototype has {} entries, model uses {}",
                    snap.frozen_p.len(),
                    model.q()
                )));
            }
            let row = (0..k)
                .map(|j| match kernel.kind {
                    KernelKind::Param => {
                        crate::kernels::kappa_param(&snap.frozen_p, model.prototype(j), kernel.sigma_for(model.q()))
                    }
                    KernelKind::ParamRaw => crate::kernels::kappa_param_raw(&snap.frozen_p, model.prototype(j)),
                    KernelKind::Act => crate::kernels::kappa_act(snap, &live[j], kernel.rho),
                    KernelKind::Attr => crate::kernels::kappa_attr(snap, &live[j], kernel.rho),
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Ok(Self {
            kernel: *kernel,
            values,
            live,
        })
    }

    /// Adds `Σ_{e,j} dk[e][j] · ∂κ(c̄_e, c_j)/∂p_j` to `grad`.
    fn backward(&self, model: &PrototypeModel, memory: &Memory, reference: Option<&ReferenceSet>, dk: &[Vec<f64>], grad: &mut [f64]) {
        let q = model.q();
        let k = model.k();
        let tau = model.tau();
        let rho = self.kernel.rho;
        match self.kernel.kind {
            KernelKind::Param => {
                let s2 = self.kernel.sigma_for(q).powi(2);
                for (e, entry) in memory.entries.iter().enumerate() {
                    let pbar = &entry.snapshot.frozen_p;
                    for j in 0..k {
                        let coef = dk[e][j] * self.values[e][j] * 2.0 / s2;
                        if coef == 0.0 {
                            continue;
                        }
                        let p = model.prototype(j);
                        for (g, (a, b)) in grad[j * q..(j + 1) * q].iter_mut().zip(pbar.iter().zip(p)) {
                            *g += coef * (a - b);
                        }
                    }
                }
            }
            KernelKind::ParamRaw => {
                for (e, entry) in memory.entries.iter().enumerate() {
                    for j in 0..k {
                        let coef = dk[e][j];
                        for (g, a) in grad[j * q..(j + 1) * q].iter_mut().zip(&entry.snapshot.frozen_p) {
                            *g += coef * a;
                        }
                    }
                }
            }
            KernelKind::Act => {
                let Some(reference) = reference else { return };
                let n = reference.len() as f64;
                for j in 0..k {
                    let live = &self.live[j];
                    let p = model.prototype(j);
                    let g = &mut grad[j * q..(j + 1) * q];
                    for (r, bank) in reference.banks().iter().enumerate() {
                        let c = live.activations[r];
                        let mut dc = 0.0;
                        for (e, entry) in memory.entries.iter().enumerate() {
                            let cbar = entry.snapshot.cached_activations[r];
                            let prod = cbar * c;
                            if dk[e][j] != 0.0 && prod > 0.0 {
                                dc += dk[e][j] / n * rho * prod.powf(rho - 1.0) * cbar;
                            }
                        }
                        if dc == 0.0 {
                            continue;
                        }
                        let z = bank.dense_patch(live.matches[r].position);
                        let coef = dc * c * 2.0 / tau;
                        for (gi, (zi, pi)) in g.iter_mut().zip(z.iter().zip(p)) {
                            *gi += coef * (zi - pi);
                        }
                    }
                }
            }
            KernelKind::Attr => {
                let Some(reference) = reference else { return };
                let n = reference.len() as f64;
                for j in 0..k {
                    let live = &self.live[j];
                    let maps = live.attributions.as_deref().unwrap_or(&[]);
                    let p = model.prototype(j);
                    for (r, bank) in reference.banks().iter().enumerate() {
                        let map = &maps[r];
                        let mut upstream = vec![0.0; map.window.len()];
                        let mut any = false;
                        for (e, entry) in memory.entries.iter().enumerate() {
                            if dk[e][j] == 0.0 {
                                continue;
                            }
                            let other = &entry.snapshot.cached_attributions[r];
                            let ip = map.inner(other).unwrap_or(0.0);
                            if ip <= 0.0 {
                                continue;
                            }
                            let coef = dk[e][j] / n * rho * ip.powf(rho - 1.0);
                            for y in 0..map.patch.0 {
                                for x in 0..map.patch.1 {
                                    let v = other.value(map.origin.0 + y, map.origin.1 + x);
                                    if v != 0.0 {
                                        upstream[y * map.patch.1 + x] += coef * v;
                                        any = true;
                                    }
                                }
                            }
                        }
                        if !any {
                            continue;
                        }
                        let z = bank.dense_patch(live.matches[r].position);
                        let d = attribution_backward(&z, p, tau, &upstream);
                        for (gi, di) in grad[j * q..(j + 1) * q].iter_mut().zip(d) {
                            *gi += di;
                        }
                    }
                }
            }
        }
    }
}

/// Term values of one example. `dk` and `grads` are accumulated with scale `scale`.
#[allow(clippy::too_many_arguments)]
fn example(
    model: &PrototypeModel,
    ex: &Example,
    acts: &ConceptActivations,
    obj: &Objective,
    kmat: Option<&KernelMatrix>,
    wants: Wants,
    scale: f64,
    grads: &mut Gradients,
    dk: &mut [Vec<f64>],
) -> Result<LossTerms> {
    let spec = obj.spec;
    let k = model.k();
    let q = model.q();
    let y = ex.label;
    model.check_class(y)?;
    let tau = model.tau();
    let w = model.weight_row(y).to_vec();
    let mut t = LossTerms::default();
    let mut dw_y = vec![0.0; k];
    let mut dc = vec![0.0; k];

    let scores = model.scores(acts);
    let probs = predict_proba(&scores);
    t.cross_entropy = crate::losses::cross_entropy(&probs, y)?;
    if probs[y] >= PROB_FLOOR {
        for (cls, &pc) in probs.iter().enumerate() {
            let ds = pc - if cls == y { 1.0 } else { 0.0 };
            if wants.weights {
                for j in 0..k {
                    grads.weights[cls * k + j] += scale * ds * acts.value(j);
                }
            }
            for j in 0..k {
                dc[j] += ds * model.weight(cls, j);
            }
        }
    }

    if spec.lambda_attr > 0.0 {
        let mask = obj.supervision.concept_mask(k, ex.id, y, obj.memory);
        for j in 0..k {
            if !mask[j] {
                t.attr += w[j] * w[j];
                dw_y[j] += spec.lambda_attr * 2.0 * w[j];
            }
        }
    }

    if spec.lambda_aggr > 0.0 {
        if let (Some(memory), Some(kmat)) = (obj.memory, kmat) {
            for e in memory.query_indices(ex.id, y) {
                for j in 0..k {
                    let kv = kmat.values[e][j];
                    t.aggr += kv * w[j] * w[j];
                    dw_y[j] += spec.lambda_aggr * 2.0 * kv * w[j];
                    dk[e][j] += scale * spec.lambda_aggr * w[j] * w[j];
                }
            }
        }
    }

    if spec.lambda_relevance > 0.0 {
        if let Some(relevant) = obj.supervision.relevant.get(&y) {
            for &j in relevant {
                model.check_concept(j)?;
                let gap = (spec.epsilon_rel - w[j].abs()).max(0.0);
                t.relevance += gap * gap;
                if gap > 0.0 && w[j] != 0.0 {
                    dw_y[j] -= spec.lambda_relevance * 2.0 * gap * w[j].signum();
                }
            }
        }
    }

    if spec.lambda_concept_label > 0.0 {
        if let Some(targets) = obj.supervision.concept_labels.get(&ex.id).filter(|t| !t.is_empty()) {
            let n = targets.len() as f64;
            for target in targets {
                model.check_concept(target.concept)?;
                let c = acts.value(target.concept);
                t.concept_label += bce(c, target.desired) / n;
                let (cc, clamped) = clamp_activation(c);
                if !clamped {
                    let d = -target.desired / cc + (1.0 - target.desired) / (1.0 - cc);
                    dc[target.concept] += spec.lambda_concept_label * d / n;
                }
            }
        }
    }

    let mut region_grads: Vec<(usize, Vec<f64>)> = Vec::new();
    if spec.lambda_concept_region > 0.0 {
        if let Some(regions) = obj.supervision.regions.get(&ex.id) {
            for rt in regions {
                model.check_concept(rt.concept)?;
                if (rt.region.height(), rt.region.width()) != (ex.image_height, ex.bank.image_width()) {
                    return Err(Error::Dimension("region mask does not match image size".into()));
                }
                let j = rt.concept;
                let map = prototype_attribution(ex.bank, ex.image_height, model.prototype(j), tau, j);
                let mut upstream = vec![0.0; map.window.len()];
                for yy in 0..map.patch.0 {
                    for xx in 0..map.patch.1 {
                        if !rt.region.get(map.origin.0 + yy, map.origin.1 + xx) {
                            let i = yy * map.patch.1 + xx;
                            let a = map.window[i];
                            t.concept_region += a * a;
                            upstream[i] = spec.lambda_concept_region * 2.0 * a;
                        }
                    }
                }
                if wants.prototypes {
                    let z = ex.bank.dense_patch(acts.matches[j].position);
                    region_grads.push((j, attribution_backward(&z, model.prototype(j), tau, &upstream)));
                }
            }
        }
    }

    t.total = t.cross_entropy
        + spec.lambda_attr * t.attr
        + spec.lambda_aggr * t.aggr
        + spec.lambda_relevance * t.relevance
        + spec.lambda_concept_label * t.concept_label
        + spec.lambda_concept_region * t.concept_region;

    if wants.weights {
        for j in 0..k {
            grads.weights[y * k + j] += scale * dw_y[j];
        }
    }
    if wants.prototypes {
        for j in 0..k {
            let m = &acts.matches[j];
            if dc[j] == 0.0 || m.activation == 0.0 {
                continue;
            }
            let z = ex.bank.dense_patch(m.position);
            let p = model.prototype(j);
            let coef = scale * dc[j] * m.activation * 2.0 / tau;
            for (g, (zi, pi)) in grads.prototypes[j * q..(j + 1) * q].iter_mut().zip(z.iter().zip(p)) {
                *g += coef * (zi - pi);
            }
        }
        for (j, d) in region_grads {
            for (g, di) in grads.prototypes[j * q..(j + 1) * q].iter_mut().zip(d) {
                *g += scale * di;
            }
        }
    }
    Ok(t)
}

/// Per-example losses and batch-mean gradients. `kmat` is computed when the
/// aggregation term is active and none is supplied.
pub fn evaluate(
    model: &PrototypeModel,
    batch: &[Example],
    obj: &Objective,
    kmat: Option<&KernelMatrix>,
    wants: Wants,
) -> Result<(LossTerms, Vec<LossTerms>, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    obj.spec.validate()?;
    let owned;
    let kmat = match (kmat, obj.memory) {
        (Some(km), _) => Some(km),
        (None, Some(memory)) if obj.spec.lambda_aggr > 0.0 && !memory.is_empty() => {
            owned = KernelMatrix::compute(model, memory, obj.reference, &obj.spec.kernel)?;
            Some(&owned)
        }
        _ => None,
    };
    if let (Some(km), Some(memory)) = (kmat, obj.memory) {
        if km.values.len() != memory.len() {
            return Err(Error::Dimension("kernel matrix does not match memory size".into()));
        }
    }
    let n_entries = obj.memory.map_or(0, |m| m.len());
    let mut dk = vec![vec![0.0; model.k()]; n_entries];
    let mut grads = Gradients::zeros(model);
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossTerms::default();
    let mut per_example = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.bank.geometry() != model.geometry() {
            return Err(Error::Dimension("patch bank geometry differs from model".into()));
        }
        let acts = model.activations_bank(ex.bank);
        let t = example(model, ex, &acts, obj, kmat, wants, scale, &mut grads, &mut dk)?;
        t.check_finite()?;
        mean.add_scaled(&t, scale);
        per_example.push(t);
    }
    if wants.prototypes {
        if let (Some(km), Some(memory)) = (kmat, obj.memory) {
            km.backward(model, memory, obj.reference, &dk, &mut grads.prototypes);
        }
    }
    mean.check_finite()?;
    grads.check_finite()?;
    Ok((mean, per_example, grads))
}

pub fn total_loss(model: &PrototypeModel, batch: &[Example], obj: &Objective, kmat: Option<&KernelMatrix>) -> Result<LossTerms> {
    Ok(evaluate(model, batch, obj, kmat, Wants::NONE)?.0)
}

pub fn forward_backward(
    model: &PrototypeModel,
    batch: &[Example],
    obj: &Objective,
    kmat: Option<&KernelMatrix>,
) -> Result<(LossTerms, Gradients)> {
    let (t, _, g) = evaluate(model, batch, obj, kmat, Wants::ALL)?;
    Ok((t, g))
}
