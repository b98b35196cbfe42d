//! Optimization loop: an initial joint phase on cross-entropy, then
//! refinement rounds alternating concept and weight phases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kappa_act, profile_concept, profile_prototype, ConceptProfile, ReferenceSet};
use crate::losses::{LossSpec, Supervision};
use crate::memory::Memory;
use crate::model::{argmax, PatchBank, PatchGeometry, PrototypeModel};
use crate::objective::{evaluate, Example, Gradients, KernelMatrix, LossTerms, Objective, Wants};
use crate::seeding::derive_seed;
use crate::shapes::{atom_probe_patches, render_atom_patch, Atom, Dataset, ImageId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub initial_epochs: usize,
    pub refine_epochs: usize,
    pub phase_length: usize,
    pub phase_order: PhaseOrder,
    pub learning_rate: f64,
    /// Step size for prototypes; `None` reuses `learning_rate`.
    pub prototype_learning_rate: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub stability_window: usize,
    pub stability_delta: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            initial_epochs: 20,
            refine_epochs: 25,
            phase_length: 5,
            phase_order: PhaseOrder::ConceptsFirst,
            learning_rate: 0.05,
            prototype_learning_rate: Some(0.5),
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            stability_window: 5,
            stability_delta: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOrder {
    ConceptsFirst,
    WeightsFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Joint,
    Concepts,
    Weights,
}

impl Phase {
    fn wants(self) -> Wants {
        Wants {
            prototypes: self != Phase::Weights,
            weights: self != Phase::Concepts,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if let Some(lr) = self.prototype_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("prototype_learning_rate must be finite and >= 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.phase_length == 0 || self.refine_epochs % self.phase_length != 0 {
            return Err(Error::Config(format!(
                "refine_epochs {} must be a multiple of phase_length {}",
                self.refine_epochs, self.phase_length
            )));
        }
        if self.stability_window < 2 {
            return Err(Error::Config("stability_window must be at least 2".into()));
        }
        Ok(())
    }

    /// Phase of each refinement block of `phase_length` epochs.
    pub fn refine_phases(&self) -> Vec<Phase> {
        let blocks = self.refine_epochs / self.phase_length.max(1);
        let (first, second) = match self.phase_order {
            PhaseOrder::ConceptsFirst => (Phase::Concepts, Phase::Weights),
            PhaseOrder::WeightsFirst => (Phase::Weights, Phase::Concepts),
        };
        (0..blocks).map(|i| if i % 2 == 0 { first } else { second }).collect()
    }

    fn prototype_lr(&self) -> f64 {
        self.prototype_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Position in the session history, counting from zero.
    pub epoch: usize,
    pub round: u32,
    pub phase: Phase,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_accuracy_per_class: Vec<f64>,
    /// Accuracy on the deconfounded test split.
    pub test_accuracy: f64,
    pub test_accuracy_per_class: Vec<f64>,
    pub terms: LossTerms,
    pub confound_reliance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<MetricsRecord>,
}

impl MetricsHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// True when the deconfounded test accuracy moved by at most `delta` over the
/// last `window` epochs.
pub fn is_stable(history: &MetricsHistory, window: usize, delta: f64) -> bool {
    if window < 2 || history.len() < window {
        return false;
    }
    let tail = &history.records[history.len() - window..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.test_accuracy), hi.max(r.test_accuracy))
    });
    hi - lo <= delta
}

/// Similarity of concepts to a canonical rendering of the confounder.
///
/// Concepts are profiled on patch-sized renders of every atom. The score is
/// `κ_act(template, c_j) / κ_act(template, template)`, clamped to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ConfoundProbe {
    pub class: usize,
    pub atom: Atom,
    reference: ReferenceSet,
    template: ConceptProfile,
    self_similarity: f64,
}

impl ConfoundProbe {
    pub fn new(dataset: &Dataset, geometry: PatchGeometry, tau: f64) -> Result<Self> {
        let config = dataset.config();
        let (a, b) = (geometry.height, geometry.width);
        let reference = ReferenceSet::new(&atom_probe_patches(config.shape_size, a, b), geometry)?;
        let patch = render_atom_patch(config.confounder, config.shape_size, a, b);
        let template = profile_prototype(&reference, patch.data(), tau, usize::MAX, false);
        let self_similarity = kappa_act(&template, &template, 1.0)?;
        Ok(Self {
            class: config.confounded_class,
            atom: config.confounder,
            reference,
            template,
            self_similarity,
        })
    }

    pub fn similarity(&self, model: &PrototypeModel, j: usize) -> Result<f64> {
        let live = profile_concept(model, j, &self.reference, false)?;
        Ok((kappa_act(&self.template, &live, 1.0)? / self.self_similarity).clamp(0.0, 1.0))
    }

    pub fn reference(&self) -> &ReferenceSet {
        &self.reference
    }

    pub fn template(&self) -> &ConceptProfile {
        &self.template
    }

    pub fn similarities(&self, model: &PrototypeModel) -> Result<Vec<f64>> {
        (0..model.k()).map(|j| self.similarity(model, j)).collect()
    }

    /// Concepts owned by the confounded class whose similarity exceeds `theta`.
    pub fn confounder_concepts(&self, model: &PrototypeModel, theta: f64) -> Result<Vec<usize>> {
        let sims = self.similarities(model)?;
        Ok((0..model.k())
            .filter(|&j| model.owner_class(j) == self.class && sims[j] > theta)
            .collect())
    }

    /// `max_j sim(template, c_j) · |w_j| / max_j' |w_j'|` on the confounded class.
    pub fn reliance(&self, model: &PrototypeModel) -> Result<f64> {
        confound_reliance(model, self.class, &self.similarities(model)?)
    }
}

/// Combines per-concept confounder similarities with relative weight
/// magnitudes of `class`. Zero when every weight of the class is zero.
pub fn confound_reliance(model: &PrototypeModel, class: usize, similarities: &[f64]) -> Result<f64> {
    model.check_class(class)?;
    if similarities.len() != model.k() {
        return Err(Error::Dimension(format!(
            "{} similarities for {} concepts",
            similarities.len(),
            model.k()
        )));
    }
    let row = model.weight_row(class);
    let max_w = row.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_w == 0.0 {
        return Ok(0.0);
    }
    Ok(row
        .iter()
        .zip(similarities)
        .map(|(w, s)| s * w.abs() / max_w)
        .fold(0.0, f64::max))
}

/// Progress notifications emitted while training.
pub enum TrainEvent<'a> {
    Epoch(&'a MetricsRecord),
    PhaseEnd { phase: Phase, model: &'a PrototypeModel },
}

/// Precomputed patch banks for the training and deconfounded test splits.
pub struct Trainer {
    num_classes: usize,
    image_height: usize,
    /// Training split; doubles as the Monte Carlo reference set.
    reference: ReferenceSet,
    train_ids: Vec<ImageId>,
    train_labels: Vec<usize>,
    test_banks: Vec<PatchBank>,
    test_labels: Vec<usize>,
    probe: ConfoundProbe,
}

struct Momentum {
    prototypes: Vec<f64>,
    weights: Vec<f64>,
}

impl Trainer {
    pub fn new(dataset: &Dataset, geometry: PatchGeometry, tau: f64) -> Result<Self> {
        if dataset.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let images: Vec<_> = dataset.train.iter().map(|s| s.image.clone()).collect();
        let reference = ReferenceSet::new(&images, geometry)?;
        let test_banks = dataset
            .test
            .iter()
            .map(|s| PatchBank::new(&s.image, geometry))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_classes: dataset.config().classes,
            image_height: dataset.config().image_size,
            train_ids: dataset.train.iter().map(|s| s.id).collect(),
            train_labels: dataset.train.iter().map(|s| s.scene.label).collect(),
            test_labels: dataset.test.iter().map(|s| s.scene.label).collect(),
            test_banks,
            reference,
            probe: ConfoundProbe::new(dataset, geometry, tau)?,
        })
    }

    pub fn reference(&self) -> &ReferenceSet {
        &self.reference
    }

    pub fn probe(&self) -> &ConfoundProbe {
        &self.probe
    }

    /// Joint training on cross-entropy for `initial_epochs` epochs.
    pub fn train_initial(
        &self,
        model: &mut PrototypeModel,
        schedule: &Schedule,
        history: &mut MetricsHistory,
        on_event: &mut dyn FnMut(TrainEvent),
    ) -> Result<()> {
        schedule.validate()?;
        let spec = LossSpec::cross_entropy_only();
        let supervision = Supervision::default();
        let obj = Objective {
            spec: &spec,
            memory: None,
            supervision: &supervision,
            reference: None,
        };
        self.run_phase(model, schedule, &obj, Phase::Joint, schedule.initial_epochs, 0, history, on_event)
    }

    /// One refinement round: `refine_epochs` epochs in alternating phases
    /// with every active corrective term.
    #[allow(clippy::too_many_arguments)]
    pub fn train_refine(
        &self,
        model: &mut PrototypeModel,
        schedule: &Schedule,
        spec: &LossSpec,
        memory: &Memory,
        supervision: &Supervision,
        round: u32,
        history: &mut MetricsHistory,
        on_event: &mut dyn FnMut(TrainEvent),
    ) -> Result<()> {
        schedule.validate()?;
        spec.validate()?;
        let obj = Objective {
            spec,
            memory: Some(memory),
            supervision,
            reference: Some(&self.reference),
        };
        for phase in schedule.refine_phases() {
            self.run_phase(model, schedule, &obj, phase, schedule.phase_length, round, history, on_event)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn run_phase(
        &self,
        model: &mut PrototypeModel,
        schedule: &Schedule,
        obj: &Objective,
        phase: Phase,
        epochs: usize,
        round: u32,
        history: &mut MetricsHistory,
        on_event: &mut dyn FnMut(TrainEvent),
    ) -> Result<()> {
        let wants = phase.wants();
        let mut velocity = Momentum {
            prototypes: vec![0.0; model.prototypes().len()],
            weights: vec![0.0; model.weights().len()],
        };
        // kernel matrix is fixed for a weight phase
        let fixed_kernel = match (phase, obj.memory) {
            (Phase::Weights, Some(memory)) if obj.spec.lambda_aggr > 0.0 && !memory.is_empty() => {
                Some(KernelMatrix::compute(model, memory, obj.reference, &obj.spec.kernel)?)
            }
            _ => None,
        };
        let n = self.train_ids.len();
        for _ in 0..epochs {
            let epoch = history.len();
            let last_good = model.clone();
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, &[0x7EA1, round as u64, epoch as u64]));
            order.shuffle(&mut rng);
            let mut epoch_terms = LossTerms::default();
            let mut seen = 0usize;
            for chunk in order.chunks(schedule.batch_size) {
                let batch: Vec<Example> = chunk
                    .iter()
                    .map(|&i| Example {
                        id: self.train_ids[i],
                        label: self.train_labels[i],
                        bank: &self.reference.banks()[i],
                        image_height: self.image_height,
                    })
                    .collect();
                let step = evaluate(model, &batch, obj, fixed_kernel.as_ref(), wants).and_then(|(terms, _, grads)| {
                    apply(model, &grads, &mut velocity, schedule, wants)?;
                    Ok(terms)
                });
                let terms = match step {
                    Ok(t) => t,
                    Err(e) => {
                        *model = last_good;
                        return Err(Error::Diverged {
                            epoch,
                            source: Box::new(e),
                        });
                    }
                };
                accumulate(&mut epoch_terms, &terms, chunk.len() as f64);
                seen += chunk.len();
            }
            scale(&mut epoch_terms, 1.0 / seen as f64);
            let record = self.record(model, epoch, round, phase, epoch_terms)?;
            on_event(TrainEvent::Epoch(&record));
            history.records.push(record);
        }
        on_event(TrainEvent::PhaseEnd { phase, model });
        Ok(())
    }

    fn record(&self, model: &PrototypeModel, epoch: usize, round: u32, phase: Phase, terms: LossTerms) -> Result<MetricsRecord> {
        let (train_accuracy, train_accuracy_per_class) =
            accuracy(model, self.reference.banks(), &self.train_labels, self.num_classes);
        let (test_accuracy, test_accuracy_per_class) = accuracy(model, &self.test_banks, &self.test_labels, self.num_classes);
        Ok(MetricsRecord {
            epoch,
            round,
            phase,
            train_loss: terms.total,
            train_accuracy,
            train_accuracy_per_class,
            test_accuracy,
            test_accuracy_per_class,
            terms,
            confound_reliance: self.probe.reliance(model)?,
        })
    }

    pub fn test_accuracy(&self, model: &PrototypeModel) -> (f64, Vec<f64>) {
        accuracy(model, &self.test_banks, &self.test_labels, self.num_classes)
    }

    pub fn train_accuracy(&self, model: &PrototypeModel) -> (f64, Vec<f64>) {
        accuracy(model, self.reference.banks(), &self.train_labels, self.num_classes)
    }
}

fn apply(model: &mut PrototypeModel, grads: &Gradients, v: &mut Momentum, schedule: &Schedule, wants: Wants) -> Result<()> {
    let mu = schedule.momentum;
    if wants.prototypes {
        let lr = schedule.prototype_lr();
        for ((p, vel), g) in model.prototypes_mut().iter_mut().zip(&mut v.prototypes).zip(&grads.prototypes) {
            *vel = mu * *vel + g;
            // prototypes stay valid pixel patches
            *p = (*p - lr * *vel).clamp(0.0, 1.0);
        }
    }
    if wants.weights {
        let lr = schedule.learning_rate;
        for ((w, vel), g) in model.weights_mut().iter_mut().zip(&mut v.weights).zip(&grads.weights) {
            *vel = mu * *vel + g;
            *w -= lr * *vel;
        }
    }
    if model.prototypes().iter().chain(model.weights()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { term: "parameters" });
    }
    Ok(())
}

fn accumulate(acc: &mut LossTerms, t: &LossTerms, w: f64) {
    acc.cross_entropy += w * t.cross_entropy;
    acc.attr += w * t.attr;
    acc.aggr += w * t.aggr;
    acc.relevance += w * t.relevance;
    acc.concept_label += w * t.concept_label;
    acc.concept_region += w * t.concept_region;
    acc.total += w * t.total;
}

fn scale(acc: &mut LossTerms, s: f64) {
    let copy = *acc;
    *acc = LossTerms::default();
    accumulate(acc, &copy, s);
}

/// Overall and per-class accuracy. Classes without examples report zero.
pub fn accuracy(model: &PrototypeModel, banks: &[PatchBank], labels: &[usize], num_classes: usize) -> (f64, Vec<f64>) {
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (bank, &y) in banks.iter().zip(labels) {
        let pred = argmax(&model.scores(&model.activations_bank(bank)));
        total[y] += 1;
        hit[y] += usize::from(pred == y);
    }
    let per_class = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let all = total.iter().sum::<usize>();
    let overall = if all == 0 { 0.0 } else { hit.iter().sum::<usize>() as f64 / all as f64 };
    (overall, per_class)
}
