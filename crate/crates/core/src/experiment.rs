//! The three-condition confounder experiment.
//!
//! Each run trains a fresh model on the confounded data, lets the scripted
//! oracle mark confounder concepts, and refines under one corrective loss.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::losses::LossSpec;
use crate::model::{ModelConfig, PrototypeModel};
use crate::protocol::{Author, DebugSession, FeedbackAction, SessionConfig};
use crate::persist::{checkpoint_hash, save_checkpoint, write_atomic};
use crate::pnm::encode_ppm;
use crate::render::concept_panel;
use crate::shapes::{Dataset, ImageId};
use crate::trainer::{MetricsRecord, Schedule, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    None,
    Attr,
    Aggr,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::None, Condition::Attr, Condition::Aggr];

    pub fn name(self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Attr => "attr",
            Condition::Aggr => "aggr",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}; expected none, attr or aggr")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    /// Coefficients of the corrective term of the active condition and of
    /// the concept-level terms. The inactive index or aggregation term is
    /// switched off per condition.
    pub loss: LossSpec,
    pub oracle_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            loss: LossSpec {
                kernel: KernelConfig::default(),
                ..LossSpec::default()
            },
            oracle_threshold: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn session_config(&self, condition: Condition, seed: u64) -> SessionConfig {
        SessionConfig {
            model: self.model.clone(),
            schedule: Schedule {
                seed,
                ..self.schedule.clone()
            },
            loss: self.loss_for(condition),
            oracle_threshold: self.oracle_threshold,
            ..SessionConfig::default()
        }
    }

    pub fn loss_for(&self, condition: Condition) -> LossSpec {
        let mut spec = self.loss;
        match condition {
            Condition::None => {
                spec.lambda_attr = 0.0;
                spec.lambda_aggr = 0.0;
            }
            Condition::Attr => spec.lambda_aggr = 0.0,
            Condition::Aggr => spec.lambda_attr = 0.0,
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeReport {
    pub concept: usize,
    pub owner_class: usize,
    /// Weight of the concept for the confounded class.
    pub weight: f64,
    pub confound_similarity: f64,
    pub representative: ImageId,
    pub representative_activation: f64,
    /// Best IoU between the attribution support at the top representative
    /// and any single shape satisfying that image's class formula.
    pub causal_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub train_accuracy_per_class: Vec<f64>,
    pub test_accuracy: f64,
    pub test_accuracy_per_class: Vec<f64>,
    pub confound_reliance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub condition: Condition,
    pub seed: u64,
    pub dataset_hash: String,
    pub confounded_class: usize,
    pub marked_concepts: Vec<usize>,
    pub initial: StageReport,
    #[serde(rename = "final")]
    pub last: StageReport,
    pub prototypes: Vec<PrototypeReport>,
    pub initial_checkpoint: String,
    pub final_checkpoint: String,
}

impl ExperimentSummary {
    pub fn best_confounded_iou(&self) -> f64 {
        self.prototypes
            .iter()
            .filter(|p| p.owner_class == self.confounded_class)
            .map(|p| p.causal_iou)
            .fold(0.0, f64::max)
    }
}

pub struct ExperimentRun {
    pub summary: ExperimentSummary,
    pub initial_model: PrototypeModel,
    /// The session after the refinement round.
    pub session: DebugSession,
}

/// Best IoU of concept `j`'s attribution support with a causal shape at its
/// top training representative.
pub fn causal_iou(model: &PrototypeModel, j: usize, dataset: &Dataset) -> Result<(f64, ImageId, f64)> {
    let panel = concept_panel(model, j, &dataset.train)?;
    let sample = dataset
        .get(panel.representative.image)
        .ok_or(Error::Empty("representative sample"))?;
    let support = panel.attribution.support();
    let iou = dataset
        .causal_shape_masks(sample)
        .iter()
        .map(|m| support.iou(m))
        .fold(0.0, f64::max);
    Ok((iou, panel.representative.image, panel.representative.activation))
}

fn stage(trainer: &Trainer, model: &PrototypeModel) -> Result<StageReport> {
    let (_, train_accuracy_per_class) = trainer.train_accuracy(model);
    let (test_accuracy, test_accuracy_per_class) = trainer.test_accuracy(model);
    Ok(StageReport {
        train_accuracy_per_class,
        test_accuracy,
        test_accuracy_per_class,
        confound_reliance: trainer.probe().reliance(model)?,
    })
}

/// Trains, applies oracle feedback and refines under `condition`.
pub fn run_experiment(
    dataset: &Arc<Dataset>,
    config: &ExperimentConfig,
    condition: Condition,
    seed: u64,
    on_epoch: &mut dyn FnMut(&MetricsRecord),
) -> Result<ExperimentRun> {
    let mut session = DebugSession::new(format!("{condition}-{seed}"), Arc::clone(dataset), config.session_config(condition, seed))?;
    session.run_round(on_epoch)?;
    let initial_model = session.model.clone();
    let initial = stage(session.trainer(), &session.model)?;

    let mut marked = Vec::new();
    if condition != Condition::None {
        for action in session.scripted_oracle()? {
            if let FeedbackAction::MarkIrrelevant { concept, .. } = action {
                marked.push(concept);
            }
            session.submit_feedback(action, Author::ScriptedOracle)?;
        }
    }
    session.run_round(on_epoch)?;
    let trainer = Arc::clone(session.trainer());
    let model = session.model.clone();
    let last = stage(&trainer, &model)?;

    let sims = trainer.probe().similarities(&model)?;
    let class = trainer.probe().class;
    let prototypes = (0..model.k())
        .map(|j| {
            let (causal_iou, representative, representative_activation) = causal_iou(&model, j, dataset)?;
            Ok(PrototypeReport {
                concept: j,
                owner_class: model.owner_class(j),
                weight: model.weight(class, j),
                confound_similarity: sims[j],
                representative,
                representative_activation,
                causal_iou,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ExperimentRun {
        summary: ExperimentSummary {
            condition,
            seed,
            dataset_hash: dataset.hash(),
            confounded_class: class,
            marked_concepts: marked,
            initial,
            last,
            prototypes,
            initial_checkpoint: checkpoint_hash(&initial_model),
            final_checkpoint: checkpoint_hash(&model),
        },
        initial_model,
        session,
    })
}

impl ExperimentRun {
    /// Writes `summary.json`, `metrics.jsonl`, `checkpoints/` and PPM panels
    /// for the confounded class's concepts under `dir`.
    pub fn write(&self, dir: &Path, dataset: &Dataset) -> Result<()> {
        std::fs::create_dir_all(dir.join("panels"))?;
        save_checkpoint(&dir.join("checkpoints").join("initial.json"), &self.initial_model)?;
        save_checkpoint(&dir.join("checkpoints").join("final.json"), &self.session.model)?;
        let mut metrics = Vec::new();
        for r in &self.session.history.records {
            serde_json::to_writer(&mut metrics, r)?;
            metrics.push(b'\n');
        }
        write_atomic(&dir.join("metrics.jsonl"), &metrics)?;
        for j in 0..self.session.model.k() {
            if self.session.model.owner_class(j) != self.summary.confounded_class {
                continue;
            }
            for (tag, model) in [("initial", &self.initial_model), ("final", &self.session.model)] {
                let panel = concept_panel(model, j, &dataset.train)?.compose(4)?;
                write_atomic(&dir.join("panels").join(format!("{tag}_concept{j}.ppm")), &encode_ppm(&panel))?;
            }
        }
        let mut summary = serde_json::to_vec_pretty(&self.summary)?;
        summary.push(b'\n');
        write_atomic(&dir.join("summary.json"), &summary)?;
        Ok(())
    }
}
