//! The interactive debugging loop.
//!
//! A [`DebugSession`] moves through `idle → training → awaiting_feedback →
//! training → … → stable`. The first round trains from scratch; every later
//! round refines the model under the feedback collected so far. Rounds are
//! split into [`DebugSession::begin_round`], [`RoundJob::run`] and
//! [`DebugSession::finish_round`] so a host can train without holding the
//! session.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attribution::{prototype_attribution, representatives, AttributionMap, Representative};
use crate::error::{Error, Result};
use crate::kernels::{kappa_act, profile_concept};
use crate::losses::{ConceptTarget, LossSpec, RegionTarget, Supervision};
use crate::memory::{FeedbackScope, Memory};
use crate::model::{argmax, predict_proba, ModelConfig, PrototypeModel};
use crate::raster::Mask;
use crate::shapes::{Dataset, ImageId, Sample, Split};
use crate::trainer::{is_stable, MetricsHistory, MetricsRecord, Schedule, TrainEvent, Trainer};

pub const MIN_REPRESENTATIVES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub loss: LossSpec,
    pub oracle_threshold: f64,
    /// Representatives shown per concept.
    pub representatives: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            loss: LossSpec::default(),
            oracle_threshold: 0.5,
            representatives: MIN_REPRESENTATIVES,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.representatives < MIN_REPRESENTATIVES {
            return Err(Error::Config(format!(
                "need at least {MIN_REPRESENTATIVES} representatives per concept, got {}",
                self.representatives
            )));
        }
        if !(0.0..=1.0).contains(&self.oracle_threshold) {
            return Err(Error::Config(format!(
                "oracle threshold must lie in [0, 1], got {}",
                self.oracle_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Training,
    AwaitingFeedback,
    Stable,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Idle => "idle",
            SessionState::Training => "training",
            SessionState::AwaitingFeedback => "awaiting_feedback",
            SessionState::Stable => "stable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Human,
    ScriptedOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackAction {
    MarkIrrelevant { concept: usize, scope: FeedbackScope },
    ConceptLabel { image: ImageId, concept: usize, desired: bool },
    ConceptRegion { image: ImageId, concept: usize, region: Mask },
    MarkRelevant { concept: usize, class: usize },
}

/// Folds the concept-level and relevance feedback of `log` into supervision.
/// Irrelevance feedback lives in memory instead.
pub fn supervision_from(log: &[Feedback]) -> Supervision {
    let mut s = Supervision::default();
    for f in log {
        apply_supervision(&mut s, &f.action);
    }
    s
}

fn apply_supervision(s: &mut Supervision, action: &FeedbackAction) {
    match action {
        FeedbackAction::MarkIrrelevant { .. } => {}
        FeedbackAction::ConceptLabel { image, concept, desired } => {
            s.concept_labels.entry(*image).or_default().push(ConceptTarget {
                concept: *concept,
                desired: if *desired { 1.0 } else { 0.0 },
            });
        }
        FeedbackAction::ConceptRegion { image, concept, region } => {
            s.regions.entry(*image).or_default().push(RegionTarget {
                concept: *concept,
                region: region.clone(),
            });
        }
        FeedbackAction::MarkRelevant { concept, class } => {
            s.relevant.entry(*class).or_default().insert(*concept);
        }
    }
}

/// One entry of the append-only feedback log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    /// Number of completed rounds when the feedback was accepted.
    pub round: u32,
    pub author: Author,
    #[serde(flatten)]
    pub action: FeedbackAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeView {
    #[serde(flatten)]
    pub representative: Representative,
    pub attribution: AttributionMap,
}

/// Evidence about one concept for a human or oracle to judge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptPacket {
    pub concept: usize,
    pub owner_class: usize,
    /// Weight of the concept for every class.
    pub weights: Vec<f64>,
    pub relevance: f64,
    pub representatives: Vec<RepresentativeView>,
    /// `κ_act` against every concept, indexed by concept.
    pub kappa_act: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub concept: usize,
    pub weight: f64,
    pub activation: f64,
    pub origin: (usize, usize),
    pub attribution: AttributionMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub image: ImageId,
    pub class: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub score: f64,
    pub contributions: Vec<Contribution>,
}

pub struct DebugSession {
    pub id: String,
    pub config: SessionConfig,
    pub state: SessionState,
    /// Completed rounds.
    pub round: u32,
    pub model: PrototypeModel,
    pub memory: Memory,
    pub supervision: Supervision,
    pub feedback: Vec<Feedback>,
    pub history: MetricsHistory,
    /// Where the dataset can be found again, as understood by the host.
    pub dataset_ref: Option<String>,
    dataset: Arc<Dataset>,
    trainer: Arc<Trainer>,
}

impl fmt::Debug for DebugSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DebugSession")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("round", &self.round)
            .field("feedback", &self.feedback.len())
            .finish_non_exhaustive()
    }
}

/// Everything a round needs, detached from the session.
pub struct RoundJob {
    trainer: Arc<Trainer>,
    round: u32,
    previous: SessionState,
    model: PrototypeModel,
    memory: Memory,
    supervision: Supervision,
    history: MetricsHistory,
    schedule: Schedule,
    loss: LossSpec,
}

pub struct RoundOutcome {
    round: u32,
    model: PrototypeModel,
    history: MetricsHistory,
}

/// State to restore a round into when it fails.
pub struct RoundFailure {
    pub previous: SessionState,
    pub error: Error,
}

impl RoundJob {
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn run(self, on_event: &mut dyn FnMut(TrainEvent)) -> std::result::Result<RoundOutcome, RoundFailure> {
        let RoundJob {
            trainer,
            round,
            previous,
            mut model,
            memory,
            supervision,
            mut history,
            schedule,
            loss,
        } = self;
        let res = if round == 1 {
            trainer.train_initial(&mut model, &schedule, &mut history, on_event)
        } else {
            trainer.train_refine(&mut model, &schedule, &loss, &memory, &supervision, round, &mut history, on_event)
        };
        match res {
            Ok(()) => Ok(RoundOutcome { round, model, history }),
            Err(error) => Err(RoundFailure { previous, error }),
        }
    }
}

impl DebugSession {
    pub fn new(id: impl Into<String>, dataset: Arc<Dataset>, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let data = dataset.config();
        if data.classes != config.model.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {}",
                config.model.num_classes, data.classes
            )));
        }
        let trainer = Arc::new(Trainer::new(&dataset, config.model.patch, config.model.tau())?);
        let model = PrototypeModel::initialize(&config.model, &dataset.train, config.schedule.seed)?;
        Ok(Self {
            id: id.into(),
            memory: Memory::new(trainer.reference()),
            state: SessionState::Idle,
            round: 0,
            model,
            supervision: Supervision::default(),
            feedback: Vec::new(),
            history: MetricsHistory::default(),
            dataset_ref: None,
            config,
            dataset,
            trainer,
        })
    }

    /// Reassembles a session from persisted parts.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        id: String,
        dataset: Arc<Dataset>,
        config: SessionConfig,
        state: SessionState,
        round: u32,
        model: PrototypeModel,
        memory: Memory,
        feedback: Vec<Feedback>,
        history: MetricsHistory,
    ) -> Result<Self> {
        if state == SessionState::Training {
            return Err(Error::State {
                op: "restore",
                state: state.to_string(),
            });
        }
        let mut session = Self::new(id, dataset, config)?;
        if memory.reference_set_id != session.memory.reference_set_id {
            return Err(Error::Profile("memory was built on a different reference set".into()));
        }
        if model.k() != session.model.k() || model.geometry() != session.model.geometry() {
            return Err(Error::Dimension("checkpoint does not match the session config".into()));
        }
        session.state = state;
        session.round = round;
        session.model = model;
        session.memory = memory;
        session.supervision = supervision_from(&feedback);
        session.feedback = feedback;
        session.history = history;
        Ok(session)
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn trainer(&self) -> &Arc<Trainer> {
        &self.trainer
    }

    fn require(&self, op: &'static str, allowed: &[SessionState]) -> Result<()> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(Error::State {
                op,
                state: self.state.to_string(),
            })
        }
    }

    /// Detaches the next round and marks the session as training.
    pub fn begin_round(&mut self) -> Result<RoundJob> {
        self.require("run_round", &[SessionState::Idle, SessionState::AwaitingFeedback])?;
        let job = RoundJob {
            trainer: Arc::clone(&self.trainer),
            round: self.round + 1,
            previous: self.state,
            model: self.model.clone(),
            memory: self.memory.clone(),
            supervision: self.supervision.clone(),
            history: self.history.clone(),
            schedule: self.config.schedule.clone(),
            loss: self.config.loss,
        };
        self.state = SessionState::Training;
        Ok(job)
    }

    /// Commits a finished round, or rolls the state back on failure.
    pub fn finish_round(&mut self, outcome: std::result::Result<RoundOutcome, RoundFailure>) -> Result<()> {
        self.require("finish_round", &[SessionState::Training])?;
        match outcome {
            Ok(done) => {
                self.round = done.round;
                self.model = done.model;
                self.history = done.history;
                self.state = if done.round > 1 && self.round_is_stable() {
                    SessionState::Stable
                } else {
                    SessionState::AwaitingFeedback
                };
                Ok(())
            }
            Err(failure) => {
                self.state = failure.previous;
                Err(failure.error)
            }
        }
    }

    fn round_is_stable(&self) -> bool {
        let s = &self.config.schedule;
        let tail = MetricsHistory {
            records: self
                .history
                .records
                .iter()
                .filter(|r| r.round == self.round)
                .cloned()
                .collect(),
        };
        is_stable(&tail, s.stability_window, s.stability_delta)
    }

    pub fn run_round(&mut self, on_epoch: &mut dyn FnMut(&MetricsRecord)) -> Result<()> {
        let job = self.begin_round()?;
        let outcome = job.run(&mut |e| {
            if let TrainEvent::Epoch(r) = e {
                on_epoch(r)
            }
        });
        self.finish_round(outcome)
    }

    fn train_sample(&self, image: ImageId, field: &'static str) -> Result<&Sample> {
        if image.split != Split::Train {
            return Err(Error::Feedback {
                field,
                message: format!("{image} is not a training image"),
            });
        }
        self.dataset.get(image).ok_or_else(|| Error::Feedback {
            field,
            message: format!("no image {image}"),
        })
    }

    fn check_concept_field(&self, j: usize) -> Result<()> {
        if j < self.model.k() {
            Ok(())
        } else {
            Err(Error::Feedback {
                field: "concept",
                message: format!("concept {j} out of range (k = {})", self.model.k()),
            })
        }
    }

    fn check_class_field(&self, field: &'static str, y: usize) -> Result<()> {
        if y < self.model.num_classes() {
            Ok(())
        } else {
            Err(Error::Feedback {
                field,
                message: format!("class {y} out of range ({} classes)", self.model.num_classes()),
            })
        }
    }

    fn validate_action(&self, action: &FeedbackAction) -> Result<()> {
        match action {
            FeedbackAction::MarkIrrelevant { concept, scope } => {
                self.check_concept_field(*concept)?;
                match *scope {
                    FeedbackScope::Instance { image, class } => {
                        self.train_sample(image, "scope.image")?;
                        self.check_class_field("scope.class", class)
                    }
                    FeedbackScope::Class { class } => self.check_class_field("scope.class", class),
                    FeedbackScope::Global => Ok(()),
                }
            }
            FeedbackAction::ConceptLabel { image, concept, .. } => {
                self.check_concept_field(*concept)?;
                self.train_sample(*image, "image").map(|_| ())
            }
            FeedbackAction::ConceptRegion { image, concept, region } => {
                self.check_concept_field(*concept)?;
                let sample = self.train_sample(*image, "image")?;
                let (h, w) = (sample.image.height(), sample.image.width());
                if region.height() != h || region.width() != w {
                    return Err(Error::Feedback {
                        field: "region",
                        message: format!("region is {}x{}, image is {h}x{w}", region.height(), region.width()),
                    });
                }
                Ok(())
            }
            FeedbackAction::MarkRelevant { concept, class } => {
                self.check_concept_field(*concept)?;
                self.check_class_field("class", *class)
            }
        }
    }

    /// Validates and applies one piece of feedback, then appends it to the log.
    /// Invalid feedback leaves the session untouched.
    pub fn submit_feedback(&mut self, action: FeedbackAction, author: Author) -> Result<&Feedback> {
        self.require("submit_feedback", &[SessionState::AwaitingFeedback, SessionState::Stable])?;
        self.validate_action(&action)?;
        if let FeedbackAction::MarkIrrelevant { concept, scope } = &action {
            self.memory
                .insert(&self.model, *concept, *scope, self.trainer.reference(), self.round)?;
        }
        apply_supervision(&mut self.supervision, &action);
        self.state = SessionState::AwaitingFeedback;
        self.feedback.push(Feedback {
            round: self.round,
            author,
            action,
        });
        Ok(self.feedback.last().expect("just pushed"))
    }

    /// One evidence packet per concept, most relevant first.
    pub fn assess(&self) -> Result<Vec<ConceptPacket>> {
        if self.round == 0 {
            return Err(Error::State {
                op: "assess",
                state: "untrained".into(),
            });
        }
        let model = &self.model;
        let reference = self.trainer.reference();
        let rho = self.config.loss.kernel.rho;
        let profiles = (0..model.k())
            .map(|j| profile_concept(model, j, reference, false))
            .collect::<Result<Vec<_>>>()?;
        let mut kappa = vec![vec![0.0; model.k()]; model.k()];
        for a in 0..model.k() {
            for b in a..model.k() {
                let v = kappa_act(&profiles[a], &profiles[b], rho)?;
                kappa[a][b] = v;
                kappa[b][a] = v;
            }
        }
        let mut packets = (0..model.k())
            .map(|j| {
                let weights: Vec<f64> = (0..model.num_classes()).map(|y| model.weight(y, j)).collect();
                let representatives = representatives(model, j, &self.dataset.train, self.config.representatives)?
                    .into_iter()
                    .map(|r| {
                        let sample = self.dataset.get(r.image).ok_or(Error::Empty("representative sample"))?;
                        let bank = model.bank(&sample.image)?;
                        Ok(RepresentativeView {
                            attribution: prototype_attribution(
                                &bank,
                                sample.image.height(),
                                model.prototype(j),
                                model.tau(),
                                j,
                            ),
                            representative: r,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ConceptPacket {
                    concept: j,
                    owner_class: model.owner_class(j),
                    relevance: weights.iter().fold(0.0f64, |m, w| m.max(w.abs())),
                    weights,
                    representatives,
                    kappa_act: std::mem::take(&mut kappa[j]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        packets.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then(a.concept.cmp(&b.concept)));
        Ok(packets)
    }

    /// Explains the decision for `class` on any image of the dataset.
    pub fn explain(&self, image: ImageId, class: usize) -> Result<ExplanationView> {
        let sample = self.dataset.get(image).ok_or(Error::InvalidIndex {
            what: "image",
            index: image.index,
            len: self.dataset.split(image.split).len(),
        })?;
        self.model.check_class(class)?;
        let bank = self.model.bank(&sample.image)?;
        let acts = self.model.activations_bank(&bank);
        let scores = self.model.scores(&acts);
        let explanation = self.model.explain_activations(&acts, class);
        let contributions = explanation
            .pairs
            .iter()
            .zip(&explanation.locations)
            .enumerate()
            .map(|(j, (&(weight, activation), &origin))| Contribution {
                concept: j,
                weight,
                activation,
                origin,
                attribution: prototype_attribution(
                    &bank,
                    sample.image.height(),
                    self.model.prototype(j),
                    self.model.tau(),
                    j,
                ),
            })
            .collect();
        Ok(ExplanationView {
            image,
            class,
            predicted: argmax(&scores),
            probabilities: predict_proba(&scores),
            score: explanation.score(),
            contributions,
        })
    }

    /// Feedback the scripted oracle would give now: every concept of the
    /// confounded class that resembles the confounder, marked irrelevant for
    /// that class.
    pub fn scripted_oracle(&self) -> Result<Vec<FeedbackAction>> {
        let probe = self.trainer.probe();
        let class = probe.class;
        Ok(probe
            .confounder_concepts(&self.model, self.config.oracle_threshold)?
            .into_iter()
            .map(|concept| FeedbackAction::MarkIrrelevant {
                concept,
                scope: FeedbackScope::Class { class },
            })
            .collect())
    }

    /// Rebuilds a session by rerunning `rounds` rounds and re-submitting each
    /// logged feedback after the round it was given in.
    pub fn replay(
        id: impl Into<String>,
        dataset: Arc<Dataset>,
        config: SessionConfig,
        log: &[Feedback],
        rounds: u32,
    ) -> Result<Self> {
        if let Some(bad) = log.iter().find(|f| f.round == 0 || f.round > rounds) {
            return Err(Error::Config(format!(
                "feedback from round {} cannot be replayed within {rounds} rounds",
                bad.round
            )));
        }
        if log.windows(2).any(|w| w[0].round > w[1].round) {
            return Err(Error::Config("feedback log is not ordered by round".into()));
        }
        let mut session = Self::new(id, dataset, config)?;
        for r in 1..=rounds {
            session.run_round(&mut |_| {})?;
            for f in log.iter().filter(|f| f.round == r) {
                session.submit_feedback(f.action.clone(), f.author)?;
            }
        }
        Ok(session)
    }
}
