//! JSON views of session state. Images travel as base64-encoded PPM (colour)
//! or 16-bit PGM (attribution maps) inside the JSON bodies.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use gbmdebug::attribution::AttributionMap;
use gbmdebug::memory::FeedbackScope;
use gbmdebug::persist::checkpoint_hash;
use gbmdebug::pnm::{encode_pgm16, encode_ppm};
use gbmdebug::protocol::{ConceptPacket, DebugSession, ExplanationView, Feedback, SessionConfig, SessionState};
use gbmdebug::raster::Raster;
use gbmdebug::render::{attribution_overlay, prototype_image};
use gbmdebug::shapes::ImageId;
use gbmdebug::trainer::MetricsRecord;
use gbmdebug::Result;

pub fn ppm_b64(raster: &Raster) -> String {
    B64.encode(encode_ppm(raster))
}

fn peak(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

/// Attribution map over the whole image, scaled so its peak is white.
pub fn dense_pgm_b64(map: &AttributionMap) -> String {
    let dense = map.to_dense();
    B64.encode(encode_pgm16(map.image_width, map.image_height, &dense, peak(&dense)))
}

fn window_pgm_b64(map: &AttributionMap) -> String {
    B64.encode(encode_pgm16(map.patch.1, map.patch.0, &map.window, peak(&map.window)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MemoryEntryView {
    pub index: usize,
    pub source_index: usize,
    pub owner_class: usize,
    pub scope: FeedbackScope,
    pub created_round: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub state: SessionState,
    pub round: u32,
    pub dataset: Option<String>,
    pub dataset_hash: String,
    pub num_classes: usize,
    pub concepts: usize,
    pub config: SessionConfig,
    pub checkpoint_hash: String,
    pub feedback: Vec<Feedback>,
    pub memory: Vec<MemoryEntryView>,
    pub epochs: usize,
    pub last_metrics: Option<MetricsRecord>,
}

impl SessionView {
    pub fn of(s: &DebugSession) -> Self {
        Self {
            id: s.id.clone(),
            state: s.state,
            round: s.round,
            dataset: s.dataset_ref.clone(),
            dataset_hash: s.dataset().hash(),
            num_classes: s.model.num_classes(),
            concepts: s.model.k(),
            config: s.config.clone(),
            checkpoint_hash: checkpoint_hash(&s.model),
            feedback: s.feedback.clone(),
            memory: s
                .memory
                .entries
                .iter()
                .enumerate()
                .map(|(index, e)| MemoryEntryView {
                    index,
                    source_index: e.snapshot.source_index,
                    owner_class: e.snapshot.owner_class,
                    scope: e.scope,
                    created_round: e.snapshot.created_round,
                })
                .collect(),
            epochs: s.history.len(),
            last_metrics: s.history.last().cloned(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RepresentativeCard {
    pub image: ImageId,
    pub origin: (usize, usize),
    pub activation: f64,
    pub patch_ppm: String,
    pub overlay_ppm: String,
    /// Attribution over the receptive field, `a × b`.
    pub attribution_pgm: String,
    pub attribution_total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConceptCard {
    pub concept: usize,
    pub owner_class: usize,
    pub weights: Vec<f64>,
    pub relevance: f64,
    pub kappa_act: Vec<f64>,
    pub prototype_ppm: String,
    pub representatives: Vec<RepresentativeCard>,
}

impl ConceptCard {
    pub fn of(s: &DebugSession, packet: ConceptPacket) -> Result<Self> {
        let g = s.model.geometry();
        let representatives = packet
            .representatives
            .into_iter()
            .map(|r| {
                let rep = r.representative;
                let sample = s
                    .dataset()
                    .get(rep.image)
                    .ok_or(gbmdebug::Error::Empty("representative sample"))?;
                let patch = Raster::from_values(
                    g.height,
                    g.width,
                    sample.image.patch(rep.origin.0, rep.origin.1, g.height, g.width),
                )?;
                Ok(RepresentativeCard {
                    image: rep.image,
                    origin: rep.origin,
                    activation: rep.activation,
                    overlay_ppm: ppm_b64(&attribution_overlay(&patch, &r.attribution)),
                    patch_ppm: ppm_b64(&patch),
                    attribution_pgm: window_pgm_b64(&r.attribution),
                    attribution_total: r.attribution.total,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prototype_ppm: ppm_b64(&prototype_image(&s.model, packet.concept)?),
            concept: packet.concept,
            owner_class: packet.owner_class,
            weights: packet.weights,
            relevance: packet.relevance,
            kappa_act: packet.kappa_act,
            representatives,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ContributionCard {
    pub concept: usize,
    pub weight: f64,
    pub activation: f64,
    pub contribution: f64,
    pub origin: (usize, usize),
    /// Attribution over the whole image.
    pub attribution_pgm: String,
    pub attribution_total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExplanationCard {
    pub image: ImageId,
    pub class: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub score: f64,
    pub image_ppm: String,
    pub contributions: Vec<ContributionCard>,
}

impl ExplanationCard {
    pub fn of(image: &Raster, view: ExplanationView) -> Self {
        Self {
            image: view.image,
            class: view.class,
            predicted: view.predicted,
            probabilities: view.probabilities,
            score: view.score,
            image_ppm: ppm_b64(image),
            contributions: view
                .contributions
                .into_iter()
                .map(|c| ContributionCard {
                    concept: c.concept,
                    weight: c.weight,
                    activation: c.activation,
                    contribution: c.weight * c.activation,
                    origin: c.origin,
                    attribution_pgm: dense_pgm_b64(&c.attribution),
                    attribution_total: c.attribution.total,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsPage {
    pub state: SessionState,
    pub round: u32,
    pub records: Vec<MetricsRecord>,
    /// Cursor for the next poll.
    pub next: usize,
    pub stable: bool,
    /// Why the last round failed, if it did.
    pub last_error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoundStarted {
    pub round: u32,
    pub state: SessionState,
}
