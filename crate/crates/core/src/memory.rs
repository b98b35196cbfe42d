//! Memory of concepts marked irrelevant.
//!
//! Each entry is a frozen copy of a concept taken when the feedback was
//! given, together with its activations and attribution maps over the
//! reference set. Caches are computed once from the frozen parameters and
//! never refreshed, so later changes to the live concept cannot alter what
//! the feedback refers to.

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::kernels::{profile_concept, Profile, ReferenceSet};
use crate::model::{PatchGeometry, PrototypeModel};
use crate::shapes::ImageId;

/// Which decisions a piece of relevance feedback applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackScope {
    Instance { image: ImageId, class: usize },
    Class { class: usize },
    Global,
}

impl FeedbackScope {
    pub fn covers(&self, image: ImageId, class: usize) -> bool {
        match *self {
            FeedbackScope::Instance { image: i, class: y } => i == image && y == class,
            FeedbackScope::Class { class: y } => y == class,
            FeedbackScope::Global => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSnapshot {
    pub frozen_p: Vec<f64>,
    pub geometry: PatchGeometry,
    pub tau: f64,
    /// Index of the live concept at the time of the snapshot.
    pub source_index: usize,
    pub owner_class: usize,
    pub cached_activations: Vec<f64>,
    pub cached_attributions: Vec<AttributionMap>,
    pub created_round: u32,
    pub reference_id: String,
}

impl Profile for ConceptSnapshot {
    fn reference_id(&self) -> &str {
        &self.reference_id
    }
    fn activations(&self) -> &[f64] {
        &self.cached_activations
    }
    fn attributions(&self) -> Option<&[AttributionMap]> {
        Some(&self.cached_attributions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub snapshot: ConceptSnapshot,
    pub scope: FeedbackScope,
}

/// Append-only store of irrelevant-concept snapshots sharing one reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub reference_set_id: String,
    pub entries: Vec<MemoryEntry>,
}

impl Memory {
    pub fn new(reference: &ReferenceSet) -> Self {
        Self {
            reference_set_id: reference.id().to_string(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Freezes concept `j` of `model` and appends it. Returns the entry index.
    pub fn insert(
        &mut self,
        model: &PrototypeModel,
        j: usize,
        scope: FeedbackScope,
        reference: &ReferenceSet,
        round: u32,
    ) -> Result<usize> {
        if reference.id() != self.reference_set_id {
            return Err(Error::Profile(format!(
                "reference set {} does not match memory reference {}",
                &reference.id()[..12],
                &self.reference_set_id[..self.reference_set_id.len().min(12)]
            )));
        }
        let profile = profile_concept(model, j, reference, true)?;
        self.entries.push(MemoryEntry {
            snapshot: ConceptSnapshot {
                frozen_p: model.prototype(j).to_vec(),
                geometry: model.geometry(),
                tau: model.tau(),
                source_index: j,
                owner_class: model.owner_class(j),
                cached_activations: profile.activations,
                cached_attributions: profile.attributions.unwrap_or_default(),
                created_round: round,
                reference_id: profile.reference_id,
            },
            scope,
        });
        Ok(self.entries.len() - 1)
    }

    /// Indices of the entries irrelevant to decision `(image, class)`.
    pub fn query_indices(&self, image: ImageId, class: usize) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.scope.covers(image, class))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn query(&self, image: ImageId, class: usize) -> Vec<&ConceptSnapshot> {
        self.entries
            .iter()
            .filter(|e| e.scope.covers(image, class))
            .map(|e| &e.snapshot)
            .collect()
    }
}
