//! On-disk formats: checkpoints, memory files and session directories.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::memory::{ConceptSnapshot, FeedbackScope, Memory, MemoryEntry};
use crate::model::{PatchGeometry, PrototypeModel};
use crate::pnm::encode_pgm16;
use crate::protocol::{DebugSession, Feedback, SessionConfig, SessionState};
use crate::shapes::Dataset;
use crate::trainer::MetricsHistory;

pub const CHECKPOINT_VERSION: &str = "gbm-checkpoint/1";
pub const SUPPORTED_CHECKPOINT_VERSIONS: &[&str] = &[CHECKPOINT_VERSION];

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Corrupt(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(format!("array of {} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    num_classes: usize,
    slots_per_class: usize,
    patch: PatchGeometry,
    tau: f64,
    prototypes: String,
    weights: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    #[serde(flatten)]
    body: CheckpointBody,
    hash: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<String>,
}

fn body_of(model: &PrototypeModel) -> CheckpointBody {
    CheckpointBody {
        num_classes: model.num_classes(),
        slots_per_class: model.slots_per_class(),
        patch: model.geometry(),
        tau: model.tau(),
        prototypes: encode_f64s(model.prototypes()),
        weights: encode_f64s(model.weights()),
    }
}

fn body_hash(version: &str, body: &CheckpointBody) -> String {
    let mut h = Sha256::new();
    h.update(version.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(body).expect("checkpoint body serializes"));
    hex::encode(h.finalize())
}

/// Content hash of a model: identical parameters give identical hashes.
pub fn checkpoint_hash(model: &PrototypeModel) -> String {
    body_hash(CHECKPOINT_VERSION, &body_of(model))
}

pub fn encode_checkpoint(model: &PrototypeModel) -> Vec<u8> {
    let body = body_of(model);
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        hash: body_hash(CHECKPOINT_VERSION, &body),
        body,
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("checkpoint serializes");
    out.push(b'\n');
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PrototypeModel> {
    let probe: VersionProbe =
        serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(format!("unreadable checkpoint: {e}")))?;
    let version = probe.version.unwrap_or_default();
    if !SUPPORTED_CHECKPOINT_VERSIONS.contains(&version.as_str()) {
        return Err(Error::Version {
            found: version,
            supported: SUPPORTED_CHECKPOINT_VERSIONS.iter().map(|s| s.to_string()).collect(),
        });
    }
    let file: CheckpointFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(format!("malformed checkpoint: {e}")))?;
    if body_hash(&file.version, &file.body) != file.hash {
        return Err(Error::Corrupt("checkpoint hash mismatch".into()));
    }
    let b = file.body;
    PrototypeModel::from_parts(
        b.num_classes,
        b.slots_per_class,
        b.patch,
        b.tau,
        decode_f64s(&b.prototypes)?,
        decode_f64s(&b.weights)?,
    )
    .map_err(|e| Error::Corrupt(format!("inconsistent checkpoint: {e}")))
}

pub fn save_checkpoint(path: &Path, model: &PrototypeModel) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<PrototypeModel> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".into());
    tmp.set_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub const MEMORY_VERSION: &str = "gbm-memory/1";
pub const SESSION_VERSION: &str = "gbm-session/1";

#[derive(Serialize, Deserialize)]
struct MemoryFile {
    version: String,
    reference_set_id: String,
    entries: Vec<MemoryEntryFile>,
}

#[derive(Serialize, Deserialize)]
struct MemoryEntryFile {
    scope: FeedbackScope,
    source_index: usize,
    owner_class: usize,
    created_round: u32,
    reference_id: String,
    geometry: PatchGeometry,
    tau: f64,
    frozen_p: String,
    cached_activations: String,
    /// Quantized view of the cached maps, windows stacked vertically.
    attribution_pgm: String,
    /// Exact cached maps.
    attribution_maps: String,
}

#[derive(Serialize, Deserialize)]
struct MapsFile {
    concept: usize,
    image_height: usize,
    image_width: usize,
    patch: (usize, usize),
    origins: Vec<(usize, usize)>,
    windows: String,
    totals: String,
}

fn maps_file(maps: &[AttributionMap], fallback_patch: (usize, usize)) -> MapsFile {
    let first = maps.first();
    MapsFile {
        concept: first.map_or(0, |m| m.concept),
        image_height: first.map_or(0, |m| m.image_height),
        image_width: first.map_or(0, |m| m.image_width),
        patch: first.map_or(fallback_patch, |m| m.patch),
        origins: maps.iter().map(|m| m.origin).collect(),
        windows: encode_f64s(&maps.iter().flat_map(|m| m.window.iter().copied()).collect::<Vec<_>>()),
        totals: encode_f64s(&maps.iter().map(|m| m.total).collect::<Vec<_>>()),
    }
}

fn maps_from(file: MapsFile) -> Result<Vec<AttributionMap>> {
    let windows = decode_f64s(&file.windows)?;
    let totals = decode_f64s(&file.totals)?;
    let cell = file.patch.0 * file.patch.1;
    if totals.len() != file.origins.len() || windows.len() != cell * file.origins.len() {
        return Err(Error::Corrupt("attribution cache sizes disagree".into()));
    }
    Ok(file
        .origins
        .iter()
        .enumerate()
        .map(|(i, &origin)| AttributionMap {
            concept: file.concept,
            image_height: file.image_height,
            image_width: file.image_width,
            origin,
            patch: file.patch,
            window: windows[i * cell..(i + 1) * cell].to_vec(),
            total: totals[i],
        })
        .collect())
}

/// Writes `memory.json` under `dir`, with cached maps under `dir/memory/`.
pub fn save_memory(dir: &Path, memory: &Memory) -> Result<()> {
    let mut entries = Vec::with_capacity(memory.len());
    for (i, e) in memory.entries.iter().enumerate() {
        let snap = &e.snapshot;
        let patch = (snap.geometry.height, snap.geometry.width);
        let pgm = format!("memory/entry-{i}.pgm");
        let exact = format!("memory/entry-{i}.maps.json");
        let stacked: Vec<f64> = snap.cached_attributions.iter().flat_map(|m| m.window.iter().copied()).collect();
        let peak = stacked.iter().copied().fold(0.0f64, f64::max);
        write_atomic(
            &dir.join(&pgm),
            &encode_pgm16(patch.1, patch.0 * snap.cached_attributions.len(), &stacked, peak),
        )?;
        write_atomic(&dir.join(&exact), &serde_json::to_vec(&maps_file(&snap.cached_attributions, patch))?)?;
        entries.push(MemoryEntryFile {
            scope: e.scope,
            source_index: snap.source_index,
            owner_class: snap.owner_class,
            created_round: snap.created_round,
            reference_id: snap.reference_id.clone(),
            geometry: snap.geometry,
            tau: snap.tau,
            frozen_p: encode_f64s(&snap.frozen_p),
            cached_activations: encode_f64s(&snap.cached_activations),
            attribution_pgm: pgm,
            attribution_maps: exact,
        });
    }
    let file = MemoryFile {
        version: MEMORY_VERSION.to_string(),
        reference_set_id: memory.reference_set_id.clone(),
        entries,
    };
    write_atomic(&dir.join("memory.json"), &serde_json::to_vec_pretty(&file)?)
}

pub fn load_memory(dir: &Path) -> Result<Memory> {
    let file: MemoryFile = serde_json::from_slice(&std::fs::read(dir.join("memory.json"))?)
        .map_err(|e| Error::Corrupt(format!("unreadable memory file: {e}")))?;
    if file.version != MEMORY_VERSION {
        return Err(Error::Version {
            found: file.version,
            supported: vec![MEMORY_VERSION.to_string()],
        });
    }
    let entries = file
        .entries
        .into_iter()
        .map(|e| {
            let maps: MapsFile = serde_json::from_slice(&std::fs::read(dir.join(&e.attribution_maps))?)
                .map_err(|err| Error::Corrupt(format!("unreadable {}: {err}", e.attribution_maps)))?;
            Ok(MemoryEntry {
                scope: e.scope,
                snapshot: ConceptSnapshot {
                    frozen_p: decode_f64s(&e.frozen_p)?,
                    geometry: e.geometry,
                    tau: e.tau,
                    source_index: e.source_index,
                    owner_class: e.owner_class,
                    cached_activations: decode_f64s(&e.cached_activations)?,
                    cached_attributions: maps_from(maps)?,
                    created_round: e.created_round,
                    reference_id: e.reference_id,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Memory {
        reference_set_id: file.reference_set_id,
        entries,
    })
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    version: String,
    id: String,
    dataset_hash: String,
    #[serde(default)]
    dataset_ref: Option<String>,
    config: SessionConfig,
    state: SessionState,
    round: u32,
    checkpoint: String,
    checkpoint_hash: String,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes the session directory: `session.json`, `feedback.jsonl`,
/// `metrics.jsonl`, `memory.json` and `checkpoints/round-<r>.json`.
/// Sessions in the middle of a round cannot be saved.
pub fn save_session(dir: &Path, session: &DebugSession) -> Result<()> {
    if session.state == SessionState::Training {
        return Err(Error::State {
            op: "save_session",
            state: session.state.to_string(),
        });
    }
    let checkpoint = format!("checkpoints/round-{}.json", session.round);
    save_checkpoint(&dir.join(&checkpoint), &session.model)?;
    save_memory(dir, &session.memory)?;
    write_jsonl(&dir.join("feedback.jsonl"), &session.feedback)?;
    write_jsonl(&dir.join("metrics.jsonl"), &session.history.records)?;
    let file = SessionFile {
        version: SESSION_VERSION.to_string(),
        id: session.id.clone(),
        dataset_hash: session.dataset().hash(),
        dataset_ref: session.dataset_ref.clone(),
        config: session.config.clone(),
        state: session.state,
        round: session.round,
        checkpoint,
        checkpoint_hash: checkpoint_hash(&session.model),
    };
    // session.json goes last so a crash leaves the previous consistent view
    write_atomic(&dir.join("session.json"), &serde_json::to_vec_pretty(&file)?)
}

fn read_session_file(dir: &Path) -> Result<SessionFile> {
    let file: SessionFile = serde_json::from_slice(&std::fs::read(dir.join("session.json"))?)
        .map_err(|e| Error::Corrupt(format!("unreadable session file: {e}")))?;
    if file.version != SESSION_VERSION {
        return Err(Error::Version {
            found: file.version,
            supported: vec![SESSION_VERSION.to_string()],
        });
    }
    Ok(file)
}

/// What a host needs to know before loading a session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionHeader {
    pub id: String,
    pub dataset_hash: String,
    pub dataset_ref: Option<String>,
    pub state: SessionState,
    pub round: u32,
}

pub fn read_session_header(dir: &Path) -> Result<SessionHeader> {
    let f = read_session_file(dir)?;
    Ok(SessionHeader {
        id: f.id,
        dataset_hash: f.dataset_hash,
        dataset_ref: f.dataset_ref,
        state: f.state,
        round: f.round,
    })
}

/// Reads a session directory written by [`save_session`].
pub fn load_session(dir: &Path, dataset: Arc<Dataset>) -> Result<DebugSession> {
    let file = read_session_file(dir)?;
    if file.dataset_hash != dataset.hash() {
        return Err(Error::Config(format!(
            "session was created on dataset {}, got {}",
            file.dataset_hash,
            dataset.hash()
        )));
    }
    let model = load_checkpoint(&dir.join(&file.checkpoint))?;
    if checkpoint_hash(&model) != file.checkpoint_hash {
        return Err(Error::Corrupt(format!("{} does not match session.json", file.checkpoint)));
    }
    let mut session = DebugSession::restore(
        file.id,
        dataset,
        file.config,
        file.state,
        file.round,
        model,
        load_memory(dir)?,
        read_jsonl(&dir.join("feedback.jsonl"))?,
        MetricsHistory {
            records: read_jsonl(&dir.join("metrics.jsonl"))?,
        },
    )?;
    session.dataset_ref = file.dataset_ref;
    Ok(session)
}

/// The feedback log of a session directory.
pub fn load_feedback(dir: &Path) -> Result<Vec<Feedback>> {
    read_jsonl(&dir.join("feedback.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> PrototypeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = PatchGeometry {
            height: 4,
            width: 4,
            stride: 2,
        };
        PrototypeModel::from_parts(
            2,
            2,
            g,
            6.0 + rng.gen::<f64>(),
            (0..4 * 48).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect(),
            (0..8).map(|_| rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(1);
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(checkpoint_hash(&back), checkpoint_hash(&m));
        assert_ne!(checkpoint_hash(&model(2)), checkpoint_hash(&m));
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = encode_checkpoint(&model(3));
        for cut in [10, bytes.len() / 2, bytes.len() - 3] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
    }

    #[test]
    fn tampering_is_corrupt() {
        let text = String::from_utf8(encode_checkpoint(&model(3))).unwrap();
        let tampered = text.replacen("\"tau\": 6", "\"tau\": 7", 1);
        assert_ne!(tampered, text);
        assert!(matches!(decode_checkpoint(tampered.as_bytes()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn unknown_version_names_supported() {
        let text = String::from_utf8(encode_checkpoint(&model(4))).unwrap();
        let other = text.replace(CHECKPOINT_VERSION, "gbm-checkpoint/99");
        match decode_checkpoint(other.as_bytes()) {
            Err(Error::Version { found, supported }) => {
                assert_eq!(found, "gbm-checkpoint/99");
                assert_eq!(supported, vec![CHECKPOINT_VERSION.to_string()]);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn f64_arrays_round_trip_specials() {
        let v = vec![0.0, -0.0, 1e-310, f64::MAX, -1.5, 0.1];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(decode_f64s("AAAA").is_err());
    }
}
