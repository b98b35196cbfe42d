//! Similarity kernels between concepts.
//!
//! The activation and attribution kernels are Monte Carlo estimates over a
//! fixed, content-hashed reference set:
//!
//! * `κ_act(c, c')  = 1/N Σ_x (c(x) c'(x))^ρ`
//! * `κ_attr(c, c') = 1/N Σ_x ⟨attr(c, x), attr(c', x)⟩^ρ`
//!
//! Both stay in `[0, 1]` because activations are at most one and attribution
//! maps are nonnegative and sum to the activation, which also gives
//! `κ_attr ≤ κ_act`. The parameter kernel compares prototype vectors directly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{prototype_attribution, AttributionMap};
use crate::error::{Error, Result};
use crate::model::{prototype_activation, Match, PatchBank, PatchGeometry, PrototypeModel};
use crate::raster::Raster;

/// Fixed ordered images standing in for the data distribution.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    id: String,
    image_height: usize,
    geometry: PatchGeometry,
    banks: Vec<PatchBank>,
}

impl ReferenceSet {
    pub fn new(images: &[Raster], geometry: PatchGeometry) -> Result<Self> {
        let first = images.first().ok_or(Error::Empty("reference set"))?;
        let mut hasher = Sha256::new();
        for v in [geometry.height, geometry.width, geometry.stride] {
            hasher.update((v as u64).to_le_bytes());
        }
        let mut banks = Vec::with_capacity(images.len());
        for img in images {
            if (img.height(), img.width()) != (first.height(), first.width()) {
                return Err(Error::Dimension("reference images differ in size".into()));
            }
            hasher.update((img.height() as u64).to_le_bytes());
            hasher.update((img.width() as u64).to_le_bytes());
            for v in img.data() {
                hasher.update(v.to_le_bytes());
            }
            banks.push(PatchBank::new(img, geometry)?);
        }
        Ok(Self {
            id: hex::encode(hasher.finalize()),
            image_height: first.height(),
            geometry,
            banks,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn banks(&self) -> &[PatchBank] {
        &self.banks
    }
}

/// Anything that exposes a concept's behavior over a reference set.
pub trait Profile {
    fn reference_id(&self) -> &str;
    fn activations(&self) -> &[f64];
    fn attributions(&self) -> Option<&[AttributionMap]>;
}

/// A live concept evaluated over a reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptProfile {
    pub reference_id: String,
    pub matches: Vec<Match>,
    pub activations: Vec<f64>,
    pub attributions: Option<Vec<AttributionMap>>,
}

impl Profile for ConceptProfile {
    fn reference_id(&self) -> &str {
        &self.reference_id
    }
    fn activations(&self) -> &[f64] {
        &self.activations
    }
    fn attributions(&self) -> Option<&[AttributionMap]> {
        self.attributions.as_deref()
    }
}

pub fn profile_prototype(reference: &ReferenceSet, p: &[f64], tau: f64, concept: usize, with_attributions: bool) -> ConceptProfile {
    let matches: Vec<Match> = reference
        .banks
        .iter()
        .map(|b| prototype_activation(b, p, tau))
        .collect();
    let attributions = with_attributions.then(|| {
        reference
            .banks
            .iter()
            .map(|b| prototype_attribution(b, reference.image_height, p, tau, concept))
            .collect()
    });
    ConceptProfile {
        reference_id: reference.id.clone(),
        activations: matches.iter().map(|m| m.activation).collect(),
        matches,
        attributions,
    }
}

pub fn profile_concept(model: &PrototypeModel, j: usize, reference: &ReferenceSet, with_attributions: bool) -> Result<ConceptProfile> {
    model.check_concept(j)?;
    if model.geometry() != reference.geometry {
        return Err(Error::Profile("reference set built for a different patch geometry".into()));
    }
    Ok(profile_prototype(reference, model.prototype(j), model.tau(), j, with_attributions))
}

fn check_pair(a: &dyn Profile, b: &dyn Profile) -> Result<usize> {
    if a.reference_id() != b.reference_id() {
        return Err(Error::Profile(format!(
            "profiles computed on different reference sets ({} vs {})",
            short(a.reference_id()),
            short(b.reference_id())
        )));
    }
    let n = a.activations().len();
    if n == 0 {
        return Err(Error::Empty("reference set"));
    }
    if b.activations().len() != n {
        return Err(Error::Profile("profile lengths differ".into()));
    }
    Ok(n)
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("rho must be positive, got {rho}")))
    }
}

/// Co-activation kernel.
pub fn kappa_act(a: &dyn Profile, b: &dyn Profile, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let n = check_pair(a, b)?;
    let sum: f64 = a
        .activations()
        .iter()
        .zip(b.activations())
        .map(|(x, y)| (x * y).powf(rho))
        .sum();
    Ok(sum / n as f64)
}

/// `κ_act(a, b) / sqrt(κ_act(a, a) κ_act(b, b))`; zero when either self-similarity vanishes.
pub fn kappa_act_normalized(a: &dyn Profile, b: &dyn Profile, rho: f64) -> Result<f64> {
    let ab = kappa_act(a, b, rho)?;
    let denom = (kappa_act(a, a, rho)? * kappa_act(b, b, rho)?).sqrt();
    Ok(if denom > 0.0 { (ab / denom).min(1.0) } else { 0.0 })
}

/// Co-localization kernel.
pub fn kappa_attr(a: &dyn Profile, b: &dyn Profile, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let n = check_pair(a, b)?;
    let (ma, mb) = match (a.attributions(), b.attributions()) {
        (Some(ma), Some(mb)) => (ma, mb),
        _ => return Err(Error::Profile("attribution maps missing from profile".into())),
    };
    if ma.len() != n || mb.len() != n {
        return Err(Error::Profile("attribution map count differs from reference size".into()));
    }
    let mut sum = 0.0;
    for (x, y) in ma.iter().zip(mb) {
        sum += x.inner(y)?.powf(rho);
    }
    Ok(sum / n as f64)
}

/// RBF kernel on prototype vectors, `exp(-‖p1 - p2‖² / sigma²)`.
pub fn kappa_param(p1: &[f64], p2: &[f64], sigma: f64) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::Dimension(format!("prototype lengths {} and {}", p1.len(), p2.len())));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let d: f64 = p1.iter().zip(p2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d / (sigma * sigma)).exp())
}

/// Raw inner product `⟨p1, p2⟩`. Unbounded; kept for the factored form of the
/// aggregation loss.
pub fn kappa_param_raw(p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::Dimension(format!("prototype lengths {} and {}", p1.len(), p2.len())));
    }
    Ok(p1.iter().zip(p2).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Act,
    Attr,
    Param,
    ParamRaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub rho: f64,
    /// RBF width for [`KernelKind::Param`]; `None` means `sqrt(q) / 4`.
    pub sigma: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Act,
            rho: 1.0,
            sigma: None,
        }
    }
}

impl KernelConfig {
    pub fn sigma_for(&self, q: usize) -> f64 {
        self.sigma.unwrap_or((q as f64).sqrt() / 4.0)
    }

    pub fn needs_attributions(&self) -> bool {
        self.kind == KernelKind::Attr
    }

    pub fn needs_reference(&self) -> bool {
        matches!(self.kind, KernelKind::Act | KernelKind::Attr)
    }
}
