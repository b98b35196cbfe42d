//! The prototype gray-box model.
//!
//! Concept `j` is a pixel-space patch prototype `p_j`; its activation on an
//! image is the best Gaussian similarity `exp(-‖z - p_j‖² / tau)` over all
//! patches `z` on a strided grid. Class scores are a linear combination of
//! concept activations with input-independent weights, so the list of
//! `(weight, activation)` pairs fully determines every prediction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::seeding::derive_seed;
use crate::shapes::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl PatchGeometry {
    /// Length of a flattened patch (`a · b · 3`).
    pub fn dim(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn grid(&self, image_height: usize, image_width: usize) -> Result<(usize, usize)> {
        if image_height < self.height || image_width < self.width {
            return Err(Error::Dimension(format!(
                "image {image_height}x{image_width} smaller than patch {}x{}",
                self.height, self.width
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("patch stride must be positive".into()));
        }
        Ok((
            (image_height - self.height) / self.stride + 1,
            (image_width - self.width) / self.stride + 1,
        ))
    }
}

/// All strided patches of one image in sparse form.
///
/// Each patch keeps only its nonzero entries. Squared distances to a prototype use
/// `‖z - p‖² = ‖p‖² + Σ_{z_i ≠ 0} z_i (z_i - 2 p_i)`.
#[derive(Clone, Debug)]
pub struct PatchBank {
    geometry: PatchGeometry,
    image_width: usize,
    grid_cols: usize,
    offsets: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl PatchBank {
    pub fn new(image: &Raster, geometry: PatchGeometry) -> Result<Self> {
        let (rows, cols) = geometry.grid(image.height(), image.width())?;
        let mut offsets = Vec::with_capacity(rows * cols + 1);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        offsets.push(0);
        for gr in 0..rows {
            for gc in 0..cols {
                let patch = image.patch(gr * geometry.stride, gc * geometry.stride, geometry.height, geometry.width);
                for (i, &v) in patch.iter().enumerate() {
                    if v != 0.0 {
                        idx.push(i as u32);
                        val.push(v);
                    }
                }
                offsets.push(idx.len());
            }
        }
        Ok(Self {
            geometry,
            image_width: image.width(),
            grid_cols: cols,
            offsets,
            idx,
            val,
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn positions(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    /// Top-left pixel of patch position `pos`.
    pub fn origin(&self, pos: usize) -> (usize, usize) {
        (
            (pos / self.grid_cols) * self.geometry.stride,
            (pos % self.grid_cols) * self.geometry.stride,
        )
    }

    pub fn dense_patch(&self, pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.geometry.dim()];
        for k in self.offsets[pos]..self.offsets[pos + 1] {
            out[self.idx[k] as usize] = self.val[k];
        }
        out
    }

    /// Fraction of nonzero entries in the patch at `pos`.
    pub fn fill(&self, pos: usize) -> f64 {
        (self.offsets[pos + 1] - self.offsets[pos]) as f64 / self.geometry.dim() as f64
    }

    fn sq_dist(&self, pos: usize, p: &[f64], p_sq: f64) -> f64 {
        let mut d = p_sq;
        for k in self.offsets[pos]..self.offsets[pos + 1] {
            let z = self.val[k];
            d += z * (z - 2.0 * p[self.idx[k] as usize]);
        }
        d.max(0.0)
    }

    /// Best-matching patch for prototype `p`: `(position, squared distance)`.
    /// Ties go to the smallest row-major position.
    pub fn best_match(&self, p: &[f64]) -> (usize, f64) {
        let p_sq: f64 = p.iter().map(|v| v * v).sum();
        let mut best = (0, f64::INFINITY);
        for pos in 0..self.positions() {
            let d = self.sq_dist(pos, p, p_sq);
            if d < best.1 {
                best = (pos, d);
            }
        }
        best
    }
}

/// Activation of a free-standing prototype `p` on a bank.
pub fn prototype_activation(bank: &PatchBank, p: &[f64], tau: f64) -> Match {
    let (position, sq_dist) = bank.best_match(p);
    Match {
        position,
        origin: bank.origin(position),
        sq_dist,
        activation: (-sq_dist / tau).exp(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub position: usize,
    /// Top-left pixel of the best patch.
    pub origin: (usize, usize),
    pub sq_dist: f64,
    pub activation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptActivations {
    pub matches: Vec<Match>,
}

impl ConceptActivations {
    pub fn values(&self) -> Vec<f64> {
        self.matches.iter().map(|m| m.activation).collect()
    }

    pub fn value(&self, j: usize) -> f64 {
        self.matches[j].activation
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// `(weight, activation)` pairs for one class; their sum is the class score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub class: usize,
    pub pairs: Vec<(f64, f64)>,
    pub locations: Vec<(usize, usize)>,
}

impl Explanation {
    /// Reconstructs the class score, summing in concept order like [`PrototypeModel::scores`].
    pub fn score(&self) -> f64 {
        self.pairs.iter().fold(0.0, |acc, &(w, c)| acc + w * c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub slots_per_class: usize,
    pub patch: PatchGeometry,
    /// Similarity bandwidth; `None` means `q / 8` with `q = a · b · 3`.
    pub tau: Option<f64>,
    /// Minimum fraction of nonzero entries for a patch to seed a prototype.
    pub init_min_fill: f64,
    pub init_owner_weight: f64,
    pub init_other_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            slots_per_class: 2,
            patch: PatchGeometry {
                height: 16,
                width: 16,
                stride: 8,
            },
            tau: None,
            init_min_fill: 0.25,
            init_owner_weight: 0.5,
            init_other_weight: -0.1,
        }
    }
}

impl ModelConfig {
    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(self.patch.dim() as f64 / 8.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeModel {
    num_classes: usize,
    slots_per_class: usize,
    geometry: PatchGeometry,
    tau: f64,
    /// `k × q`, row-major.
    prototypes: Vec<f64>,
    /// `v × k`, row-major; row `y` is `w^(y)`.
    weights: Vec<f64>,
}

impl PrototypeModel {
    pub fn from_parts(
        num_classes: usize,
        slots_per_class: usize,
        geometry: PatchGeometry,
        tau: f64,
        prototypes: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if num_classes == 0 || slots_per_class == 0 {
            return Err(Error::Config("need at least one class and one slot".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        let k = num_classes * slots_per_class;
        if prototypes.len() != k * geometry.dim() {
            return Err(Error::Dimension(format!(
                "prototypes need {} values, got {}",
                k * geometry.dim(),
                prototypes.len()
            )));
        }
        if weights.len() != num_classes * k {
            return Err(Error::Dimension(format!(
                "weights need {} values, got {}",
                num_classes * k,
                weights.len()
            )));
        }
        if prototypes.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::Config("model parameters must be finite".into()));
        }
        Ok(Self {
            num_classes,
            slots_per_class,
            geometry,
            tau,
            prototypes,
            weights,
        })
    }

    /// Seeds each prototype with a random patch from a training image of its
    /// owner class; owner weights start positive, the rest slightly negative.
    pub fn initialize(config: &ModelConfig, train: &[Sample], seed: u64) -> Result<Self> {
        let k = config.num_classes * config.slots_per_class;
        let q = config.patch.dim();
        let mut prototypes = Vec::with_capacity(k * q);
        for j in 0..k {
            let owner = j / config.slots_per_class;
            let pool: Vec<&Sample> = train.iter().filter(|s| s.scene.label == owner).collect();
            if pool.is_empty() {
                return Err(Error::Config(format!("no training images for class {owner}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1A17, j as u64]));
            let sample = pool[rng.gen_range(0..pool.len())];
            let bank = PatchBank::new(&sample.image, config.patch)?;
            let candidates: Vec<usize> = (0..bank.positions())
                .filter(|&pos| bank.fill(pos) >= config.init_min_fill)
                .collect();
            let pos = match candidates.choose(&mut rng) {
                Some(&pos) => pos,
                None => rng.gen_range(0..bank.positions()),
            };
            prototypes.extend(bank.dense_patch(pos));
        }
        let weights = (0..config.num_classes)
            .flat_map(|y| {
                (0..k).map(move |j| {
                    if j / config.slots_per_class == y {
                        config.init_owner_weight
                    } else {
                        config.init_other_weight
                    }
                })
            })
            .collect();
        Self::from_parts(
            config.num_classes,
            config.slots_per_class,
            config.patch,
            config.tau(),
            prototypes,
            weights,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn slots_per_class(&self) -> usize {
        self.slots_per_class
    }

    /// Number of concepts.
    pub fn k(&self) -> usize {
        self.num_classes * self.slots_per_class
    }

    /// Prototype dimension.
    pub fn q(&self) -> usize {
        self.geometry.dim()
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn owner_class(&self, j: usize) -> usize {
        j / self.slots_per_class
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        let q = self.q();
        &self.prototypes[j * q..(j + 1) * q]
    }

    pub fn prototype_mut(&mut self, j: usize) -> &mut [f64] {
        let q = self.q();
        &mut self.prototypes[j * q..(j + 1) * q]
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut [f64] {
        &mut self.prototypes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight(&self, y: usize, j: usize) -> f64 {
        self.weights[y * self.k() + j]
    }

    pub fn set_weight(&mut self, y: usize, j: usize, w: f64) {
        let k = self.k();
        self.weights[y * k + j] = w;
    }

    pub fn weight_row(&self, y: usize) -> &[f64] {
        let k = self.k();
        &self.weights[y * k..(y + 1) * k]
    }

    pub fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::InvalidIndex {
                what: "class",
                index: y,
                len: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn check_concept(&self, j: usize) -> Result<()> {
        if j >= self.k() {
            return Err(Error::InvalidIndex {
                what: "concept",
                index: j,
                len: self.k(),
            });
        }
        Ok(())
    }

    pub fn bank(&self, image: &Raster) -> Result<PatchBank> {
        PatchBank::new(image, self.geometry)
    }

    pub fn activations(&self, image: &Raster) -> Result<ConceptActivations> {
        Ok(self.activations_bank(&self.bank(image)?))
    }

    pub fn activations_bank(&self, bank: &PatchBank) -> ConceptActivations {
        ConceptActivations {
            matches: (0..self.k())
                .map(|j| prototype_activation(bank, self.prototype(j), self.tau))
                .collect(),
        }
    }

    /// `s_y = Σ_j w_j^(y) c_j` for every class.
    pub fn scores(&self, acts: &ConceptActivations) -> Vec<f64> {
        (0..self.num_classes)
            .map(|y| {
                self.weight_row(y)
                    .iter()
                    .zip(&acts.matches)
                    .fold(0.0, |acc, (w, m)| acc + w * m.activation)
            })
            .collect()
    }

    pub fn predict(&self, image: &Raster) -> Result<usize> {
        Ok(argmax(&self.scores(&self.activations(image)?)))
    }

    pub fn explain(&self, image: &Raster, y: usize) -> Result<Explanation> {
        self.check_class(y)?;
        Ok(self.explain_activations(&self.activations(image)?, y))
    }

    pub fn explain_activations(&self, acts: &ConceptActivations, y: usize) -> Explanation {
        Explanation {
            class: y,
            pairs: self
                .weight_row(y)
                .iter()
                .zip(&acts.matches)
                .map(|(&w, m)| (w, m.activation))
                .collect(),
            locations: acts.matches.iter().map(|m| m.origin).collect(),
        }
    }
}

/// Numerically stable softmax.
pub fn predict_proba(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest entry; first wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
