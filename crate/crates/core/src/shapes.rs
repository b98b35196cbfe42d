//! Confounded synthetic shapes.
//!
//! Every image holds two colored shapes on a black background, placed in
//! distinct cells of a square grid. Classes are defined by disjunctive
//! formulas over `(color, shape)` atoms and every scene satisfies exactly one
//! formula. In the training split, every image of the confounded class also
//! carries a confounder shape that never appears anywhere else.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pnm;
use crate::raster::{Mask, Raster};
use crate::seeding::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Triangle,
    Circle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Triangle, Shape::Circle];

    /// Whether local pixel `(y, x)` of a `size × size` box belongs to the shape.
    /// Pixel centers are tested, so the result is symmetric and resolution-stable.
    fn covers(self, y: usize, x: usize, size: usize) -> bool {
        let s = size as f64;
        let cy = y as f64 + 0.5;
        let cx = x as f64 + 0.5;
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let r = s / 2.0;
                (cx - r).powi(2) + (cy - r).powi(2) <= r * r
            }
            // apex at the top, base along the bottom edge
            Shape::Triangle => (cx - s / 2.0).abs() <= cy / 2.0,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Circle => "circle",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Pink,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Pink,
        Color::Cyan,
    ];

    /// Fixed 8-bit palette. Pink is (1, 0.4, 0.7) up to 8-bit quantization.
    pub fn rgb_bytes(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Pink => [255, 102, 179],
            Color::Cyan => [0, 255, 255],
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        self.rgb_bytes().map(|b| f64::from(b) / 255.0)
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Pink => "pink",
            Color::Cyan => "cyan",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A `(color, shape)` pair, the building block of class formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub color: Color,
    pub shape: Shape,
}

impl Atom {
    pub const fn new(color: Color, shape: Shape) -> Self {
        Self { color, shape }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color, self.shape)
    }
}

/// All 18 atoms, color-major.
pub fn full_atom_pool() -> Vec<Atom> {
    Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| Atom::new(c, s)))
        .collect()
}

pub const YELLOW_SQUARE: Atom = Atom::new(Color::Yellow, Shape::Square);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub color: Color,
    /// `(row, col)` cell on the placement grid.
    pub cell: (usize, usize),
    /// Side (or diameter) in pixels.
    pub size: usize,
}

impl ShapeSpec {
    pub fn atom(&self) -> Atom {
        Atom::new(self.color, self.shape)
    }

    /// Top-left pixel of the shape's bounding box; the shape is centered in its cell.
    pub fn origin(&self, cell_size: usize) -> (usize, usize) {
        let pad = (cell_size - self.size) / 2;
        (self.cell.0 * cell_size + pad, self.cell.1 * cell_size + pad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<ShapeSpec>,
    pub label: usize,
    pub confounded: bool,
    /// Cells per side of the placement grid.
    pub grid: usize,
}

impl Scene {
    pub fn contains(&self, atom: Atom) -> bool {
        self.shapes.iter().any(|s| s.atom() == atom)
    }
}

/// A disjunction of atoms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub atoms: Vec<Atom>,
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                f.write_str(" or ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

pub fn eval_formula(formula: &Formula, scene: &Scene) -> bool {
    scene
        .shapes
        .iter()
        .any(|s| formula.atoms.contains(&s.atom()))
}

/// Samples `v` pairwise atom-disjoint formulas from `pool`, never using the
/// confounder. Formulas take two atoms while the pool allows it, one otherwise.
pub fn sample_formulas(seed: u64, v: usize, pool: &[Atom], confounder: Atom) -> Result<Vec<Formula>> {
    let mut atoms: Vec<Atom> = pool.iter().copied().filter(|&a| a != confounder).collect();
    atoms.sort();
    atoms.dedup();
    if atoms.len() < v {
        return Err(Error::PoolExhausted {
            needed: v,
            available: atoms.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF0]));
    atoms.shuffle(&mut rng);
    let two_atom = (atoms.len() - v).min(v);
    let mut it = atoms.into_iter();
    Ok((0..v)
        .map(|i| {
            let arity = if i < two_atom { 2 } else { 1 };
            Formula {
                atoms: it.by_ref().take(arity).collect(),
            }
        })
        .collect())
}

fn check_scene(scene: &Scene, size: usize) -> Result<usize> {
    if scene.grid == 0 || size % scene.grid != 0 {
        return Err(Error::Config(format!(
            "image size {size} is not a multiple of grid {}",
            scene.grid
        )));
    }
    let cell = size / scene.grid;
    for s in &scene.shapes {
        if s.cell.0 >= scene.grid || s.cell.1 >= scene.grid {
            return Err(Error::Config(format!("cell {:?} outside {g}x{g} grid", s.cell, g = scene.grid)));
        }
        if s.size > cell || s.size < 8 {
            return Err(Error::Config(format!(
                "shape size {} must lie in [8, {cell}]",
                s.size
            )));
        }
    }
    Ok(cell)
}

/// Renders a scene to a `size × size` raster. Shapes must occupy distinct cells.
pub fn render(scene: &Scene, size: usize) -> Result<Raster> {
    let cell = check_scene(scene, size)?;
    let mut out = Raster::zeros(size, size);
    let mut owner = vec![false; size * size];
    for s in &scene.shapes {
        let (r0, c0) = s.origin(cell);
        let rgb = s.color.rgb();
        for y in 0..s.size {
            for x in 0..s.size {
                if s.shape.covers(y, x, s.size) {
                    let (r, c) = (r0 + y, c0 + x);
                    if owner[r * size + c] {
                        return Err(Error::Config(format!("shapes overlap at pixel ({r}, {c})")));
                    }
                    owner[r * size + c] = true;
                    out.set_pixel(r, c, rgb);
                }
            }
        }
    }
    Ok(out)
}

/// Binary mask of the pixels covered by shape `which`.
pub fn shape_mask(scene: &Scene, which: usize, size: usize) -> Result<Mask> {
    let s = scene.shapes.get(which).ok_or(Error::InvalidIndex {
        what: "shape",
        index: which,
        len: scene.shapes.len(),
    })?;
    let cell = check_scene(scene, size)?;
    let (r0, c0) = s.origin(cell);
    let mut mask = Mask::new(size, size);
    for y in 0..s.size {
        for x in 0..s.size {
            if s.shape.covers(y, x, s.size) {
                mask.set(r0 + y, c0 + x, true);
            }
        }
    }
    Ok(mask)
}

/// Renders a single atom alone on an `a × b` black canvas, centered.
pub fn render_atom_patch(atom: Atom, shape_size: usize, a: usize, b: usize) -> Raster {
    let mut out = Raster::zeros(a, b);
    let (r0, c0) = (a.saturating_sub(shape_size) / 2, b.saturating_sub(shape_size) / 2);
    for y in 0..shape_size.min(a) {
        for x in 0..shape_size.min(b) {
            if atom.shape.covers(y, x, shape_size) {
                out.set_pixel(r0 + y, c0 + x, atom.color.rgb());
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies an image as `<split>/<index>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId {
    pub split: Split,
    pub index: usize,
}

impl ImageId {
    pub fn new(split: Split, index: usize) -> Self {
        Self { split, index }
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.split, self.index)
    }
}

impl FromStr for ImageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("image id {s:?} is not <split>/<index>"));
        let (split, index) = s.split_once('/').ok_or_else(bad)?;
        let split = match split {
            "train" => Split::Train,
            "validation" => Split::Validation,
            "test" => Split::Test,
            _ => return Err(bad()),
        };
        Ok(Self {
            split,
            index: index.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for ImageId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub shape_size: usize,
    pub grid: usize,
    pub confounded_class: usize,
    pub confounder: Atom,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 5,
            train_per_class: 100,
            validation_per_class: 20,
            test_per_class: 50,
            image_size: 64,
            shape_size: 16,
            grid: 4,
            confounded_class: 0,
            confounder: YELLOW_SQUARE,
        }
    }
}

impl DataConfig {
    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Validation => self.validation_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("image size must be >= 32, got {}", self.image_size)));
        }
        if self.grid < 3 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "grid {} must be >= 3 and divide image size {}",
                self.grid, self.image_size
            )));
        }
        if self.shape_size < 8 || self.shape_size > self.image_size / self.grid {
            return Err(Error::Config(format!(
                "shape size {} must lie in [8, {}]",
                self.shape_size,
                self.image_size / self.grid
            )));
        }
        if self.confounded_class >= self.classes {
            return Err(Error::Config(format!(
                "confounded class {} out of range for {} classes",
                self.confounded_class, self.classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundSpec {
    pub class: usize,
    pub atom: Atom,
    pub splits: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitListing {
    pub train: Vec<Scene>,
    pub validation: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl SplitListing {
    pub fn get(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DataConfig,
    pub formulas: Vec<Formula>,
    pub palette: BTreeMap<String, [u8; 3]>,
    pub confound: ConfoundSpec,
    pub splits: SplitListing,
}

impl Manifest {
    /// SHA-256 of the canonical manifest JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: ImageId,
    pub scene: Scene,
    pub image: Raster,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn get(&self, id: ImageId) -> Option<&Sample> {
        self.split(id.split).get(id.index)
    }

    pub fn config(&self) -> &DataConfig {
        &self.manifest.config
    }

    pub fn hash(&self) -> String {
        self.manifest.hash()
    }

    /// Union of the masks of shapes that satisfy the sample's class formula.
    pub fn causal_mask(&self, sample: &Sample) -> Mask {
        let size = self.config().image_size;
        let formula = &self.manifest.formulas[sample.scene.label];
        let mut out = Mask::new(size, size);
        for (k, s) in sample.scene.shapes.iter().enumerate() {
            if formula.atoms.contains(&s.atom()) {
                let m = shape_mask(&sample.scene, k, size).expect("generated scene is valid");
                for r in 0..size {
                    for c in 0..size {
                        if m.get(r, c) {
                            out.set(r, c, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Masks of the individual shapes that satisfy the sample's class formula.
    pub fn causal_shape_masks(&self, sample: &Sample) -> Vec<Mask> {
        let size = self.config().image_size;
        let formula = &self.manifest.formulas[sample.scene.label];
        sample
            .scene
            .shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| formula.atoms.contains(&s.atom()))
            .map(|(k, _)| shape_mask(&sample.scene, k, size).expect("generated scene is valid"))
            .collect()
    }

    /// Fraction of images in `split` with label `class` that contain the confounder.
    pub fn confounder_prevalence(&self, split: Split, class: usize) -> f64 {
        let atom = self.manifest.confound.atom;
        let (hit, total) = self
            .split(split)
            .iter()
            .filter(|s| s.scene.label == class)
            .fold((0usize, 0usize), |(h, t), s| (h + usize::from(s.scene.contains(atom)), t + 1));
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        let size = self.config().image_size;
        for split in Split::ALL {
            let sub = dir.join(split.name());
            std::fs::create_dir_all(&sub)?;
            for s in self.split(split) {
                std::fs::write(sub.join(format!("{}.ppm", s.id.index)), pnm::encode_ppm(&s.image))?;
                for k in 0..s.scene.shapes.len() {
                    let m = shape_mask(&s.scene, k, size)?;
                    std::fs::write(
                        sub.join(format!("{}.mask.{k}.pbm", s.id.index)),
                        pnm::encode_pbm(&m),
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.version.to_string(),
                supported: vec![MANIFEST_VERSION.to_string()],
            });
        }
        let size = manifest.config.image_size;
        let load_split = |split: Split| -> Result<Vec<Sample>> {
            manifest
                .splits
                .get(split)
                .iter()
                .enumerate()
                .map(|(index, scene)| {
                    let path = dir.join(split.name()).join(format!("{index}.ppm"));
                    let image = pnm::decode_ppm(&std::fs::read(&path)?)?;
                    if image.height() != size || image.width() != size {
                        return Err(Error::Dimension(format!("{} is not {size}x{size}", path.display())));
                    }
                    Ok(Sample {
                        id: ImageId::new(split, index),
                        scene: scene.clone(),
                        image,
                    })
                })
                .collect()
        };
        let train = load_split(Split::Train)?;
        let validation = load_split(Split::Validation)?;
        let test = load_split(Split::Test)?;
        Ok(Self {
            manifest,
            train,
            validation,
            test,
        })
    }
}

fn palette() -> BTreeMap<String, [u8; 3]> {
    Color::ALL
        .iter()
        .map(|c| (c.name().to_string(), c.rgb_bytes()))
        .collect()
}

struct Budget {
    attempts: usize,
    accepted: usize,
    limit: usize,
}

fn sample_scene(
    config: &DataConfig,
    formulas: &[Formula],
    split: Split,
    label: usize,
    nth: usize,
    index: usize,
    budget: &mut Budget,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[split.code(), index as u64]));
    let fillers: Vec<Atom> = full_atom_pool()
        .into_iter()
        .filter(|&a| a != config.confounder)
        .collect();
    let formula = &formulas[label];
    // alternate atoms so each disjunct covers half of the class
    let causal = formula.atoms[nth % formula.atoms.len()];
    let confounded = split != Split::Test && label == config.confounded_class;
    let cells: Vec<(usize, usize)> = (0..config.grid)
        .flat_map(|r| (0..config.grid).map(move |c| (r, c)))
        .collect();
    loop {
        if budget.attempts >= budget.limit {
            return Err(Error::RejectionBudget {
                attempts: budget.attempts,
                accepted: budget.accepted,
                rate: budget.accepted as f64 / budget.attempts.max(1) as f64,
            });
        }
        budget.attempts += 1;
        let other = fillers[rng.gen_range(0..fillers.len())];
        let n_shapes = if confounded { 3 } else { 2 };
        let chosen: Vec<(usize, usize)> = cells.choose_multiple(&mut rng, n_shapes).copied().collect();
        let spec = |atom: Atom, cell| ShapeSpec {
            shape: atom.shape,
            color: atom.color,
            cell,
            size: config.shape_size,
        };
        let mut shapes = vec![spec(causal, chosen[0]), spec(other, chosen[1])];
        if confounded {
            shapes.push(spec(config.confounder, chosen[2]));
        }
        let scene = Scene {
            shapes,
            label,
            confounded,
            grid: config.grid,
        };
        let satisfied: Vec<usize> = formulas
            .iter()
            .enumerate()
            .filter(|(_, f)| eval_formula(f, &scene))
            .map(|(i, _)| i)
            .collect();
        if satisfied == [label] {
            budget.accepted += 1;
            return Ok(scene);
        }
    }
}

/// Generates the full dataset. Identical configs give bit-identical datasets.
pub fn generate(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let formulas = sample_formulas(config.seed, config.classes, &full_atom_pool(), config.confounder)?;
    let total: usize = Split::ALL.iter().map(|&s| config.per_class(s) * config.classes).sum();
    let mut budget = Budget {
        attempts: 0,
        accepted: 0,
        limit: 1000 * total.max(1),
    };
    let mut listing = SplitListing {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let mut samples: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
    for split in Split::ALL {
        let mut scenes = Vec::new();
        let mut out = Vec::new();
        for nth in 0..config.per_class(split) {
            for label in 0..config.classes {
                let index = scenes.len();
                let scene = sample_scene(config, &formulas, split, label, nth, index, &mut budget)?;
                let image = render(&scene, config.image_size)?;
                out.push(Sample {
                    id: ImageId::new(split, index),
                    scene: scene.clone(),
                    image,
                });
                scenes.push(scene);
            }
        }
        match split {
            Split::Train => listing.train = scenes,
            Split::Validation => listing.validation = scenes,
            Split::Test => listing.test = scenes,
        }
        samples.insert(split, out);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        formulas,
        palette: palette(),
        confound: ConfoundSpec {
            class: config.confounded_class,
            atom: config.confounder,
            splits: vec![Split::Train, Split::Validation],
        },
        splits: listing,
    };
    Ok(Dataset {
        manifest,
        train: samples.remove(&Split::Train).unwrap_or_default(),
        validation: samples.remove(&Split::Validation).unwrap_or_default(),
        test: samples.remove(&Split::Test).unwrap_or_default(),
    })
}

/// One patch-sized image per atom of the full pool, each showing that atom
/// alone and centered. Used as a probe set for similarity-to-template scores.
pub fn atom_probe_patches(shape_size: usize, a: usize, b: usize) -> Vec<Raster> {
    full_atom_pool()
        .into_iter()
        .map(|atom| render_atom_patch(atom, shape_size, a, b))
        .collect()
}
