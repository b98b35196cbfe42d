//! Pixel panels for inspecting concepts.

use crate::attribution::{prototype_attribution, representatives, AttributionMap, Representative};
use crate::error::{Error, Result};
use crate::model::PrototypeModel;
use crate::raster::Raster;
use crate::shapes::Sample;

const GAP: usize = 2;
const GAP_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

/// The prototype vector reshaped to an `a × b` image, clamped to the unit range.
pub fn prototype_image(model: &PrototypeModel, j: usize) -> Result<Raster> {
    model.check_concept(j)?;
    let g = model.geometry();
    let data = model.prototype(j).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Raster::from_values(g.height, g.width, data)
}

/// Heat overlay: the patch dimmed to 40% with attribution mass added in red,
/// scaled so the largest pixel is fully red.
pub fn attribution_overlay(patch: &Raster, map: &AttributionMap) -> Raster {
    let peak = map.window.iter().copied().fold(0.0f64, f64::max);
    let mut out = patch.clone();
    for y in 0..map.patch.0 {
        for x in 0..map.patch.1 {
            let heat = if peak > 0.0 { map.window[y * map.patch.1 + x] / peak } else { 0.0 };
            let [r, g, b] = patch.pixel(y, x);
            out.set_pixel(y, x, [(0.4 * r + 0.6 * heat).min(1.0), 0.4 * g, 0.4 * b]);
        }
    }
    out
}

/// Places rasters of equal height side by side with a gray gap.
pub fn hstack(tiles: &[Raster]) -> Result<Raster> {
    let Some(first) = tiles.first() else {
        return Err(Error::Empty("panel tiles"));
    };
    let h = first.height();
    if tiles.iter().any(|t| t.height() != h) {
        return Err(Error::Dimension("panel tiles differ in height".into()));
    }
    let w = tiles.iter().map(|t| t.width()).sum::<usize>() + GAP * (tiles.len() - 1);
    let mut out = Raster::zeros(h, w);
    let mut c0 = 0;
    for (i, t) in tiles.iter().enumerate() {
        if i > 0 {
            for r in 0..h {
                for c in c0..c0 + GAP {
                    out.set_pixel(r, c, GAP_GRAY);
                }
            }
            c0 += GAP;
        }
        for r in 0..h {
            for c in 0..t.width() {
                out.set_pixel(r, c0 + c, t.pixel(r, c));
            }
        }
        c0 += t.width();
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConceptPanel {
    pub representative: Representative,
    pub nearest_patch: Raster,
    pub prototype: Raster,
    pub overlay: Raster,
    pub attribution: AttributionMap,
}

impl ConceptPanel {
    /// `[nearest patch | prototype | overlay]`, each tile enlarged by `scale`.
    pub fn compose(&self, scale: usize) -> Result<Raster> {
        hstack(&[
            self.nearest_patch.upscale(scale),
            self.prototype.upscale(scale),
            self.overlay.upscale(scale),
        ])
    }
}

/// Nearest training patch, prototype image and attribution overlay for concept `j`.
pub fn concept_panel(model: &PrototypeModel, j: usize, train: &[Sample]) -> Result<ConceptPanel> {
    let rep = representatives(model, j, train, 1)?.remove(0);
    let sample = train
        .iter()
        .find(|s| s.id == rep.image)
        .ok_or(Error::Empty("representative sample"))?;
    let g = model.geometry();
    let patch = Raster::from_values(
        g.height,
        g.width,
        sample.image.patch(rep.origin.0, rep.origin.1, g.height, g.width),
    )?;
    let bank = model.bank(&sample.image)?;
    let map = prototype_attribution(&bank, sample.image.height(), model.prototype(j), model.tau(), j);
    Ok(ConceptPanel {
        overlay: attribution_overlay(&patch, &map),
        prototype: prototype_image(model, j)?,
        nearest_patch: patch,
        attribution: map,
        representative: rep,
    })
}
