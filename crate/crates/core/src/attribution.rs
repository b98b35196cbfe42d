//! Occlusion attributions for individual concepts and representative patches.
//!
//! The map for concept `j` on image `x` lives inside the receptive field of
//! the best-matching patch. Each pixel is scored by how much the activation
//! at that location drops when the pixel is set to background, clamped at
//! zero, and the scores are rescaled to sum to `c_j(x)`. When no pixel
//! lowers the activation the map is uniform over the receptive field.
//!
//! With `t_i = Σ_ch z_i (z_i - 2 p_i)` the occluded activation is
//! `c · exp(t_i / tau)`, so the raw score is `c · u_i` with
//! `u_i = max(0, 1 - exp(t_i / tau))` and the map is `c · u_i / Σ u`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prototype_activation, Match, PatchBank, PrototypeModel};
use crate::raster::{Mask, Raster};
use crate::shapes::{ImageId, Sample};

/// A nonnegative attribution map stored as its receptive-field window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub concept: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Top-left pixel of the receptive field.
    pub origin: (usize, usize),
    pub patch: (usize, usize),
    /// `a × b` row-major values; zero everywhere outside.
    pub window: Vec<f64>,
    /// The concept activation the map sums to.
    pub total: f64,
}

impl AttributionMap {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        let (r0, c0) = self.origin;
        if row >= r0 && row < r0 + self.patch.0 && col >= c0 && col < c0 + self.patch.1 {
            self.window[(row - r0) * self.patch.1 + (col - c0)]
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.image_height * self.image_width];
        for y in 0..self.patch.0 {
            for x in 0..self.patch.1 {
                out[(self.origin.0 + y) * self.image_width + self.origin.1 + x] = self.window[y * self.patch.1 + x];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.window.iter().sum()
    }

    /// `⟨self, other⟩` over the full raster; only overlapping windows contribute.
    pub fn inner(&self, other: &AttributionMap) -> Result<f64> {
        if (self.image_height, self.image_width) != (other.image_height, other.image_width) {
            return Err(Error::Dimension(format!(
                "attribution maps {}x{} and {}x{}",
                self.image_height, self.image_width, other.image_height, other.image_width
            )));
        }
        let r_lo = self.origin.0.max(other.origin.0);
        let r_hi = (self.origin.0 + self.patch.0).min(other.origin.0 + other.patch.0);
        let c_lo = self.origin.1.max(other.origin.1);
        let c_hi = (self.origin.1 + self.patch.1).min(other.origin.1 + other.patch.1);
        let mut acc = 0.0;
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                acc += self.value(r, c) * other.value(r, c);
            }
        }
        Ok(acc)
    }

    /// Pixels with strictly positive attribution.
    pub fn support(&self) -> Mask {
        let mut m = Mask::new(self.image_height, self.image_width);
        for y in 0..self.patch.0 {
            for x in 0..self.patch.1 {
                if self.window[y * self.patch.1 + x] > 0.0 {
                    m.set(self.origin.0 + y, self.origin.1 + x, true);
                }
            }
        }
        m
    }
}

/// Per-pixel `t_i = Σ_ch z (z - 2p)` over the window.
fn occlusion_exponents(z: &[f64], p: &[f64]) -> Vec<f64> {
    z.chunks_exact(3)
        .zip(p.chunks_exact(3))
        .map(|(zc, pc)| zc.iter().zip(pc).map(|(&zi, &pi)| zi * (zi - 2.0 * pi)).sum())
        .collect()
}

/// Raw occlusion drops `max(0, c - c_occluded_i)` at the best-matching location.
pub fn occlusion_deltas(bank: &PatchBank, p: &[f64], tau: f64) -> (Match, Vec<f64>) {
    let m = prototype_activation(bank, p, tau);
    let z = bank.dense_patch(m.position);
    let deltas = occlusion_exponents(&z, p)
        .into_iter()
        .map(|t| {
            let occluded = (-(m.sq_dist - t).max(0.0) / tau).exp();
            (m.activation - occluded).max(0.0)
        })
        .collect();
    (m, deltas)
}

fn unit_scores(z: &[f64], p: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let t = occlusion_exponents(z, p);
    let e: Vec<f64> = t.iter().map(|&t| (t / tau).exp()).collect();
    let u = e.iter().map(|&e| (1.0 - e).max(0.0)).collect();
    (u, e)
}

/// Attribution of a free-standing prototype on one image.
pub fn prototype_attribution(bank: &PatchBank, image_height: usize, p: &[f64], tau: f64, concept: usize) -> AttributionMap {
    let m = prototype_activation(bank, p, tau);
    let g = bank.geometry();
    let z = bank.dense_patch(m.position);
    let (u, _) = unit_scores(&z, p, tau);
    let total_u: f64 = u.iter().sum();
    let n = u.len() as f64;
    let window = if total_u > 0.0 {
        u.iter().map(|&ui| m.activation * ui / total_u).collect()
    } else {
        vec![m.activation / n; u.len()]
    };
    AttributionMap {
        concept,
        image_height,
        image_width: bank.image_width(),
        origin: m.origin,
        patch: (g.height, g.width),
        window,
        total: m.activation,
    }
}

pub fn concept_attribution(model: &PrototypeModel, j: usize, image: &Raster) -> Result<AttributionMap> {
    model.check_concept(j)?;
    let bank = model.bank(image)?;
    Ok(prototype_attribution(&bank, image.height(), model.prototype(j), model.tau(), j))
}

/// Gradient of `Σ_i g_i · attr_i` with respect to the prototype, holding the
/// receptive field `z` fixed.
pub(crate) fn attribution_backward(z: &[f64], p: &[f64], tau: f64, upstream: &[f64]) -> Vec<f64> {
    let sq: f64 = z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
    let c = (-sq / tau).exp();
    let (u, e) = unit_scores(z, p, tau);
    let total_u: f64 = u.iter().sum();
    // dc/dp = c · 2 (z - p) / tau
    let mut grad: Vec<f64> = z.iter().zip(p).map(|(a, b)| c * 2.0 * (a - b) / tau).collect();
    if total_u > 0.0 {
        let g_bar: f64 = upstream.iter().zip(&u).map(|(g, u)| g * u).sum::<f64>() / total_u;
        grad.iter_mut().for_each(|v| *v *= g_bar);
        for (i, (&ui, &ei)) in u.iter().zip(&e).enumerate() {
            if ui <= 0.0 {
                continue;
            }
            let scale = c / total_u * (upstream[i] - g_bar) * 2.0 * ei / tau;
            for ch in 0..3 {
                grad[i * 3 + ch] += scale * z[i * 3 + ch];
            }
        }
    } else {
        let mean_g = upstream.iter().sum::<f64>() / upstream.len() as f64;
        grad.iter_mut().for_each(|v| *v *= mean_g);
    }
    grad
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub image: ImageId,
    pub origin: (usize, usize),
    pub activation: f64,
}

/// The `n` training patches that activate concept `j` most, strongest first;
/// ties go to the smaller image id.
pub fn representatives(model: &PrototypeModel, j: usize, samples: &[Sample], n: usize) -> Result<Vec<Representative>> {
    model.check_concept(j)?;
    if samples.is_empty() {
        return Err(Error::Empty("representatives need a non-empty dataset"));
    }
    if n == 0 {
        return Err(Error::Config("need at least one representative".into()));
    }
    let mut all = samples
        .iter()
        .map(|s| {
            let bank = model.bank(&s.image)?;
            let m = prototype_activation(&bank, model.prototype(j), model.tau());
            Ok(Representative {
                image: s.id,
                origin: m.origin,
                activation: m.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    all.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.image.cmp(&b.image)));
    all.truncate(n);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PatchGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: PatchGeometry = PatchGeometry {
        height: 4,
        width: 4,
        stride: 2,
    };

    fn random_raster(rng: &mut ChaCha8Rng, h: usize) -> Raster {
        Raster::from_values(h, h, (0..h * h * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn model(p: Vec<f64>) -> PrototypeModel {
        PrototypeModel::from_parts(1, 1, G, 6.0, p, vec![1.0]).unwrap()
    }

    #[test]
    fn background_patch_falls_back_to_uniform() {
        let m = model(vec![0.0; 48]);
        let map = concept_attribution(&m, 0, &Raster::zeros(12, 12)).unwrap();
        assert_eq!(map.origin, (0, 0));
        assert!(map.window.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!((map.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn completeness_and_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let img = random_raster(&mut rng, 12);
            let p: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
            let m = model(p);
            let acts = m.activations(&img).unwrap();
            let map = concept_attribution(&m, 0, &img).unwrap();
            assert!((map.sum() - acts.value(0)).abs() < 1e-9);
            assert!(map.window.iter().all(|&v| v >= 0.0));
            let dense = map.to_dense();
            let support = dense.iter().filter(|&&v| v != 0.0).count();
            assert!(support <= 16);
            assert_eq!(map.origin, acts.matches[0].origin);
        }
    }

    #[test]
    fn occluding_top_pixel_hurts_at_least_as_much_as_lowest() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_raster(&mut rng, 12);
        let m = model(img.patch(4, 6, 4, 4).iter().map(|v| v * 0.9).collect());
        let bank = m.bank(&img).unwrap();
        let (best, deltas) = occlusion_deltas(&bank, m.prototype(0), m.tau());
        let map = concept_attribution(&m, 0, &img).unwrap();
        let hi = (0..16).max_by(|&a, &b| map.window[a].total_cmp(&map.window[b])).unwrap();
        let lo = (0..16).min_by(|&a, &b| map.window[a].total_cmp(&map.window[b])).unwrap();
        // true activation drops when occluding each pixel at the original location
        let drop = |i: usize| {
            let mut z = bank.dense_patch(best.position);
            z[i * 3..i * 3 + 3].fill(0.0);
            let d: f64 = z.iter().zip(m.prototype(0)).map(|(a, b)| (a - b) * (a - b)).sum();
            best.activation - (-d / m.tau()).exp()
        };
        assert!(drop(hi) >= drop(lo));
        assert!((deltas[hi] - drop(hi).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
        let p: Vec<f64> = z.iter().map(|v| v * 0.7 + 0.1 * rng.gen::<f64>()).collect();
        let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| {
            let sq: f64 = z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            let c = (-sq / 6.0).exp();
            let (u, _) = unit_scores(&z, p, 6.0);
            let total: f64 = u.iter().sum();
            u.iter().zip(&g).map(|(u, g)| g * c * u / total).sum::<f64>()
        };
        let analytic = attribution_backward(&z, &p, 6.0, &g);
        for i in 0..48 {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (f(&hi) - f(&lo)) / 2e-5;
            assert!((fd - analytic[i]).abs() < 1e-7 + 1e-5 * fd.abs(), "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn representatives_are_sorted() {
        use crate::shapes::{Scene, Split};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                id: ImageId::new(Split::Train, i),
                scene: Scene {
                    shapes: vec![],
                    label: 0,
                    confounded: false,
                    grid: 4,
                },
                image: random_raster(&mut rng, 12),
            })
            .collect();
        let m = model(samples[3].image.patch(2, 4, 4, 4));
        let reps = representatives(&m, 0, &samples, 1).unwrap();
        assert_eq!(reps[0].image, samples[3].id);
        assert!((reps[0].activation - 1.0).abs() < 1e-12);
        let all = representatives(&m, 0, &samples, 50).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].activation >= w[1].activation));
        assert!(representatives(&m, 0, &[], 1).is_err());
    }
}
