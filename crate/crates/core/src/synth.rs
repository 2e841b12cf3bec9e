//! Synthetic multi-category patch features with known ground truth.
//!
//! Each category owns a few Gaussian components whose means sit on a sphere
//! and are pairwise separated by at least `mean_separation`. Anomalous test
//! images carry one rectangular defect whose patches are shifted along a
//! random unit direction. Output uses the regular manifest and GCRF files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GcrError, Result};
use crate::feature_store::{load_manifest, DatasetManifest, ManifestEntry, PatchFeatureMap, PixelMask, Split};
use crate::matrix::Matrix;

/// Pixel masks and image sizes are this many times the patch grid.
pub const PIXEL_SCALE: usize = 8;

const MAX_MEAN_ATTEMPTS: usize = 10_000;

/// Scales one category's within-category geometry (spread and defect
/// shift) by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inflation {
    pub category: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_categories: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    pub components_per_category: usize,
    pub mean_separation: f64,
    /// Radius of the sphere the component means are drawn on; defaults to
    /// `mean_separation` when unset.
    pub mean_radius: Option<f64>,
    pub intra_std: f64,
    pub anomaly_shift: f64,
    pub defect_area_frac: f64,
    pub train_images: usize,
    pub test_normal_images: usize,
    pub test_anomalous_images: usize,
    pub inflate: Option<Inflation>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_categories: 5,
            dim: 16,
            grid: (8, 8),
            components_per_category: 3,
            mean_separation: 20.0,
            mean_radius: None,
            intra_std: 1.0,
            anomaly_shift: 12.0,
            defect_area_frac: 0.1,
            train_images: 8,
            test_normal_images: 20,
            test_anomalous_images: 20,
            inflate: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GcrError::InvalidConfig(format!("synth spec: {m}")));
        if self.num_categories == 0 || self.dim == 0 || self.components_per_category == 0 {
            return bad("num_categories, dim and components_per_category must be positive");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid dims must be positive");
        }
        if !(self.mean_separation > 0.0) {
            return bad("mean_separation must be positive");
        }
        if !(self.intra_std >= 0.0) {
            return bad("intra_std must be nonnegative");
        }
        // A zero shift is the null-effect case: defects are labelled but
        // indistinguishable from normal patches.
        if !(self.anomaly_shift >= 0.0) {
            return bad("anomaly_shift must be nonnegative");
        }
        if !(self.defect_area_frac > 0.0 && self.defect_area_frac < 1.0) {
            return bad("defect_area_frac must lie in (0, 1)");
        }
        if self.train_images == 0 {
            return bad("train_images must be positive");
        }
        if let Some(r) = self.mean_radius {
            if !(r > 0.0) {
                return bad("mean_radius must be positive");
            }
        }
        if let Some(inf) = self.inflate {
            if inf.category >= self.num_categories || !(inf.factor > 0.0) {
                return bad("inflate must name an existing category with a positive factor");
            }
        }
        Ok(())
    }

    pub fn category_name(&self, index: usize) -> String {
        format!("cat{index:02}")
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.0 * PIXEL_SCALE, self.grid.1 * PIXEL_SCALE)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Component means for every category, rejection-sampled on the sphere.
fn sample_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<f64>>>> {
    let radius = spec.mean_radius.unwrap_or(spec.mean_separation);
    let sep2 = spec.mean_separation * spec.mean_separation;
    let mut all: Vec<Vec<f64>> = Vec::new();
    let total = spec.num_categories * spec.components_per_category;
    while all.len() < total {
        let mut placed = false;
        for _ in 0..MAX_MEAN_ATTEMPTS {
            let cand: Vec<f64> = unit_vector(rng, spec.dim).into_iter().map(|x| x * radius).collect();
            let ok = all.iter().all(|m| {
                m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= sep2
            });
            if ok {
                all.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GcrError::InvalidConfig(format!(
                "could not place {total} means with separation {} on a sphere of radius {radius} in {} dims",
                spec.mean_separation, spec.dim
            )));
        }
    }
    Ok(all
        .chunks(spec.components_per_category)
        .map(|c| c.to_vec())
        .collect())
}

struct Defect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

fn sample_defect(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Defect {
    let (gh, gw) = spec.grid;
    let area = spec.defect_area_frac * (gh * gw) as f64;
    let height = (area.sqrt().round() as usize).clamp(1, gh);
    let width = ((area / height as f64).round() as usize).clamp(1, gw);
    Defect {
        top: rng.random_range(0..=gh - height),
        left: rng.random_range(0..=gw - width),
        height,
        width,
    }
}

fn sample_image(
    spec: &SynthSpec,
    means: &[Vec<f64>],
    scale: f64,
    defect: Option<&Defect>,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let (gh, gw) = spec.grid;
    let d = spec.dim;
    let mut data = Vec::with_capacity(gh * gw * d);
    let shift = defect.map(|_| unit_vector(rng, d));
    for r in 0..gh {
        for c in 0..gw {
            let mean = &means[rng.random_range(0..means.len())];
            let in_defect = defect
                .map_or(false, |f| r >= f.top && r < f.top + f.height && c >= f.left && c < f.left + f.width);
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let mut v = mean[j] + scale * spec.intra_std * z;
                if in_defect {
                    v += scale * spec.anomaly_shift * shift.as_ref().unwrap()[j];
                }
                data.push(v as f32);
            }
        }
    }
    Matrix::new(gh * gw, d, data).expect("sized above")
}

fn defect_mask(spec: &SynthSpec, defect: &Defect) -> PixelMask {
    let (h0, w0) = spec.image_size();
    let mut data = vec![false; h0 * w0];
    for y in defect.top * PIXEL_SCALE..(defect.top + defect.height) * PIXEL_SCALE {
        for x in defect.left * PIXEL_SCALE..(defect.left + defect.width) * PIXEL_SCALE {
            data[y * w0 + x] = true;
        }
    }
    PixelMask::new(h0, w0, data).expect("sized above")
}

/// Writes `manifest.jsonl`, `synth.json`, `features/*.gcrf` and
/// `masks/*.gcrf` under `out_dir` and returns the loaded manifest.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["features", "masks"] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| GcrError::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = sample_means(spec, &mut rng)?;
    let (h0, w0) = spec.image_size();
    let (gh, gw) = spec.grid;
    let mut entries = Vec::new();

    for (ci, cat_means) in means.iter().enumerate() {
        let category = spec.category_name(ci);
        let scale = match spec.inflate {
            Some(inf) if inf.category == ci => inf.factor,
            _ => 1.0,
        };
        let plan = std::iter::repeat((Split::Train, 0u8, "train"))
            .take(spec.train_images)
            .chain(std::iter::repeat((Split::Test, 0u8, "good")).take(spec.test_normal_images))
            .chain(std::iter::repeat((Split::Test, 1u8, "defect")).take(spec.test_anomalous_images));
        let mut counters = [0usize; 3];
        for (split, label, tag) in plan {
            let slot = match tag {
                "train" => 0,
                "good" => 1,
                _ => 2,
            };
            let image_id = format!("{category}_{tag}_{:03}", counters[slot]);
            counters[slot] += 1;
            let defect = (label == 1).then(|| sample_defect(spec, &mut rng));
            let patches = sample_image(spec, cat_means, scale, defect.as_ref(), &mut rng);
            let feature_path = format!("features/{image_id}.gcrf");
            PatchFeatureMap::from_patches(&image_id, gh, gw, &patches)?.save(out.join(&feature_path))?;
            let mask_path = match &defect {
                Some(d) => {
                    let rel = format!("masks/{image_id}.gcrf");
                    defect_mask(spec, d).save(out.join(&rel))?;
                    Some(rel)
                }
                None if split == Split::Test => {
                    let rel = format!("masks/{image_id}.gcrf");
                    PixelMask::empty(h0, w0).save(out.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                image_id,
                category: category.clone(),
                split,
                image_label: label,
                feature_path,
                mask_path,
                image_height: h0,
                image_width: w0,
            });
        }
    }

    let spec_path = out.join("synth.json");
    let json = serde_json::to_string_pretty(spec).map_err(|e| GcrError::json("synth spec", e))?;
    std::fs::write(&spec_path, json + "\n").map_err(|e| GcrError::io(&spec_path, e))?;
    let manifest_path = out.join("manifest.jsonl");
    DatasetManifest::write_jsonl(&entries, &manifest_path)?;
    load_manifest(&manifest_path)
}
