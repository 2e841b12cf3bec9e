//! Task-agnostic inference for one image: route, score within the routed
//! head(s), upsample, pool.

use crate::bank::PrototypeBank;
use crate::error::{GcrError, Result};
use crate::feature_store::{DatasetManifest, ManifestEntry, PatchFeatureMap, PixelMask};
use crate::matrix::Matrix;
use crate::routing::{self, RoutingConfig, RoutingDecision, RoutingRule};
use crate::scoring::{self, ScoreMap, ScoringConfig};

/// A test image prepared for inference: patch rows plus the geometry needed
/// to produce the pixel map.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub image_id: String,
    pub category: Option<String>,
    pub anomalous: bool,
    pub patches: Matrix,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
    pub mask: Option<PixelMask>,
}

impl ImageInput {
    pub fn from_features(
        features: &PatchFeatureMap,
        image_size: (usize, usize),
        l2_normalize: bool,
    ) -> Self {
        ImageInput {
            image_id: features.image_id.clone(),
            category: None,
            anomalous: false,
            patches: features.patch_matrix(l2_normalize),
            grid: features.grid(),
            image_size,
            mask: None,
        }
    }

    pub fn from_entry(
        manifest: &DatasetManifest,
        entry: &ManifestEntry,
        l2_normalize: bool,
    ) -> Result<Self> {
        let fm = manifest.load_features(entry)?;
        let mut input =
            Self::from_features(&fm, (entry.image_height, entry.image_width), l2_normalize);
        input.category = Some(entry.category.clone());
        input.anomalous = entry.is_anomalous();
        input.mask = Some(manifest.load_mask(entry)?);
        Ok(input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub grid_map: ScoreMap,
    pub pixel_map: ScoreMap,
    pub image_score: f64,
    pub routed_category: String,
    /// Heads whose maps were max-fused; a single entry when `topk == 1`.
    pub heads: Vec<String>,
}

/// Scores an image with known heads: their grid maps are max-fused (a
/// single head is used as-is), upsampled bilinearly and top-q pooled.
pub fn score_with_heads(
    image: &ImageInput,
    heads: &[&PrototypeBank],
    cfg: &ScoringConfig,
) -> Result<AnomalyResult> {
    let first = heads
        .first()
        .ok_or_else(|| GcrError::EmptyInput("no heads to score with".into()))?;
    let maps = heads
        .iter()
        .map(|b| scoring::head_anomaly_map(&image.patches, image.grid, b, cfg))
        .collect::<Result<Vec<_>>>()?;
    let grid_map = if maps.len() == 1 {
        maps.into_iter().next().unwrap()
    } else {
        routing::fuse_topk_max(&maps)?
    };
    let pixel_map = scoring::upsample_bilinear(&grid_map, image.image_size.0, image.image_size.1)?;
    let image_score = scoring::topq_pool(pixel_map.data(), cfg.topq);
    Ok(AnomalyResult {
        grid_map,
        pixel_map,
        image_score,
        routed_category: first.category().to_string(),
        heads: heads.iter().map(|b| b.category().to_string()).collect(),
    })
}

/// Oracle inference with the ground-truth head.
pub fn score_with_head(image: &ImageInput, head: &PrototypeBank, cfg: &ScoringConfig) -> Result<AnomalyResult> {
    score_with_heads(image, &[head], cfg)
}

pub fn route_image(
    image: &ImageInput,
    banks: &[&PrototypeBank],
    routing_cfg: &RoutingConfig,
    scoring_cfg: &ScoringConfig,
) -> Result<RoutingDecision> {
    match routing_cfg.rule {
        RoutingRule::Geometry => routing::route(&image.patches, banks, routing_cfg),
        RoutingRule::ScoreBased => routing::route_score_based(
            &image.patches,
            image.grid,
            image.image_size,
            banks,
            scoring_cfg,
            routing_cfg.topk,
        ),
    }
}

/// Routes an image among `banks` and scores it within the selected head(s).
pub fn infer(
    image: &ImageInput,
    banks: &[&PrototypeBank],
    routing_cfg: &RoutingConfig,
    scoring_cfg: &ScoringConfig,
) -> Result<(RoutingDecision, AnomalyResult)> {
    let decision = route_image(image, banks, routing_cfg, scoring_cfg)?;
    let heads: Vec<&PrototypeBank> = decision
        .selected
        .iter()
        .map(|c| {
            *banks
                .iter()
                .find(|b| b.category() == c)
                .expect("selected category is a candidate")
        })
        .collect();
    let result = score_with_heads(image, &heads, scoring_cfg)?;
    Ok((decision, result))
}
