//! Patch features, pixel masks and the JSON-lines dataset manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GcrError, Result};
use crate::gcrf;
use crate::matrix::Matrix;

/// One image's patch embeddings as a `dim x height x width` grid,
/// stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub image_id: String,
    dim: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PatchFeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        dim: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 || height == 0 || width == 0 {
            return Err(GcrError::ShapeMismatch(
                "feature map dims must be positive".into(),
            ));
        }
        let expected = dim * height * width;
        if data.len() != expected {
            return Err(GcrError::DimsPayloadMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GcrError::NonFinite { index });
        }
        Ok(PatchFeatureMap {
            image_id: image_id.into(),
            dim,
            height,
            width,
            data,
        })
    }

    /// Builds a channel-major map from patch-major rows (`height * width` rows of `dim`).
    pub fn from_patches(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        patches: &Matrix,
    ) -> Result<Self> {
        let n = height * width;
        if patches.rows() != n {
            return Err(GcrError::ShapeMismatch(format!(
                "{} patches for a {height}x{width} grid",
                patches.rows()
            )));
        }
        let dim = patches.cols();
        let mut data = vec![0.0f32; dim * n];
        for (p, row) in patches.iter_rows().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                data[c * n + p] = v;
            }
        }
        Self::new(image_id, dim, height, width, data)
    }

    pub fn load(image_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = gcrf::read_tensor(path.as_ref())?;
        if dims.len() != 3 {
            return Err(GcrError::ShapeMismatch(format!(
                "{}: feature tensor must be rank 3 (D, H, W), got {:?}",
                path.as_ref().display(),
                dims
            )));
        }
        Self::new(image_id, dims[0], dims[1], dims[2], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        gcrf::write_tensor(path, &[self.dim, self.height, self.width], &self.data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Transposes to one row per patch (flattened row-major over the grid).
    pub fn patch_matrix(&self, l2_normalize: bool) -> Matrix {
        let n = self.num_patches();
        let mut out = vec![0.0f32; n * self.dim];
        for c in 0..self.dim {
            let plane = &self.data[c * n..(c + 1) * n];
            for (p, &v) in plane.iter().enumerate() {
                out[p * self.dim + c] = v;
            }
        }
        let mut m = Matrix::new(n, self.dim, out).expect("shape checked at construction");
        if l2_normalize {
            m.l2_normalize_rows();
        }
        m
    }
}

/// Binary ground-truth mask at image resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(GcrError::ShapeMismatch("mask dims must be positive".into()));
        }
        if data.len() != height * width {
            return Err(GcrError::DimsPayloadMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(PixelMask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dims, values) = gcrf::read_tensor(path)?;
        if dims.len() != 2 {
            return Err(GcrError::ShapeMismatch(format!(
                "{}: mask tensor must be rank 2 (H0, W0), got {:?}",
                path.display(),
                dims
            )));
        }
        let mut data = Vec::with_capacity(values.len());
        for (i, v) in values.into_iter().enumerate() {
            match v {
                x if x == 0.0 => data.push(false),
                x if x == 1.0 => data.push(true),
                other => {
                    return Err(GcrError::ShapeMismatch(format!(
                        "{}: mask value {other} at index {i} is not 0 or 1",
                        path.display()
                    )))
                }
            }
        }
        Self::new(dims[0], dims[1], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let payload: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        gcrf::write_tensor(path, &[self.height, self.width], &payload)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_anomalous(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub category: String,
    pub split: Split,
    pub image_label: u8,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub image_height: usize,
    pub image_width: usize,
}

impl ManifestEntry {
    pub fn is_anomalous(&self) -> bool {
        self.image_label == 1
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
    source_hash: String,
}

impl DatasetManifest {
    /// Validates entries against files under `base_dir`.
    pub fn from_entries(
        entries: Vec<ManifestEntry>,
        base_dir: impl Into<PathBuf>,
        source_hash: impl Into<String>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            entries,
            base_dir: base_dir.into(),
            source_hash: source_hash.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 1;
            if !seen.insert(e.image_id.as_str()) {
                return Err(GcrError::Manifest {
                    line,
                    message: format!("duplicate image_id {:?}", e.image_id),
                });
            }
            if e.image_label > 1 {
                return Err(GcrError::Manifest {
                    line,
                    message: format!("image_label must be 0 or 1, got {}", e.image_label),
                });
            }
            if e.split == Split::Train && e.image_label == 1 {
                return Err(GcrError::AnomalousTrain {
                    image_id: e.image_id.clone(),
                });
            }
            if e.category.is_empty() {
                return Err(GcrError::Manifest {
                    line,
                    message: "empty category".into(),
                });
            }
            if e.image_height == 0 || e.image_width == 0 {
                return Err(GcrError::Manifest {
                    line,
                    message: "image size must be positive".into(),
                });
            }
            let feat = self.resolve(&e.feature_path);
            let dims = gcrf::read_tensor_dims(&feat)?;
            if dims.len() != 3 {
                return Err(GcrError::Manifest {
                    line,
                    message: format!("feature tensor must be rank 3, got {dims:?}"),
                });
            }
            if dims[1] > e.image_height || dims[2] > e.image_width {
                return Err(GcrError::Manifest {
                    line,
                    message: format!(
                        "patch grid {}x{} exceeds image size {}x{}",
                        dims[1], dims[2], e.image_height, e.image_width
                    ),
                });
            }
            if let Some(mask) = &e.mask_path {
                let dims = gcrf::read_tensor_dims(self.resolve(mask))?;
                let mask_hw = match dims.as_slice() {
                    [h, w] => (*h, *w),
                    _ => {
                        return Err(GcrError::Manifest {
                            line,
                            message: format!("mask tensor must be rank 2, got {dims:?}"),
                        })
                    }
                };
                if mask_hw != (e.image_height, e.image_width) {
                    return Err(GcrError::MaskSizeMismatch {
                        image_id: e.image_id.clone(),
                        mask: mask_hw,
                        image: (e.image_height, e.image_width),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// SHA-256 of the manifest source bytes, hex encoded.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Categories in order of first appearance.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.category.as_str()))
            .map(|e| e.category.clone())
            .collect()
    }

    pub fn entries_for<'a>(
        &'a self,
        category: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.category == category && e.split == split)
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<PatchFeatureMap> {
        PatchFeatureMap::load(entry.image_id.clone(), self.resolve(&entry.feature_path))
    }

    /// The entry's mask, or an all-normal mask when none is recorded.
    pub fn load_mask(&self, entry: &ManifestEntry) -> Result<PixelMask> {
        match &entry.mask_path {
            Some(p) => PixelMask::load(self.resolve(p)),
            None => Ok(PixelMask::empty(entry.image_height, entry.image_width)),
        }
    }

    /// Writes the manifest as JSON lines.
    pub fn write_jsonl(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in entries {
            out.push_str(&serde_json::to_string(e).map_err(|err| GcrError::json("manifest", err))?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| GcrError::io(path, e))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| GcrError::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| GcrError::Manifest {
        line: 0,
        message: "manifest is not valid UTF-8".into(),
    })?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| GcrError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.push(entry);
    }
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let hash = hex::encode(Sha256::digest(&bytes));
    DatasetManifest::from_entries(entries, base, hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split, label: u8, mask: Option<&str>) -> ManifestEntry {
        ManifestEntry {
            image_id: id.into(),
            category: "bottle".into(),
            split,
            image_label: label,
            feature_path: format!("{id}.gcrf"),
            mask_path: mask.map(str::to_string),
            image_height: 4,
            image_width: 4,
        }
    }

    fn write_feature(dir: &Path, id: &str) {
        let fm = PatchFeatureMap::new(id, 2, 2, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        fm.save(dir.join(format!("{id}.gcrf"))).unwrap();
    }

    #[test]
    fn two_line_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_feature(dir.path(), "a");
        write_feature(dir.path(), "b");
        let mut mask = vec![false; 16];
        mask[5] = true;
        PixelMask::new(4, 4, mask).unwrap().save(dir.path().join("b_mask.gcrf")).unwrap();
        let entries = vec![
            entry("a", Split::Train, 0, None),
            entry("b", Split::Test, 1, Some("b_mask.gcrf")),
        ];
        let path = dir.path().join("m.jsonl");
        DatasetManifest::write_jsonl(&entries, &path).unwrap();
        let before = std::fs::read(dir.path().join("a.gcrf")).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries, entries);
        assert_eq!(m.categories(), vec!["bottle".to_string()]);
        assert_eq!(m.source_hash().len(), 64);
        assert_eq!(std::fs::read(dir.path().join("a.gcrf")).unwrap(), before);
        let mask = m.load_mask(&m.entries[1]).unwrap();
        assert_eq!(mask.count_anomalous(), 1);
        let fm = m.load_features(&m.entries[0]).unwrap();
        assert_eq!(fm.dim(), 2);
        assert_eq!(fm.grid(), (2, 2));
    }

    #[test]
    fn rejects_anomalous_train_image() {
        let dir = tempfile::tempdir().unwrap();
        write_feature(dir.path(), "a");
        let path = dir.path().join("m.jsonl");
        DatasetManifest::write_jsonl(&[entry("a", Split::Train, 1, None)], &path).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("anomalous image in train split"), "{err}");
    }

    #[test]
    fn rejects_wrong_mask_size() {
        let dir = tempfile::tempdir().unwrap();
        write_feature(dir.path(), "b");
        PixelMask::empty(3, 4).save(dir.path().join("m.gcrf")).unwrap();
        let path = dir.path().join("m.jsonl");
        DatasetManifest::write_jsonl(&[entry("b", Split::Test, 1, Some("m.gcrf"))], &path)
            .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("mask/image size mismatch"), "{err}");
    }

    #[test]
    fn rejects_missing_file_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        DatasetManifest::write_jsonl(&[entry("zz", Split::Test, 0, None)], &path).unwrap();
        assert!(matches!(load_manifest(&path), Err(GcrError::Io { .. })));

        write_feature(dir.path(), "a");
        let line = r#"{"image_id":"a","category":"c","split":"train","image_label":0,"feature_path":"a.gcrf","image_height":4,"image_width":4,"extra":1}"#;
        std::fs::write(&path, line).unwrap();
        assert!(matches!(load_manifest(&path), Err(GcrError::Manifest { line: 1, .. })));
    }

    #[test]
    fn patch_matrix_transposes_channel_major() {
        // D=2, grid 1x3: channel 0 = [1,2,3], channel 1 = [10,20,30]
        let fm = PatchFeatureMap::new("x", 2, 1, 3, vec![1., 2., 3., 10., 20., 30.]).unwrap();
        let m = fm.patch_matrix(false);
        assert_eq!(m.as_slice(), &[1., 10., 2., 20., 3., 30.]);
        let back = PatchFeatureMap::from_patches("x", 1, 3, &m).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn non_finite_features_rejected() {
        let err = PatchFeatureMap::new("x", 1, 1, 2, vec![0.0, f32::INFINITY]).unwrap_err();
        assert!(matches!(err, GcrError::NonFinite { index: 1 }));
    }
}
