//! View manifests: the per-set index tying view ids and labels to tensor files.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::blob::{read_header, read_tensor, write_tensor, Role, TensorBlob, TensorError, TensorHeader};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} does not parse: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("view {view_id}: tensor file {path} does not exist")]
    MissingFile { view_id: String, path: PathBuf },
    #[error("view {view_id}, role {role}: {source}")]
    Tensor {
        view_id: String,
        role: Role,
        #[source]
        source: TensorError,
    },
    #[error("duplicate view id {0:?}")]
    DuplicateViewId(String),
    #[error("view {view_id}, role {role}: grid mismatch, {detail}")]
    GridMismatch {
        view_id: String,
        role: Role,
        detail: String,
    },
    #[error("invalid token grid: {0}")]
    InvalidGrid(String),
    #[error("unknown view id {0:?}")]
    UnknownView(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Clean,
    Distractor,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Clean => "clean",
            Label::Distractor => "distractor",
            Label::Unknown => "unknown",
        })
    }
}

/// Token layout of every view in a set.
///
/// Each view contributes `tokens_per_image` consecutive tokens to the
/// backbone's sequence: `patch_start_idx` special tokens followed by
/// `h_patches * w_patches` patch tokens in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h_patches: usize,
    pub w_patches: usize,
    pub patch_start_idx: usize,
    pub tokens_per_image: usize,
    pub feature_dim: usize,
}

impl TokenGrid {
    pub fn new(
        h_patches: usize,
        w_patches: usize,
        patch_start_idx: usize,
        feature_dim: usize,
    ) -> Result<Self, ManifestError> {
        let grid = TokenGrid {
            h_patches,
            w_patches,
            patch_start_idx,
            tokens_per_image: patch_start_idx + h_patches * w_patches,
            feature_dim,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn num_patches(&self) -> usize {
        self.h_patches * self.w_patches
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.h_patches == 0 || self.w_patches == 0 || self.feature_dim == 0 {
            return Err(ManifestError::InvalidGrid(
                "h_patches, w_patches and feature_dim must be positive".into(),
            ));
        }
        if self.tokens_per_image != self.patch_start_idx + self.num_patches() {
            return Err(ManifestError::InvalidGrid(format!(
                "tokens_per_image {} != patch_start_idx {} + {}x{}",
                self.tokens_per_image, self.patch_start_idx, self.h_patches, self.w_patches
            )));
        }
        Ok(())
    }
}

/// How pose matrices `[R | t]` map points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseConvention {
    /// `x_cam = R x_world + t` (extrinsics); camera center is `-Rᵀt`.
    #[default]
    CameraFromWorld,
    /// `x_world = R x_cam + t`; camera center is `t`.
    WorldFromCamera,
}

/// A tensor either on disk (header already validated) or held in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorRef {
    File { path: PathBuf, header: TensorHeader },
    Memory(Arc<TensorBlob>),
}

impl TensorRef {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, TensorError> {
        let path = path.into();
        let header = read_header(&path)?;
        Ok(TensorRef::File { path, header })
    }

    pub fn header(&self) -> TensorHeader {
        match self {
            TensorRef::File { header, .. } => header.clone(),
            TensorRef::Memory(blob) => blob.header(),
        }
    }

    pub fn load(&self) -> Result<Arc<TensorBlob>, TensorError> {
        match self {
            TensorRef::File { path, header } => {
                let blob = read_tensor(path)?;
                if blob.header() != *header {
                    return Err(TensorError::Header(format!(
                        "{} changed on disk since the manifest was loaded",
                        path.display()
                    )));
                }
                Ok(Arc::new(blob))
            }
            TensorRef::Memory(blob) => Ok(Arc::clone(blob)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: String,
    pub label: Label,
    pub tensors: BTreeMap<Role, TensorRef>,
    pub gt_pose: Option<TensorRef>,
    pub gt_depth: Option<TensorRef>,
}

impl ViewRecord {
    pub fn new(view_id: impl Into<String>, label: Label) -> Self {
        ViewRecord {
            view_id: view_id.into(),
            label,
            tensors: BTreeMap::new(),
            gt_pose: None,
            gt_depth: None,
        }
    }

    pub fn with_tensor(mut self, blob: TensorBlob) -> Self {
        self.tensors.insert(blob.role, TensorRef::Memory(Arc::new(blob)));
        self
    }

    pub fn has(&self, role: Role) -> bool {
        self.tensors.contains_key(&role)
    }

    pub fn load(&self, role: Role) -> Result<Arc<TensorBlob>, ManifestError> {
        let r = self.tensors.get(&role).ok_or_else(|| ManifestError::Tensor {
            view_id: self.view_id.clone(),
            role,
            source: TensorError::Header("role not present".into()),
        })?;
        r.load().map_err(|source| ManifestError::Tensor {
            view_id: self.view_id.clone(),
            role,
            source,
        })
    }
}

/// An ordered set of views sharing one token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewManifest {
    pub set_id: String,
    pub grid: TokenGrid,
    pub layer_of_interest: u32,
    pub pose_convention: PoseConvention,
    pub views: Vec<ViewRecord>,
}

// On-disk schema.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    set_id: String,
    grid: TokenGrid,
    layer: u32,
    #[serde(default, skip_serializing_if = "is_default_convention")]
    pose_convention: PoseConvention,
    views: Vec<ViewEntry>,
}

fn unknown_label() -> Label {
    Label::Unknown
}

fn is_default_convention(c: &PoseConvention) -> bool {
    *c == PoseConvention::default()
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    id: String,
    #[serde(default = "unknown_label")]
    label: Label,
    #[serde(default)]
    tensors: BTreeMap<Role, String>,
    #[serde(default)]
    gt_pose: Option<String>,
    #[serde(default)]
    gt_depth: Option<String>,
}

impl ViewManifest {
    pub fn new(set_id: impl Into<String>, grid: TokenGrid, layer_of_interest: u32) -> Self {
        ViewManifest {
            set_id: set_id.into(),
            grid,
            layer_of_interest,
            pose_convention: PoseConvention::default(),
            views: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view_ids(&self) -> Vec<String> {
        self.views.iter().map(|v| v.view_id.clone()).collect()
    }

    pub fn index_of(&self, view_id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.view_id == view_id)
    }

    pub fn view(&self, view_id: &str) -> Result<&ViewRecord, ManifestError> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or_else(|| ManifestError::UnknownView(view_id.to_string()))
    }

    pub fn labels(&self) -> HashMap<String, Label> {
        self.views.iter().map(|v| (v.view_id.clone(), v.label)).collect()
    }

    /// A new manifest holding the named views in the given order.
    pub fn subset(&self, set_id: impl Into<String>, ids: &[String]) -> Result<Self, ManifestError> {
        let views = ids
            .iter()
            .map(|id| self.view(id).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let m = ViewManifest {
            set_id: set_id.into(),
            views,
            ..self.clone()
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks id uniqueness and that every tensor agrees with the grid.
    pub fn validate(&self) -> Result<(), ManifestError> {
        self.grid.validate()?;
        let mut seen = HashSet::new();
        for v in &self.views {
            if !seen.insert(v.view_id.as_str()) {
                return Err(ManifestError::DuplicateViewId(v.view_id.clone()));
            }
        }

        let g = &self.grid;
        // (heads, d_head) of the first view carrying queries/keys; all others must match.
        let mut qk_dims: Option<(usize, usize)> = None;
        for v in &self.views {
            for (&role, tref) in &v.tensors {
                let header = tref.header();
                let mismatch = |detail: String| ManifestError::GridMismatch {
                    view_id: v.view_id.clone(),
                    role,
                    detail,
                };
                if header.role != role {
                    return Err(ManifestError::Tensor {
                        view_id: v.view_id.clone(),
                        role,
                        source: TensorError::Header(format!(
                            "file declares role {} but is listed as {}",
                            header.role, role
                        )),
                    });
                }
                if header.view_id != v.view_id {
                    return Err(ManifestError::Tensor {
                        view_id: v.view_id.clone(),
                        role,
                        source: TensorError::InvalidViewId(header.view_id.clone()),
                    });
                }
                let s = &header.shape;
                match role {
                    Role::Features => {
                        if s[..] != [g.h_patches, g.w_patches, g.feature_dim] {
                            return Err(mismatch(format!(
                                "features shape {:?}, grid expects [{}, {}, {}]",
                                s, g.h_patches, g.w_patches, g.feature_dim
                            )));
                        }
                    }
                    Role::Queries | Role::Keys => {
                        if s[1] != g.tokens_per_image {
                            return Err(mismatch(format!(
                                "{} tokens, grid expects {}",
                                s[1], g.tokens_per_image
                            )));
                        }
                        match qk_dims {
                            None => qk_dims = Some((s[0], s[2])),
                            Some(dims) if dims != (s[0], s[2]) => {
                                return Err(mismatch(format!(
                                    "heads/d_head {:?}, other views use {:?}",
                                    (s[0], s[2]),
                                    dims
                                )))
                            }
                            Some(_) => {}
                        }
                    }
                    Role::AttentionRows => {
                        if s[1] != g.num_patches() {
                            return Err(mismatch(format!(
                                "{} query rows, grid has {} patch tokens",
                                s[1],
                                g.num_patches()
                            )));
                        }
                        if s[2] % g.tokens_per_image != 0 {
                            return Err(mismatch(format!(
                                "{} key tokens is not a multiple of {}",
                                s[2], g.tokens_per_image
                            )));
                        }
                    }
                    Role::Pose | Role::Depth | Role::DepthMask => {}
                }
            }
            if let Some(d) = v.tensors.get(&Role::Depth) {
                if let Some(m) = v.tensors.get(&Role::DepthMask) {
                    if d.header().shape != m.header().shape {
                        return Err(ManifestError::GridMismatch {
                            view_id: v.view_id.clone(),
                            role: Role::DepthMask,
                            detail: "mask shape differs from depth shape".into(),
                        });
                    }
                }
            }
            for (expected, gt) in [(Role::Pose, &v.gt_pose), (Role::Depth, &v.gt_depth)] {
                if let Some(gt) = gt {
                    let h = gt.header();
                    if h.role != expected {
                        return Err(ManifestError::Tensor {
                            view_id: v.view_id.clone(),
                            role: expected,
                            source: TensorError::Header(format!("ground-truth file declares role {}", h.role)),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Loads a manifest, resolving relative paths against its directory and
    /// validating every referenced tensor header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ManifestFile = serde_json::from_str(&text).map_err(|source| ManifestError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let open = |view_id: &str, role: Role, rel: &str| -> Result<TensorRef, ManifestError> {
            let p = base.join(rel);
            if !p.is_file() {
                return Err(ManifestError::MissingFile {
                    view_id: view_id.to_string(),
                    path: p,
                });
            }
            TensorRef::open(p).map_err(|source| ManifestError::Tensor {
                view_id: view_id.to_string(),
                role,
                source,
            })
        };

        let mut views = Vec::with_capacity(file.views.len());
        for entry in &file.views {
            let mut rec = ViewRecord::new(entry.id.clone(), entry.label);
            for (&role, rel) in &entry.tensors {
                rec.tensors.insert(role, open(&entry.id, role, rel)?);
            }
            rec.gt_pose = entry
                .gt_pose
                .as_deref()
                .map(|rel| open(&entry.id, Role::Pose, rel))
                .transpose()?;
            rec.gt_depth = entry
                .gt_depth
                .as_deref()
                .map(|rel| open(&entry.id, Role::Depth, rel))
                .transpose()?;
            views.push(rec);
        }
        let manifest = ViewManifest {
            set_id: file.set_id,
            grid: file.grid,
            layer_of_interest: file.layer,
            pose_convention: file.pose_convention,
            views,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Writes the manifest to `path`, materialising in-memory tensors next to it.
    ///
    /// In-memory tensors are written as `<view>_<role>.vsf` (ground truth as
    /// `<view>_gt_pose.vsf` / `<view>_gt_depth.vsf`), with a `-N` suffix when
    /// two sanitised view ids collide. File-backed tensors keep
    /// their location, stored relative to the manifest directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        self.validate()?;
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(base).map_err(|source| ManifestError::Io {
            path: base.to_path_buf(),
            source,
        })?;
        let mut used = std::collections::HashSet::new();
        let mut store = |view_id: &str, role: Role, name: &str, tref: &TensorRef| -> Result<String, ManifestError> {
            match tref {
                TensorRef::File { path, .. } => {
                    Ok(path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned())
                }
                TensorRef::Memory(blob) => {
                    let stem = format!("{}_{}", sanitize(view_id), name);
                    let mut file_name = format!("{stem}.vsf");
                    let mut n = 1;
                    while !used.insert(file_name.clone()) {
                        file_name = format!("{stem}-{n}.vsf");
                        n += 1;
                    }
                    write_tensor(blob, base.join(&file_name)).map_err(|source| ManifestError::Tensor {
                        view_id: view_id.to_string(),
                        role,
                        source,
                    })?;
                    Ok(file_name)
                }
            }
        };

        let mut views = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let mut tensors = BTreeMap::new();
            for (&role, tref) in &v.tensors {
                tensors.insert(role, store(&v.view_id, role, role.as_str(), tref)?);
            }
            let gt_pose = v
                .gt_pose
                .as_ref()
                .map(|t| store(&v.view_id, Role::Pose, "gt_pose", t))
                .transpose()?;
            let gt_depth = v
                .gt_depth
                .as_ref()
                .map(|t| store(&v.view_id, Role::Depth, "gt_depth", t))
                .transpose()?;
            views.push(ViewEntry {
                id: v.view_id.clone(),
                label: v.label,
                tensors,
                gt_pose,
                gt_depth,
            });
        }
        let file = ManifestFile {
            set_id: self.set_id.clone(),
            grid: self.grid,
            layer: self.layer_of_interest,
            pose_convention: self.pose_convention,
            views,
        };
        let text = serde_json::to_string_pretty(&file).expect("manifest serialises");
        std::fs::write(path, text + "\n").map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ViewManifest, ManifestError> {
    ViewManifest::load(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissingRoles {
    pub view_id: String,
    pub roles: Vec<Role>,
}

/// Per-view report of required roles that are absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub missing: Vec<MissingRoles>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.missing.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self
            .missing
            .iter()
            .map(|m| {
                let roles: Vec<&str> = m.roles.iter().map(|r| r.as_str()).collect();
                format!("{} lacks {}", m.view_id, roles.join("+"))
            })
            .collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_set(manifest: &ViewManifest, required: &BTreeSet<Role>) -> ValidationReport {
    let missing = manifest
        .views
        .iter()
        .filter_map(|v| {
            let roles: Vec<Role> = required.iter().copied().filter(|r| !v.has(*r)).collect();
            (!roles.is_empty()).then(|| MissingRoles {
                view_id: v.view_id.clone(),
                roles,
            })
        })
        .collect();
    ValidationReport { missing }
}
