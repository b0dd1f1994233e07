//! On-disk models and factorized artifacts.
//!
//! A model directory holds `model.json` and headerless little-endian tensor
//! files in row-major `(F1, F2, I, O)` order. Tensors without a file are
//! size-only (enough for budgeting, not for decomposition). Paths are relative
//! to the manifest's directory.
//!
//! A factorized artifact directory holds `model.factorized.json`,
//! `report.json` and `factors/*.bin`. Factors are stored folded: a left factor
//! as an `(F1, 1, I, r)` kernel, a right factor as a `(1, F2, r, O)` kernel.
//! File names are `g{id}_shared_v.bin` / `{member}_u.bin` for the right-shared
//! part and `g{id}_shared_u.bin` / `{member}_v.bin` for the left-shared part.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{apportion_rank, ConvLayerSpec, CompressionReport, GroupSpec, LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::joint::{
    check_shapes, DualFactorization, Factorization, GroupFactorization, LayerGroup, LeftSharedFactorization, Method,
    RightSharedFactorization, DEFAULT_ITERATIONS,
};
use crate::tensor::{fold, unfold, Matrix, Precision, Shape4, Tensor4};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const FACTORIZED_FILE: &str = "model.factorized.json";
pub const REPORT_FILE: &str = "report.json";
pub const FACTORS_DIR: &str = "factors";
pub const DEFAULT_P: f64 = 0.5;

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    /// `[F1, F2, I, O]`.
    pub shape: [usize; 4],
    pub dtype: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Spatial extent `[H, W]` of the layer's input.
    pub input_hw: [usize; 2],
}

impl TensorEntry {
    pub fn shape4(&self) -> Result<Shape4> {
        Shape4::from_array(self.shape)
    }

    pub fn conv_spec(&self) -> Result<ConvLayerSpec> {
        Ok(ConvLayerSpec {
            shape: self.shape4()?,
            stride: self.stride,
            input_h: self.input_hw[0],
            input_w: self.input_hw[1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub group_id: usize,
    pub method: Method,
    pub members: Vec<String>,
    /// Total rank; split by `p` for the dual method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_l: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_cf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl GroupEntry {
    pub fn new(group_id: usize, method: Method, members: Vec<String>) -> Self {
        GroupEntry {
            group_id,
            method,
            members,
            rank: None,
            r_r: None,
            r_l: None,
            target_cf: None,
            p: None,
            k: None,
        }
    }

    /// Ranks fixed by the manifest under `method`, if any.
    pub fn explicit_ranks(&self, method: Method, p: f64) -> Result<Option<(usize, usize)>> {
        let split = match (self.rank, self.r_r, self.r_l) {
            (None, None, None) => return Ok(None),
            (Some(r), None, None) => match method {
                Method::Rjsvd => (r, 0),
                Method::Ljsvd => (0, r),
                Method::Bijsvd => apportion_rank(r, p),
            },
            (None, r_r, r_l) => (r_r.unwrap_or(0), r_l.unwrap_or(0)),
            _ => {
                return Err(Error::Manifest(format!(
                    "group {}: give either rank or r_r/r_l, not both",
                    self.group_id
                )))
            }
        };
        let ok = match method {
            Method::Rjsvd => split.0 >= 1 && split.1 == 0,
            Method::Ljsvd => split.0 == 0 && split.1 >= 1,
            Method::Bijsvd => split.0 + split.1 >= 1,
        };
        if !ok {
            return Err(Error::Manifest(format!(
                "group {}: ranks (r_r = {}, r_l = {}) do not suit {method}",
                self.group_id, split.0, split.1
            )));
        }
        Ok(Some(split))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    #[serde(default)]
    pub other_params: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub groups: Vec<GroupEntry>,
}

impl ModelManifest {
    pub fn new(tensors: Vec<TensorEntry>, groups: Vec<GroupEntry>, other_params: u64) -> Self {
        ModelManifest {
            format_version: FORMAT_VERSION,
            other_params,
            tensors,
            groups,
        }
    }

    /// Parses and validates manifest text; `path` is only used in errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        if let Some(tensors) = value.get("tensors").and_then(|t| t.as_array()) {
            for t in tensors {
                if let Some(d) = t.get("dtype").and_then(|d| d.as_str()) {
                    d.parse::<Precision>()?;
                }
            }
        }
        let manifest: ModelManifest = serde_json::from_str(text).map_err(parse_err)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn group(&self, group_id: usize) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut names = HashSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::DuplicateName(t.name.clone()));
            }
            t.shape4()
                .map_err(|e| Error::Manifest(format!("tensor `{}`: {e}", t.name)))?;
            if t.stride == 0 || t.input_hw.contains(&0) {
                return Err(Error::Manifest(format!(
                    "tensor `{}`: stride and input_hw must be positive",
                    t.name
                )));
            }
        }
        let mut ids = HashSet::new();
        let mut owner = HashSet::new();
        for g in &self.groups {
            if !ids.insert(g.group_id) {
                return Err(Error::Manifest(format!("duplicate group_id {}", g.group_id)));
            }
            for m in &g.members {
                if !owner.insert(m.as_str()) {
                    return Err(Error::OverlappingGroups(m.clone()));
                }
            }
            self.check_group(g, g.method)?;
            let p = g.p.unwrap_or(DEFAULT_P);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Manifest(format!("group {}: p = {p} is outside [0, 1]", g.group_id)));
            }
            if g.k == Some(0) {
                return Err(Error::ZeroIterations);
            }
            if let Some(cf) = g.target_cf {
                if !(cf.is_finite() && cf > 0.0) {
                    return Err(Error::Manifest(format!("group {}: target_cf must be positive", g.group_id)));
                }
                if g.rank.is_some() || g.r_r.is_some() || g.r_l.is_some() {
                    return Err(Error::Manifest(format!(
                        "group {}: target_cf and ranks are mutually exclusive",
                        g.group_id
                    )));
                }
            }
            g.explicit_ranks(g.method, p)?;
        }
        Ok(())
    }

    /// Checks that `g`'s members exist and stack under `method`.
    pub fn check_group(&self, g: &GroupEntry, method: Method) -> Result<()> {
        let mut shapes = Vec::with_capacity(g.members.len());
        for m in &g.members {
            let t = self.tensor(m).ok_or_else(|| Error::UnknownLayer(m.clone()))?;
            shapes.push((m.as_str(), t.shape4()?));
        }
        check_shapes(g.group_id, &shapes, method)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let layers = self
            .tensors
            .iter()
            .map(|t| {
                Ok(LayerSpec {
                    name: t.name.clone(),
                    conv: t.conv_spec()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelSpec {
            layers,
            other_params: self.other_params,
        })
    }

    /// Budget view of the groups. `method` and `p` override the manifest.
    pub fn group_specs(&self, method: Option<Method>, p: Option<f64>) -> Result<Vec<GroupSpec>> {
        self.groups
            .iter()
            .map(|g| {
                let method = method.unwrap_or(g.method);
                self.check_group(g, method)?;
                let p = p.or(g.p).unwrap_or(DEFAULT_P);
                Ok(GroupSpec {
                    group_id: g.group_id,
                    method,
                    members: g.members.clone(),
                    fixed: g.explicit_ranks(method, p)?,
                })
            })
            .collect()
    }
}

/// A loaded model: manifest, its directory, and every tensor that has a file.
#[derive(Debug, Clone)]
pub struct Model {
    pub manifest: ModelManifest,
    pub dir: PathBuf,
    pub tensors: BTreeMap<String, Tensor4>,
}

impl Model {
    /// Weights of `g`'s members as a [`LayerGroup`].
    pub fn layer_group(&self, g: &GroupEntry) -> Result<LayerGroup> {
        let members = g
            .members
            .iter()
            .map(|m| {
                let t = self
                    .tensors
                    .get(m)
                    .ok_or_else(|| Error::Manifest(format!("tensor `{m}` has no weight file")))?;
                Ok((m.clone(), t.clone()))
            })
            .collect::<Result<_>>()?;
        LayerGroup::new(g.group_id, members)
    }
}

pub fn read_manifest(path: &Path) -> Result<ModelManifest> {
    let text = read_text(path)?;
    ModelManifest::parse(&text, path)
}

/// Loads `model.json` (or the manifest at `path`) and every referenced file.
pub fn load_model(path: &Path) -> Result<Model> {
    let manifest = read_manifest(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        if let Some(file) = &t.file {
            let tensor = read_tensor_file(&dir.join(file), t.shape4()?, t.dtype)?;
            tensors.insert(t.name.clone(), tensor);
        }
    }
    Ok(Model { manifest, dir, tensors })
}

/// Writes `manifest` and the weight files it references into `dir`.
pub fn save_model(
    manifest: &ModelManifest,
    tensors: &BTreeMap<String, Tensor4>,
    dir: &Path,
    force: bool,
) -> Result<PathBuf> {
    manifest.validate()?;
    let path = dir.join(MANIFEST_FILE);
    if path.exists() && !force {
        return Err(Error::OutputExists(path));
    }
    create_dir(dir)?;
    for t in &manifest.tensors {
        let Some(file) = &t.file else { continue };
        let tensor = tensors.get(&t.name).ok_or_else(|| Error::UnknownLayer(t.name.clone()))?;
        if tensor.shape().to_array() != t.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{}` has shape {} but the manifest says {:?}",
                t.name,
                tensor.shape(),
                t.shape
            )));
        }
        let target = dir.join(file);
        if let Some(parent) = target.parent() {
            create_dir(parent)?;
        }
        write_file(&target, &encode(tensor.data(), t.dtype))?;
    }
    write_file(&path, manifest.to_json().as_bytes())?;
    Ok(path)
}

/// Raw little-endian bytes of `data` at `dtype`.
pub fn encode(data: &[f64], dtype: Precision) -> Vec<u8> {
    match dtype {
        Precision::F64 => data.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Precision::F32 => data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Precision) -> Vec<f64> {
    match dtype {
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    }
}

pub fn read_tensor_file(path: &Path, shape: Shape4, dtype: Precision) -> Result<Tensor4> {
    let bytes = read_bytes(path)?;
    tensor_from_bytes(path, &bytes, shape, dtype)
}

fn tensor_from_bytes(path: &Path, bytes: &[u8], shape: Shape4, dtype: Precision) -> Result<Tensor4> {
    let expected = (shape.len() * dtype.byte_size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Tensor4::with_dtype(shape, dtype, decode(bytes, dtype))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        message: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One stored factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorFile {
    /// Relative to the artifact directory.
    pub file: String,
    pub shape: [usize; 4],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizedMember {
    pub name: String,
    pub shape: [usize; 4],
    /// `‖Wⁿ − approximation‖²` of the stored (rounded) factors.
    pub residual_sq: f64,
    /// Right-shared part: member factor `Uⁿ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<FactorFile>,
    /// Left-shared part: member factor `Vⁿ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<FactorFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizedGroup {
    pub group_id: usize,
    pub method: Method,
    pub r_r: usize,
    pub r_l: usize,
    pub p: f64,
    pub k: usize,
    /// Solver objective, before rounding to the artifact precision.
    pub residual_sq: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_v: Option<FactorFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_u: Option<FactorFile>,
    pub members: Vec<FactorizedMember>,
}

impl FactorizedGroup {
    pub fn factor_files(&self) -> impl Iterator<Item = &FactorFile> {
        self.shared_v
            .iter()
            .chain(self.shared_u.iter())
            .chain(self.members.iter().flat_map(|m| m.u.iter().chain(m.v.iter())))
    }

    /// Members whose reconstruction reads `file`.
    pub fn users_of(&self, file: &str) -> Vec<&str> {
        let shared = [&self.shared_v, &self.shared_u]
            .iter()
            .any(|f| f.as_ref().is_some_and(|f| f.file == file));
        self.members
            .iter()
            .filter(|m| {
                shared
                    || m.u.as_ref().is_some_and(|f| f.file == file)
                    || m.v.as_ref().is_some_and(|f| f.file == file)
            })
            .map(|m| m.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizedManifest {
    pub format_version: u32,
    pub precision: Precision,
    pub groups: Vec<FactorizedGroup>,
    pub report: CompressionReport,
}

impl FactorizedManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn factor_params(&self) -> u64 {
        self.groups
            .iter()
            .flat_map(FactorizedGroup::factor_files)
            .map(|f| f.shape.iter().product::<usize>() as u64)
            .sum()
    }
}

/// A decomposed group ready to be written.
#[derive(Debug, Clone)]
pub struct DecomposedGroup {
    pub group: LayerGroup,
    pub factorization: GroupFactorization,
    pub p: f64,
    pub k: usize,
}

fn round_right(f: &RightSharedFactorization, dtype: Precision) -> RightSharedFactorization {
    RightSharedFactorization {
        shared_v: f.shared_v.to_precision(dtype),
        member_us: f.member_us.iter().map(|u| u.to_precision(dtype)).collect(),
        rank_r: f.rank_r,
        residual_sq: f.residual_sq,
    }
}

fn round_left(f: &LeftSharedFactorization, dtype: Precision) -> LeftSharedFactorization {
    LeftSharedFactorization {
        shared_u: f.shared_u.to_precision(dtype),
        member_vs: f.member_vs.iter().map(|v| v.to_precision(dtype)).collect(),
        rank_l: f.rank_l,
        residual_sq: f.residual_sq,
    }
}

/// `f` with every factor rounded to `dtype`.
pub fn round_factorization(f: &GroupFactorization, dtype: Precision) -> GroupFactorization {
    match f {
        GroupFactorization::Right(r) => GroupFactorization::Right(round_right(r, dtype)),
        GroupFactorization::Left(l) => GroupFactorization::Left(round_left(l, dtype)),
        GroupFactorization::Dual(d) => GroupFactorization::Dual(DualFactorization {
            right: round_right(&d.right, dtype),
            left: round_left(&d.left, dtype),
            iterations: d.iterations,
            objective_trace: d.objective_trace.clone(),
        }),
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

struct FactorWriter<'a> {
    dir: &'a Path,
    dtype: Precision,
}

impl FactorWriter<'_> {
    fn write(&self, name: String, m: &Matrix, shape: Shape4) -> Result<FactorFile> {
        let t = fold(m, shape)?;
        let bytes = encode(t.data(), self.dtype);
        let file = format!("{FACTORS_DIR}/{name}");
        write_file(&self.dir.join(&file), &bytes)?;
        Ok(FactorFile {
            file,
            shape: shape.to_array(),
            sha256: sha256_hex(&bytes),
        })
    }
}

fn vertical_shape(s: Shape4, r: usize) -> Result<Shape4> {
    Shape4::new(s.f1, 1, s.i, r)
}

fn horizontal_shape(s: Shape4, r: usize) -> Result<Shape4> {
    Shape4::new(1, s.f2, r, s.o)
}

/// Writes the factorized artifact into `out_dir` and returns the manifest path.
/// Refuses to touch an existing artifact unless `force`.
pub fn save_factorized(
    out_dir: &Path,
    groups: &[DecomposedGroup],
    report: &CompressionReport,
    dtype: Precision,
    force: bool,
) -> Result<PathBuf> {
    let manifest_path = out_dir.join(FACTORIZED_FILE);
    if manifest_path.exists() || out_dir.join(REPORT_FILE).exists() {
        if !force {
            return Err(Error::OutputExists(manifest_path));
        }
        let factors = out_dir.join(FACTORS_DIR);
        if factors.exists() {
            fs::remove_dir_all(&factors).map_err(|e| Error::io(&factors, e))?;
        }
    }
    create_dir(&out_dir.join(FACTORS_DIR))?;
    let writer = FactorWriter { dir: out_dir, dtype };

    let mut entries = Vec::with_capacity(groups.len());
    for dg in groups {
        let gid = dg.group.group_id();
        let stored = round_factorization(&dg.factorization, dtype);
        let shapes = dg.group.shapes();
        let first = shapes[0];
        let (r_r, r_l) = stored.ranks();

        let shared_v = match stored.right() {
            Some(r) => Some(writer.write(
                format!("g{gid}_shared_v.bin"),
                &r.shared_v,
                horizontal_shape(first, r_r)?,
            )?),
            None => None,
        };
        let shared_u = match stored.left() {
            Some(l) => Some(writer.write(
                format!("g{gid}_shared_u.bin"),
                &l.shared_u,
                vertical_shape(first, r_l)?,
            )?),
            None => None,
        };
        let mut members = Vec::with_capacity(shapes.len());
        for (n, (name, w)) in dg.group.members().iter().enumerate() {
            let shape = w.shape();
            let stem = file_stem(name);
            let u = match stored.right() {
                Some(r) => Some(writer.write(format!("{stem}_u.bin"), &r.member_us[n], vertical_shape(shape, r_r)?)?),
                None => None,
            };
            let v = match stored.left() {
                Some(l) => Some(writer.write(format!("{stem}_v.bin"), &l.member_vs[n], horizontal_shape(shape, r_l)?)?),
                None => None,
            };
            let residual_sq = unfold(w).sub(&stored.approximation(n)?)?.frobenius_norm_sq();
            members.push(FactorizedMember {
                name: name.clone(),
                shape: shape.to_array(),
                residual_sq,
                u,
                v,
            });
        }
        let objective_trace = match &dg.factorization {
            GroupFactorization::Dual(d) => d.objective_trace.clone(),
            _ => Vec::new(),
        };
        entries.push(FactorizedGroup {
            group_id: gid,
            method: dg.factorization.method(),
            r_r,
            r_l,
            p: dg.p,
            k: dg.k,
            residual_sq: dg.factorization.residual_sq(),
            objective_trace,
            shared_v,
            shared_u,
            members,
        });
    }
    let manifest = FactorizedManifest {
        format_version: FORMAT_VERSION,
        precision: dtype,
        groups: entries,
        report: report.clone(),
    };
    let mut report_json = serde_json::to_string_pretty(report).expect("report serializes");
    report_json.push('\n');
    write_file(&out_dir.join(REPORT_FILE), report_json.as_bytes())?;
    write_file(&manifest_path, manifest.to_json().as_bytes())?;
    Ok(manifest_path)
}

/// A reloaded artifact. Files whose digest disagrees with the manifest are
/// still loaded and listed in `digest_mismatches`.
#[derive(Debug, Clone)]
pub struct FactorizedArtifact {
    pub manifest: FactorizedManifest,
    pub factorizations: Vec<GroupFactorization>,
    pub digest_mismatches: Vec<String>,
}

impl FactorizedArtifact {
    /// Names of members that read a corrupted factor, in group order.
    pub fn corrupted_members(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.manifest.groups {
            for bad in &self.digest_mismatches {
                for m in g.users_of(bad) {
                    if !out.iter().any(|x| x == m) {
                        out.push(m.to_string());
                    }
                }
            }
        }
        out
    }
}

struct FactorReader<'a> {
    dir: &'a Path,
    dtype: Precision,
    mismatches: Vec<String>,
}

impl FactorReader<'_> {
    fn read(&mut self, f: &FactorFile, expected: Shape4) -> Result<Matrix> {
        let shape = Shape4::from_array(f.shape)?;
        if shape != expected {
            return Err(Error::Manifest(format!(
                "{} has shape {shape}, expected {expected}",
                f.file
            )));
        }
        let path = self.dir.join(&f.file);
        let bytes = read_bytes(&path)?;
        if sha256_hex(&bytes) != f.sha256 {
            self.mismatches.push(f.file.clone());
        }
        Ok(unfold(&tensor_from_bytes(&path, &bytes, shape, self.dtype)?))
    }

    fn read_opt(&mut self, f: &Option<FactorFile>, expected: Shape4, what: &str) -> Result<Matrix> {
        match f {
            Some(f) => self.read(f, expected),
            None => Err(Error::Manifest(format!("missing {what} factor"))),
        }
    }
}

/// Reloads and re-validates an artifact written by [`save_factorized`].
pub fn load_factorized(dir: &Path) -> Result<FactorizedArtifact> {
    let path = dir.join(FACTORIZED_FILE);
    let text = read_text(&path)?;
    let manifest: FactorizedManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let mut reader = FactorReader {
        dir,
        dtype: manifest.precision,
        mismatches: Vec::new(),
    };
    let mut factorizations = Vec::with_capacity(manifest.groups.len());
    for g in &manifest.groups {
        if g.members.is_empty() {
            return Err(Error::EmptyGroup { group_id: g.group_id });
        }
        let shapes: Vec<Shape4> = g
            .members
            .iter()
            .map(|m| Shape4::from_array(m.shape))
            .collect::<Result<_>>()?;
        let named: Vec<(&str, Shape4)> = g.members.iter().map(|m| m.name.as_str()).zip(shapes.iter().copied()).collect();
        check_shapes(g.group_id, &named, g.method)?;
        let first = shapes[0];
        let (r_r, r_l) = (g.r_r, g.r_l);

        let right = if r_r > 0 {
            let shared_v = reader.read_opt(&g.shared_v, horizontal_shape(first, r_r)?, "shared right")?;
            let member_us = g
                .members
                .iter()
                .zip(&shapes)
                .map(|(m, &s)| reader.read_opt(&m.u, vertical_shape(s, r_r)?, "member right"))
                .collect::<Result<_>>()?;
            Some(RightSharedFactorization {
                shared_v,
                member_us,
                rank_r: r_r,
                residual_sq: g.residual_sq,
            })
        } else {
            None
        };
        let left = if r_l > 0 {
            let shared_u = reader.read_opt(&g.shared_u, vertical_shape(first, r_l)?, "shared left")?;
            let member_vs = g
                .members
                .iter()
                .zip(&shapes)
                .map(|(m, &s)| reader.read_opt(&m.v, horizontal_shape(s, r_l)?, "member left"))
                .collect::<Result<_>>()?;
            Some(LeftSharedFactorization {
                shared_u,
                member_vs,
                rank_l: r_l,
                residual_sq: g.residual_sq,
            })
        } else {
            None
        };
        let f = match (g.method, right, left) {
            (Method::Rjsvd, Some(r), None) => GroupFactorization::Right(r),
            (Method::Ljsvd, None, Some(l)) => GroupFactorization::Left(l),
            (Method::Bijsvd, right, left) if r_r + r_l > 0 => {
                let right = right.unwrap_or_else(|| RightSharedFactorization {
                    shared_v: Matrix::zeros(0, first.unfolded_cols()),
                    member_us: shapes.iter().map(|s| Matrix::zeros(s.unfolded_rows(), 0)).collect(),
                    rank_r: 0,
                    residual_sq: g.residual_sq,
                });
                let left = left.unwrap_or_else(|| LeftSharedFactorization {
                    shared_u: Matrix::zeros(first.unfolded_rows(), 0),
                    member_vs: shapes.iter().map(|s| Matrix::zeros(0, s.unfolded_cols())).collect(),
                    rank_l: 0,
                    residual_sq: g.residual_sq,
                });
                GroupFactorization::Dual(DualFactorization {
                    right,
                    left,
                    iterations: g.k,
                    objective_trace: g.objective_trace.clone(),
                })
            }
            _ => {
                return Err(Error::Manifest(format!(
                    "group {}: ranks (r_r = {r_r}, r_l = {r_l}) do not suit {}",
                    g.group_id, g.method
                )))
            }
        };
        factorizations.push(f);
    }
    Ok(FactorizedArtifact {
        manifest,
        factorizations,
        digest_mismatches: reader.mismatches,
    })
}

/// Compression factor recomputed from stored factor sizes and the original
/// model's ungrouped tensors.
pub fn artifact_cf(model: &ModelManifest, artifact: &FactorizedManifest) -> Result<f64> {
    let grouped: HashMap<&str, ()> = artifact
        .groups
        .iter()
        .flat_map(|g| g.members.iter().map(|m| (m.name.as_str(), ())))
        .collect();
    for name in grouped.keys() {
        if model.tensor(name).is_none() {
            return Err(Error::UnknownLayer(name.to_string()));
        }
    }
    let all: u64 = model.tensors.iter().map(|t| t.shape.iter().product::<usize>() as u64).sum();
    let ungrouped: u64 = model
        .tensors
        .iter()
        .filter(|t| !grouped.contains_key(t.name.as_str()))
        .map(|t| t.shape.iter().product::<usize>() as u64)
        .sum();
    let before = all + model.other_params;
    let after = ungrouped + artifact.factor_params() + model.other_params;
    Ok(before as f64 / after as f64)
}

/// Default group iteration count, honoring a manifest override.
pub fn group_iterations(g: &GroupEntry, k: Option<usize>) -> usize {
    k.or(g.k).unwrap_or(DEFAULT_ITERATIONS)
}
