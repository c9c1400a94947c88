//! Procedural two-view scenes with exact ground truth, their on-disk
//! dataset format, and ingestion of user-supplied image folders.
//!
//! A scene is a textured plane seen by two pinhole cameras. View A is a
//! crop of the texture canvas; view B is rendered by mapping every B pixel
//! through the plane-induced homography into A and sampling bilinearly.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{BackboneError, ImageTensor, COARSE_STRIDE};
use crate::geometry::{
    fundamental_from_pose, gt_coarse_matches, CameraPose, FundamentalMatrix, GeometryError, GridShape, Homography,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_POSE_DRAWS: usize = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no valid camera pose after {0} draws")]
    DegeneratePose(usize),
    #[error("dataset must contain at least one pair")]
    EmptyDataset,
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),
    #[error("no readable images in {0}")]
    NoImages(PathBuf),
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("pair {0} is not in the manifest")]
    UnknownPair(usize),
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("malformed array {path}: {reason}")]
    MalformedArray { path: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] BackboneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Generation parameters. Angles in degrees, distances in plane-depth units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub octaves: usize,
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub base_cell_px: f64,
    pub max_rotation_deg: f64,
    /// Bound on the x/y components of the rotation axis before normalization.
    pub axis_jitter: f64,
    pub max_translation_xy: f64,
    pub max_translation_z: f64,
    pub min_baseline: f64,
    pub plane_depth: f64,
    pub max_plane_tilt: f64,
    pub focal_factor: f64,
    pub noise_sigma: f64,
    pub brightness: f64,
    pub contrast: (f64, f64),
    /// Smallest fraction of A cells with a ground-truth match.
    pub min_overlap: f64,
    /// Reserved for a second occluding plane; must stay off.
    pub occluder: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            octaves: 4,
            base_cell_px: 32.0,
            max_rotation_deg: 25.0,
            axis_jitter: 0.2,
            max_translation_xy: 0.4,
            max_translation_z: 0.3,
            min_baseline: 0.05,
            plane_depth: 4.0,
            max_plane_tilt: 0.2,
            focal_factor: 1.0,
            noise_sigma: 0.02,
            brightness: 0.2,
            contrast: (0.8, 1.25),
            min_overlap: 0.3,
            occluder: false,
        }
    }
}

impl SceneParams {
    /// Parameters whose pose is as close to the identity as the baseline
    /// constraint allows, with photometric jitter disabled.
    pub fn near_identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            max_rotation_deg: 0.0,
            max_translation_xy: 0.0,
            max_translation_z: 0.0,
            min_baseline: 1e-3,
            max_plane_tilt: 0.0,
            noise_sigma: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.into()));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(COARSE_STRIDE) || !self.width.is_multiple_of(COARSE_STRIDE) {
            return bad("image dimensions must be positive multiples of 8");
        }
        if self.octaves == 0 || !(self.base_cell_px >= 1.0) {
            return bad("texture needs at least one octave and a lattice spacing of at least 1 px");
        }
        if !(self.min_baseline > 0.0) || !(self.plane_depth > 0.0) || !(self.focal_factor > 0.0) {
            return bad("baseline, plane depth and focal factor must be positive");
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1) {
            return bad("contrast range must be positive and ordered");
        }
        if self.noise_sigma < 0.0 || self.brightness < 0.0 || self.max_rotation_deg < 0.0 {
            return bad("noise, brightness and rotation bounds must be nonnegative");
        }
        if self.occluder {
            return bad("occluding planes are not supported");
        }
        Ok(())
    }
}

/// One rendered view pair with exact geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub image_a: ImageTensor,
    pub image_b: ImageTensor,
    /// Maps A pixels to B pixels.
    pub homography: Homography,
    /// `x_Aᵀ F x_B = 0`.
    pub fundamental: FundamentalMatrix,
    pub gt_coarse: Vec<(usize, usize)>,
    pub pose_rel: CameraPose,
    pub seed: u64,
}

/// Multi-octave value noise on an `h × w` canvas, rescaled to `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, octaves: usize, base_cell: f64) -> Vec<f64> {
    let mut canvas = vec![0.0; h * w];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for o in 0..octaves {
        let cell = (base_cell / (1 << o) as f64).max(1.0);
        let amp = 0.5f64.powi(o as i32);
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / cell;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / cell;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let l = |gx: usize, gy: usize| lattice[gy * gw + gx];
                let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                let bottom = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                canvas[y * w + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    let (lo, hi) = canvas.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    canvas.iter().map(|v| (v - lo) / span).collect()
}

/// Bilinear sample with edge clamping.
fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * w + x0] * (1.0 - tx) + img[y0 * w + x1] * tx;
    let bottom = img[y1 * w + x0] * (1.0 - tx) + img[y1 * w + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

struct SampledGeometry {
    pose: CameraPose,
    homography: Homography,
    fundamental: FundamentalMatrix,
    gt: Vec<(usize, usize)>,
}

fn sample_geometry(rng: &mut ChaCha8Rng, p: &SceneParams) -> Result<SampledGeometry> {
    let (h, w) = (p.height, p.width);
    let k = CameraPose::pinhole(p.focal_factor * w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sym = |rng: &mut ChaCha8Rng, bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };

    let axis = Unit::new_normalize(Vector3::new(sym(rng, p.axis_jitter), sym(rng, p.axis_jitter), 1.0));
    let angle = sym(rng, p.max_rotation_deg).to_radians();
    let rotation = *Rotation3::from_axis_angle(&axis, angle).matrix();

    let mut t = Vector3::new(sym(rng, p.max_translation_xy), sym(rng, p.max_translation_xy), sym(rng, p.max_translation_z));
    if t.norm() < p.min_baseline {
        t = if t.norm() > 0.0 { t.normalize() * p.min_baseline } else { Vector3::new(p.min_baseline, 0.0, 0.0) };
    }
    let pose = CameraPose::new(rotation, t, k)?;
    let fundamental = fundamental_from_pose(&pose)?;

    // Plane n_Aᵀ X_A = d in camera A; in camera B it is n_Bᵀ X_B = d_B.
    let n_a = Vector3::new(sym(rng, p.max_plane_tilt), sym(rng, p.max_plane_tilt), 1.0).normalize();
    let d = p.plane_depth;
    let n_b = rotation.transpose() * n_a;
    let d_b = d - n_a.dot(&t);
    if d_b <= 1e-3 * d {
        return Err(GeometryError::DegeneratePose.into());
    }
    let k_inv = k.try_inverse().ok_or(GeometryError::SingularHomography)?;
    let h_ba = Homography::new(k * (rotation + t * n_b.transpose() / d_b) * k_inv)?;
    let homography = h_ba.inverse()?;
    let grid = GridShape::new(h / COARSE_STRIDE, w / COARSE_STRIDE);
    let gt = gt_coarse_matches(&homography, grid, grid, COARSE_STRIDE);
    if (gt.len() as f64) < p.min_overlap * grid.len() as f64 {
        return Err(GeometryError::DegeneratePose.into());
    }
    Ok(SampledGeometry { pose, homography, fundamental, gt })
}

/// Renders one scene pair; fully determined by `seed` and `params`.
pub fn generate_scene_pair(seed: u64, params: &SceneParams) -> Result<ScenePair> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);
    let margin = h.max(w) / 2;
    let (ch, cw) = (h + 2 * margin, w + 2 * margin);
    let canvas = value_noise(&mut rng, ch, cw, params.octaves, params.base_cell_px);

    let mut geometry = None;
    for _ in 0..MAX_POSE_DRAWS {
        match sample_geometry(&mut rng, params) {
            Ok(g) => {
                geometry = Some(g);
                break;
            }
            Err(SynthError::Geometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let g = geometry.ok_or(SynthError::DegeneratePose(MAX_POSE_DRAWS))?;

    let mut a = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            a[y * w + x] = canvas[(y + margin) * cw + x + margin] as f32;
        }
    }

    let h_ba = g.homography.inverse()?;
    let brightness = if params.brightness > 0.0 { rng.random_range(-params.brightness..=params.brightness) } else { 0.0 };
    let contrast = if params.contrast.1 > params.contrast.0 {
        rng.random_range(params.contrast.0..=params.contrast.1)
    } else {
        params.contrast.0
    };
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("nonnegative sigma");
    let mut b = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = match h_ba.warp_point([x as f64, y as f64]) {
                Ok([sx, sy]) => bilinear(&canvas, ch, cw, sx + margin as f64, sy + margin as f64),
                Err(_) => 0.0,
            };
            let mut v = contrast * (v - 0.5) + 0.5 + brightness;
            if params.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            b[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }

    Ok(ScenePair {
        image_a: ImageTensor::new(a, h, w)?,
        image_b: ImageTensor::new(b, h, w)?,
        homography: g.homography,
        fundamental: g.fundamental,
        gt_coarse: g.gt,
        pose_rel: g.pose,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Every tenth pair (ids 9, 19, …) is held out.
pub fn split_for(id: usize) -> Split {
    if id % 10 == 9 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDtype {
    Float64,
    Int32,
}

/// A flat little-endian binary array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub dtype: ArrayDtype,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: usize,
    pub image_a: String,
    pub image_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arrays: BTreeMap<String, ArrayEntry>,
    /// Dimensions before padding, for ingested photos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_a: Option<ImageDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_b: Option<ImageDims>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ImageDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SceneParams>,
    pub pairs: Vec<PairEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(SynthError::MissingFile(path));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn pair(&self, id: usize) -> Result<&PairEntry> {
        self.pairs.iter().find(|p| p.id == id).ok_or(SynthError::UnknownPair(id))
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.split == Some(split)).map(|p| p.id).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_array(dir: &Path, rel: &str, bytes: Vec<u8>, shape: Vec<usize>, dtype: ArrayDtype) -> Result<ArrayEntry> {
    let sha256 = sha256_hex(&bytes);
    fs::write(dir.join(rel), bytes)?;
    Ok(ArrayEntry { path: rel.to_string(), shape, dtype, sha256 })
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn matrix_values(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect()
}

fn matrix_from(values: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(values)
}

/// Reads an array, verifying its checksum and byte length.
pub fn read_array_bytes(root: &Path, entry: &ArrayEntry) -> Result<Vec<u8>> {
    let path = root.join(&entry.path);
    if !path.exists() {
        return Err(SynthError::MissingFile(path));
    }
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(SynthError::ChecksumMismatch(path));
    }
    let width = match entry.dtype {
        ArrayDtype::Float64 => 8,
        ArrayDtype::Int32 => 4,
    };
    let expected = entry.shape.iter().product::<usize>() * width;
    if bytes.len() != expected {
        return Err(SynthError::MalformedArray { path, reason: format!("{} bytes, expected {expected}", bytes.len()) });
    }
    Ok(bytes)
}

fn read_f64s(root: &Path, entry: &ArrayEntry) -> Result<Vec<f64>> {
    if entry.dtype != ArrayDtype::Float64 {
        return Err(SynthError::MalformedArray { path: root.join(&entry.path), reason: "expected float64".into() });
    }
    let bytes = read_array_bytes(root, entry)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_i32s(root: &Path, entry: &ArrayEntry) -> Result<Vec<i32>> {
    if entry.dtype != ArrayDtype::Int32 {
        return Err(SynthError::MalformedArray { path: root.join(&entry.path), reason: "expected int32".into() });
    }
    let bytes = read_array_bytes(root, entry)?;
    Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| SynthError::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(())
}

/// Loads any supported image as grayscale in `[0, 1]` with its original
/// dimensions, without padding.
pub fn read_gray(path: &Path) -> Result<(Vec<f32>, ImageDims)> {
    if !path.exists() {
        return Err(SynthError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| SynthError::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?
        .to_luma8();
    let dims = ImageDims { height: img.height() as usize, width: img.width() as usize };
    Ok((img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(), dims))
}

/// Next multiple of 8 at or above `n` (and at least 8).
pub fn padded_len(n: usize) -> usize {
    n.max(1).div_ceil(COARSE_STRIDE) * COARSE_STRIDE
}

/// Loads an image and pads it on the right and bottom, replicating the last
/// column and row, up to multiples of 8. Pixel coordinates are unchanged.
pub fn load_image_padded(path: &Path) -> Result<(ImageTensor, ImageDims)> {
    let (pixels, dims) = read_gray(path)?;
    let (ph, pw) = (padded_len(dims.height), padded_len(dims.width));
    let mut out = vec![0f32; ph * pw];
    for y in 0..ph {
        let sy = y.min(dims.height - 1);
        for x in 0..pw {
            out[y * pw + x] = pixels[sy * dims.width + x.min(dims.width - 1)];
        }
    }
    Ok((ImageTensor::new(out, ph, pw)?, dims))
}

/// Generates `n_pairs` scenes (pair `i` uses seed `seed + i`) and writes
/// images, arrays and the manifest under `out_dir`.
pub fn build_dataset(n_pairs: usize, out_dir: &Path, params: &SceneParams, seed: u64) -> Result<DatasetManifest> {
    if n_pairs == 0 {
        return Err(SynthError::EmptyDataset);
    }
    params.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for id in 0..n_pairs {
        let pair_seed = seed.wrapping_add(id as u64);
        let scene = generate_scene_pair(pair_seed, params)?;
        pairs.push(save_pair(out_dir, id, &scene)?);
        log::debug!("wrote pair {id} with {} ground-truth matches", scene.gt_coarse.len());
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dims: Some(ImageDims { height: params.height, width: params.width }),
        seed: Some(seed),
        params: Some(params.clone()),
        pairs,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Writes one scene under `root/pairs/<id>/` and returns its manifest entry.
pub fn save_pair(root: &Path, id: usize, scene: &ScenePair) -> Result<PairEntry> {
    let rel = format!("pairs/{id:05}");
    fs::create_dir_all(root.join(&rel))?;
    let image_a = format!("{rel}/a.pgm");
    let image_b = format!("{rel}/b.pgm");
    write_pgm(&root.join(&image_a), &scene.image_a)?;
    write_pgm(&root.join(&image_b), &scene.image_b)?;

    let mut arrays = BTreeMap::new();
    let h = matrix_values(scene.homography.matrix());
    arrays.insert("homography".into(), write_array(root, &format!("{rel}/homography.f64"), f64_bytes(&h), vec![3, 3], ArrayDtype::Float64)?);
    let f = matrix_values(scene.fundamental.matrix());
    arrays.insert("fundamental".into(), write_array(root, &format!("{rel}/fundamental.f64"), f64_bytes(&f), vec![3, 3], ArrayDtype::Float64)?);
    let mut pose = matrix_values(&scene.pose_rel.rotation);
    pose.extend(scene.pose_rel.translation.iter());
    pose.extend(matrix_values(&scene.pose_rel.intrinsics));
    arrays.insert("pose_rel".into(), write_array(root, &format!("{rel}/pose_rel.f64"), f64_bytes(&pose), vec![21], ArrayDtype::Float64)?);
    let gt: Vec<u8> = scene
        .gt_coarse
        .iter()
        .flat_map(|&(i, j)| [i as i32, j as i32])
        .flat_map(|v| v.to_le_bytes())
        .collect();
    arrays.insert(
        "gt_coarse".into(),
        write_array(root, &format!("{rel}/gt_coarse.i32"), gt, vec![scene.gt_coarse.len(), 2], ArrayDtype::Int32)?,
    );
    Ok(PairEntry {
        id,
        image_a,
        image_b,
        seed: Some(scene.seed),
        split: Some(split_for(id)),
        arrays,
        original_a: None,
        original_b: None,
    })
}

fn array<'a>(root: &Path, entry: &'a PairEntry, name: &str) -> Result<&'a ArrayEntry> {
    entry.arrays.get(name).ok_or_else(|| SynthError::MissingFile(root.join(format!("pairs/{:05}/{name}", entry.id))))
}

/// Loads a generated pair, verifying array checksums.
pub fn load_pair(manifest: &DatasetManifest, root: &Path, id: usize) -> Result<ScenePair> {
    let entry = manifest.pair(id)?;
    let (image_a, _) = load_image_padded(&root.join(&entry.image_a))?;
    let (image_b, _) = load_image_padded(&root.join(&entry.image_b))?;
    let h = read_f64s(root, array(root, entry, "homography")?)?;
    let f = read_f64s(root, array(root, entry, "fundamental")?)?;
    let pose = read_f64s(root, array(root, entry, "pose_rel")?)?;
    let gt = read_i32s(root, array(root, entry, "gt_coarse")?)?;
    let malformed = |name: &str| SynthError::MalformedArray { path: root.join(&entry.image_a), reason: format!("bad {name}") };
    if h.len() != 9 || f.len() != 9 || pose.len() != 21 || gt.len() % 2 != 0 || gt.iter().any(|&v| v < 0) {
        return Err(malformed("array length"));
    }
    let pose_rel = CameraPose::new(
        matrix_from(&pose[0..9]),
        Vector3::new(pose[9], pose[10], pose[11]),
        matrix_from(&pose[12..21]),
    )?;
    Ok(ScenePair {
        image_a,
        image_b,
        homography: Homography::new(matrix_from(&h))?,
        fundamental: FundamentalMatrix::from_raw(matrix_from(&f)),
        gt_coarse: gt.chunks_exact(2).map(|c| (c[0] as usize, c[1] as usize)).collect(),
        pose_rel,
        seed: entry.seed.unwrap_or(0),
    })
}

/// Loads every pair of a split.
pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<ScenePair>> {
    manifest.ids(split).into_iter().map(|id| load_pair(manifest, root, id)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    Sequential,
    AllPairs,
}

impl std::str::FromStr for Pairing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequential" => Ok(Pairing::Sequential),
            "all-pairs" => Ok(Pairing::AllPairs),
            other => Err(format!("unknown pairing '{other}' (expected sequential or all-pairs)")),
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 6] = ["pgm", "png", "jpg", "jpeg", "ppm", "pnm"];

/// Builds an image-only manifest from a folder of photos. Paths in the
/// manifest are absolute; images are padded on load.
pub fn ingest_image_folder(dir: &Path, pairing: Pairing) -> Result<DatasetManifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SynthError::NoImages(dir.to_path_buf()));
    }
    let mut dims = Vec::with_capacity(files.len());
    for f in &files {
        let d = image::image_dimensions(f)
            .map_err(|e| SynthError::UnreadableImage { path: f.clone(), reason: e.to_string() })?;
        dims.push(ImageDims { height: d.1 as usize, width: d.0 as usize });
    }
    let n = files.len();
    let index_pairs: Vec<(usize, usize)> = match pairing {
        Pairing::Sequential => (1..n).map(|k| (k - 1, k)).collect(),
        Pairing::AllPairs => (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect(),
    };
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).to_string_lossy().into_owned();
    let pairs = index_pairs
        .into_iter()
        .enumerate()
        .map(|(id, (a, b))| PairEntry {
            id,
            image_a: abs(&files[a]),
            image_b: abs(&files[b]),
            seed: None,
            split: None,
            arrays: BTreeMap::new(),
            original_a: Some(dims[a]),
            original_b: Some(dims[b]),
        })
        .collect();
    Ok(DatasetManifest { version: MANIFEST_VERSION, dims: None, seed: None, params: None, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneParams {
        SceneParams { height: 64, width: 64, ..SceneParams::default() }
    }

    #[test]
    fn same_seed_same_pair() {
        let a = generate_scene_pair(3, &small()).unwrap();
        let b = generate_scene_pair(3, &small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_identity_pair_is_diagonal() {
        let pair = generate_scene_pair(1, &SceneParams::near_identity(64, 64)).unwrap();
        assert_eq!(pair.gt_coarse.len(), 64);
        assert!(pair.gt_coarse.iter().all(|(i, j)| i == j));
        let max_diff = pair
            .image_a
            .pixels
            .iter()
            .zip(&pair.image_b.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 0.01, "max diff {max_diff}");
    }

    #[test]
    fn gt_pixels_satisfy_epipolar_constraint() {
        for seed in 0..5 {
            let pair = generate_scene_pair(seed, &small()).unwrap();
            let grid = GridShape::new(8, 8);
            for &(i, _) in &pair.gt_coarse {
                let x = grid.anchor(i, COARSE_STRIDE);
                let y = pair.homography.warp_point(x).unwrap();
                assert!(pair.fundamental.residual(x, y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn split_arithmetic() {
        let val = (0..10).filter(|&i| split_for(i) == Split::Val).count();
        assert_eq!(val, 1);
    }

    #[test]
    fn padding_rule() {
        assert_eq!(padded_len(70), 72);
        assert_eq!(padded_len(64), 64);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = SceneParams { height: 60, ..SceneParams::default() };
        assert!(matches!(generate_scene_pair(0, &p), Err(SynthError::InvalidParams(_))));
    }
}
