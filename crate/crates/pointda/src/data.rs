//! Synthetic dot-crowd scenes and dataset IO.
//!
//! A scene is a square RGB image with N blobs at recorded center positions;
//! source and target domains differ along documented shift axes (background,
//! blob size, illumination). Generation is deterministic: the same params
//! and seed produce byte-identical images and annotations.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/
//!   manifest.json
//!   source/{images/*.png, annotations/*.json}
//!   target/{images/*.png, eval_labels/*.json}
//! ```
//!
//! Target annotations live only under `eval_labels/` and are exposed solely
//! through the `TargetEval` split, so the trainer cannot consume them by
//! accident. Annotation files are `{"points": [[x, y], ...]}` in pixel
//! units, origin top-left.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointSet;

pub const MANIFEST_VERSION: &str = "1";

/// Minimum center-to-center separation between blobs, in pixels.
const MIN_SEPARATION: f64 = 2.0;

/// Peak intensity a compact blob adds on top of the background.
const BLOB_AMPLITUDE: f64 = 0.65;

/// Radius at or below which a blob keeps its full amplitude.
const BLOB_REFERENCE_RADIUS: f64 = 2.5;

/// Wider blobs spread their light over more area, so their peak dims.
fn blob_amplitude(radius: f64) -> f64 {
    BLOB_AMPLITUDE * (BLOB_REFERENCE_RADIUS / radius).min(1.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Flat,
    Gradient,
    NoiseTexture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobProfile {
    Gaussian,
    Ring,
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub image_size: usize,
    pub count_range: (usize, usize),
    pub dot_radius_range: (f64, f64),
    pub background: Background,
    /// Global intensity gain applied after compositing.
    pub illumination: f64,
    pub blob_profile: BlobProfile,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            count_range: (5, 15),
            dot_radius_range: (2.0, 3.0),
            background: Background::Flat,
            illumination: 1.0,
            blob_profile: BlobProfile::Gaussian,
            seed: 1,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::InvalidArgument(format!(
                "count range ({}, {}) has min > max",
                self.count_range.0, self.count_range.1
            )));
        }
        if self.dot_radius_range.0 < 1.0 || self.dot_radius_range.0 > self.dot_radius_range.1 {
            return Err(Error::InvalidArgument(format!(
                "radius range ({}, {}) must be ascending with min >= 1",
                self.dot_radius_range.0, self.dot_radius_range.1
            )));
        }
        if !self.illumination.is_finite() || self.illumination <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "illumination gain must be positive, got {}",
                self.illumination
            )));
        }
        let margin = self.dot_radius_range.1.ceil() + 1.0;
        if (self.image_size as f64) <= 2.0 * margin {
            return Err(Error::InvalidArgument(format!(
                "image size {} too small for blob radius up to {}",
                self.image_size, self.dot_radius_range.1
            )));
        }
        Ok(())
    }
}

/// A labeled source domain and an unlabeled target domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainPairSpec {
    pub source: SceneParams,
    pub target: SceneParams,
}

impl Default for DomainPairSpec {
    /// Default shift: flat vs noise-texture background, radius 2-3 vs 4-6,
    /// gain 1.0 vs 0.6.
    fn default() -> Self {
        Self {
            source: SceneParams::default(),
            target: SceneParams {
                dot_radius_range: (4.0, 6.0),
                background: Background::NoiseTexture,
                illumination: 0.6,
                seed: 2,
                ..SceneParams::default()
            },
        }
    }
}

impl DomainPairSpec {
    /// Names of the parameters that differ between the domains. The seed is
    /// excluded: different draws alone are not a distribution shift.
    pub fn shift_axes(&self) -> Vec<String> {
        let mut axes = Vec::new();
        let (s, t) = (&self.source, &self.target);
        if s.image_size != t.image_size {
            axes.push("image_size".into());
        }
        if s.count_range != t.count_range {
            axes.push("count_range".into());
        }
        if s.dot_radius_range != t.dot_radius_range {
            axes.push("dot_radius_range".into());
        }
        if s.background != t.background {
            axes.push("background".into());
        }
        if s.illumination != t.illumination {
            axes.push("illumination".into());
        }
        if s.blob_profile != t.blob_profile {
            axes.push("blob_profile".into());
        }
        axes
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.shift_axes().is_empty() {
            return Err(Error::InvalidArgument(
                "source and target specs are identical; no domain shift to adapt across".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One image, optionally with its point annotations.
///
/// Image values are floats in `[0, 1]`, channel-first `(3, H, W)`. Samples
/// from the adaptation split carry no points.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub image: Array3<f64>,
    pub points: Option<PointSet>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }
}

/// A rendered scene before it is written to disk.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub points: PointSet,
}

impl Scene {
    pub fn into_sample(self, id: String, domain: Domain, labeled: bool) -> Sample {
        let image = rgb_to_array(&self.image);
        Sample {
            id,
            domain,
            image,
            points: labeled.then_some(self.points),
        }
    }
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

/// Renders one scene. Draw order from the rng is fixed: blob count, then
/// center candidates, then per-blob radii, then background noise (if any).
pub fn generate_scene(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<Scene> {
    params.validate()?;
    let size = params.image_size;
    let n = rng.gen_range(params.count_range.0..=params.count_range.1);
    let margin = params.dot_radius_range.1.ceil() + 1.0;
    let lo = margin;
    let hi = size as f64 - margin;

    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(n);
    let max_attempts = 1000 * n.max(1);
    let mut attempts = 0;
    while centers.len() < n {
        if attempts >= max_attempts {
            return Err(Error::PlacementFailure {
                requested: n,
                attempts,
            });
        }
        attempts += 1;
        let x = rng.gen_range(lo..hi);
        let y = rng.gen_range(lo..hi);
        let ok = centers
            .iter()
            .all(|c| (c[0] - x).hypot(c[1] - y) >= MIN_SEPARATION);
        if ok {
            centers.push([x, y]);
        }
    }
    let radii: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(params.dot_radius_range.0..=params.dot_radius_range.1))
        .collect();

    let mut luma = render_background(params, size, rng);
    for (center, &radius) in centers.iter().zip(&radii) {
        draw_blob(&mut luma, size, *center, radius, params.blob_profile);
    }

    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let v = (luma[y * size + x] * params.illumination).clamp(0.0, 1.0);
            let byte = (v * 255.0).round() as u8;
            image.put_pixel(x as u32, y as u32, image::Rgb([byte, byte, byte]));
        }
    }
    Ok(Scene {
        image,
        points: PointSet::new(centers)?,
    })
}

fn render_background(params: &SceneParams, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match params.background {
        Background::Flat => vec![0.30; size * size],
        Background::Gradient => {
            let mut buf = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    buf[y * size + x] = 0.20 + 0.30 * x as f64 / (size - 1).max(1) as f64;
                }
            }
            buf
        }
        Background::NoiseTexture => {
            // Two octaves of value noise plus compact bright speckles; the
            // speckles are unannotated clutter that resembles small dots.
            let mut buf = vec![0.0; size * size];
            add_value_noise(&mut buf, size, 8, 0.12, 0.48, rng);
            add_value_noise(&mut buf, size, 4, -0.10, 0.14, rng);
            let n_speckles = rng.gen_range(size / 8..=size / 4);
            for _ in 0..n_speckles {
                let x = rng.gen_range(2.0..size as f64 - 2.0);
                let y = rng.gen_range(2.0..size as f64 - 2.0);
                let r = rng.gen_range(1.0..1.6);
                draw_blob(&mut buf, size, [x, y], r, BlobProfile::Gaussian);
            }
            buf
        }
    }
}

/// Bilinearly upsampled random lattice added onto `buf`.
fn add_value_noise(
    buf: &mut [f64],
    size: usize,
    cell: usize,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) {
    let gw = size / cell + 2;
    let grid: Vec<f64> = (0..gw * gw).map(|_| rng.gen_range(lo..hi)).collect();
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let gx = fx.floor() as usize;
            let gy = fy.floor() as usize;
            let tx = fx - gx as f64;
            let ty = fy - gy as f64;
            let v00 = grid[gy * gw + gx];
            let v01 = grid[gy * gw + gx + 1];
            let v10 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            buf[y * size + x] += v00 * (1.0 - tx) * (1.0 - ty)
                + v01 * tx * (1.0 - ty)
                + v10 * (1.0 - tx) * ty
                + v11 * tx * ty;
        }
    }
}

fn draw_blob(luma: &mut [f64], size: usize, center: [f64; 2], radius: f64, profile: BlobProfile) {
    let support = match profile {
        BlobProfile::Gaussian => 1.6 * radius,
        BlobProfile::Ring => 2.0 * radius,
    };
    let x0 = (center[0] - support).floor().max(0.0) as usize;
    let x1 = (center[0] + support).ceil().min(size as f64 - 1.0) as usize;
    let y0 = (center[1] - support).floor().max(0.0) as usize;
    let y1 = (center[1] + support).ceil().min(size as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let r = (x as f64 - center[0]).hypot(y as f64 - center[1]);
            let amp = blob_amplitude(radius);
            let value = match profile {
                BlobProfile::Gaussian => {
                    let sigma = radius / 2.0;
                    amp * (-r * r / (2.0 * sigma * sigma)).exp()
                }
                BlobProfile::Ring => {
                    let sigma = radius / 3.0;
                    let d = r - radius;
                    amp * (-d * d / (2.0 * sigma * sigma)).exp()
                }
            };
            luma[y * size + x] += value;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotation {
    points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub spec: DomainPairSpec,
    pub shift_axes: Vec<String>,
    pub n_source: usize,
    pub n_target: usize,
}

/// Per-image rng stream: decorrelates scenes while keeping each one
/// reproducible in isolation.
fn scene_rng(domain_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(domain_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_scene(scene: &Scene, image_path: &Path, annotation_path: &Path) -> Result<()> {
    scene
        .image
        .save(image_path)
        .map_err(|e| Error::io(image_path, std::io::Error::other(e)))?;
    write_json(
        annotation_path,
        &Annotation {
            points: scene.points.points.clone(),
        },
    )
}

/// Writes a full source/target dataset pair under `out_dir`.
pub fn generate_domain_pair(
    spec: &DomainPairSpec,
    n_source: usize,
    n_target: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    for sub in [
        "source/images",
        "source/annotations",
        "target/images",
        "target/eval_labels",
    ] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for i in 0..n_source {
        let mut rng = scene_rng(spec.source.seed, i as u64);
        let scene = generate_scene(&spec.source, &mut rng)?;
        let id = format!("src_{i:04}");
        save_scene(
            &scene,
            &out_dir.join(format!("source/images/{id}.png")),
            &out_dir.join(format!("source/annotations/{id}.json")),
        )?;
    }
    for i in 0..n_target {
        let mut rng = scene_rng(spec.target.seed, i as u64);
        let scene = generate_scene(&spec.target, &mut rng)?;
        let id = format!("tgt_{i:04}");
        save_scene(
            &scene,
            &out_dir.join(format!("target/images/{id}.png")),
            &out_dir.join(format!("target/eval_labels/{id}.json")),
        )?;
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION.into(),
        spec: spec.clone(),
        shift_axes: spec.shift_axes(),
        n_source,
        n_target,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Which view of a dataset pair to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Source images with annotations; feeds the supervised losses.
    SourceTrain,
    /// Source images with annotations; used by the evaluator.
    SourceEval,
    /// Target images with no labels; feeds adaptation.
    TargetAdapt,
    /// Target images with held-out labels; only the evaluator loads this.
    TargetEval,
}

impl Split {
    pub fn domain(&self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceEval => Domain::Source,
            Split::TargetAdapt | Split::TargetEval => Domain::Target,
        }
    }

    pub fn labeled(&self) -> bool {
        !matches!(self, Split::TargetAdapt)
    }

    fn annotation_dir(&self) -> Option<&'static str> {
        match self {
            Split::SourceTrain | Split::SourceEval => Some("annotations"),
            Split::TargetAdapt => None,
            Split::TargetEval => Some("eval_labels"),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Split::SourceTrain => "source-train",
            Split::SourceEval => "source-eval",
            Split::TargetAdapt => "target-adapt",
            Split::TargetEval => "target-eval",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone)]
struct DatasetEntry {
    id: String,
    image_path: PathBuf,
    annotation_path: Option<PathBuf>,
}

/// A lazily-loading view over one split of a dataset pair.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: Split,
    entries: Vec<DatasetEntry>,
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let domain_dir = root.join(split.domain().to_string());
    let images_dir = domain_dir.join("images");
    let mut names: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| {
            let name = entry.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".png").map(str::to_owned)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::DatasetIntegrity(format!(
            "no .png images under {}",
            images_dir.display()
        )));
    }
    let mut entries = Vec::with_capacity(names.len());
    for id in names {
        let image_path = images_dir.join(format!("{id}.png"));
        let annotation_path = match split.annotation_dir() {
            Some(dir) => {
                let path = domain_dir.join(dir).join(format!("{id}.json"));
                if !path.exists() {
                    return Err(Error::DatasetIntegrity(format!(
                        "missing annotation {} for image {}",
                        path.display(),
                        image_path.display()
                    )));
                }
                Some(path)
            }
            None => None,
        };
        entries.push(DatasetEntry {
            id,
            image_path,
            annotation_path,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        entries,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sample index {index} out of range for {} entries",
                self.entries.len()
            ))
        })?;
        let img = image::open(&entry.image_path)
            .map_err(|e| Error::io(&entry.image_path, std::io::Error::other(e)))?
            .to_rgb8();
        let image = rgb_to_array(&img);
        let (_, h, w) = image.dim();
        let points = match &entry.annotation_path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let annotation: Annotation =
                    serde_json::from_str(&text).map_err(|e| Error::Parse {
                        path: path.clone(),
                        message: format!("line {}, column {}: {e}", e.line(), e.column()),
                    })?;
                for p in &annotation.points {
                    if !(0.0..w as f64).contains(&p[0]) || !(0.0..h as f64).contains(&p[1]) {
                        return Err(Error::DatasetIntegrity(format!(
                            "point ({}, {}) outside {w}x{h} image in {}",
                            p[0],
                            p[1],
                            path.display()
                        )));
                    }
                }
                Some(PointSet::new(annotation.points)?)
            }
            None => None,
        };
        Ok(Sample {
            id: entry.id.clone(),
            domain: self.split.domain(),
            image,
            points,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Random crop and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub crop_size: usize,
    pub flip_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            flip_prob: 0.5,
        }
    }
}

/// Random crop to `crop_size` and horizontal flip with probability
/// `flip_prob`.
///
/// A point survives the crop iff it lies in the half-open window
/// `[x0, x0 + cw) x [y0, y0 + ch)`. The flip convention is
/// `x' = (w - 1) - x`, mirroring pixel columns exactly; a fractional point
/// whose reflection leaves the window is dropped.
pub fn augment(sample: &Sample, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (_, h, w) = sample.image.dim();
    let cw = cfg.crop_size;
    let ch = cfg.crop_size;
    if cw > w || ch > h {
        return Err(Error::InvalidConfig(vec![format!(
            "augment.crop_size {cw} larger than {w}x{h} image {}",
            sample.id
        )]));
    }
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    let flip = rng.gen::<f64>() < cfg.flip_prob;

    let mut image = Array3::zeros((3, ch, cw));
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                let sx = if flip { x0 + (cw - 1) - x } else { x0 + x };
                image[[c, y, x]] = sample.image[[c, y0 + y, sx]];
            }
        }
    }

    let points = sample.points.as_ref().map(|set| {
        let transformed: Vec<[f64; 2]> = set
            .points
            .iter()
            .filter_map(|p| {
                let x = p[0] - x0 as f64;
                let y = p[1] - y0 as f64;
                if !(0.0..cw as f64).contains(&x) || !(0.0..ch as f64).contains(&y) {
                    return None;
                }
                let x = if flip { (cw - 1) as f64 - x } else { x };
                (0.0..cw as f64).contains(&x).then_some([x, y])
            })
            .collect();
        PointSet::new(transformed).expect("finite coordinates are preserved")
    });

    Ok(Sample {
        id: sample.id.clone(),
        domain: sample.domain,
        image,
        points,
    })
}
