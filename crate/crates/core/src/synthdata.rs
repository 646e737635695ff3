//! Procedural paired-modality person datasets, manifests, and
//! identity-balanced cross-modal batch sampling.
//!
//! Each synthetic identity is a figure made of vertically stacked attribute
//! bands. Visible renderings keep the band colors; infrared renderings
//! collapse them through a fixed nonlinear luminance mix with per-image
//! gamma jitter and additive noise, so only brightness and texture survive.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Visible,
    #[serde(rename = "I")]
    Infrared,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "V",
            Modality::Infrared => "I",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_body_parts: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_identities: 40,
            images_per_identity_per_modality: 20,
            image_height: 36,
            image_width: 18,
            num_body_parts: 4,
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Spec("num_identities must be at least 2".into()));
        }
        if self.images_per_identity_per_modality < 1 {
            return Err(Error::Spec("images_per_identity_per_modality must be at least 1".into()));
        }
        if self.num_body_parts < 2 {
            return Err(Error::Spec("num_body_parts must be at least 2".into()));
        }
        if self.image_height < 4 * self.num_body_parts || self.image_width < 4 {
            return Err(Error::Spec(format!(
                "image {}x{} too small for {} body parts",
                self.image_height, self.image_width, self.num_body_parts
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Spec("noise_level must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: u32,
    pub modality: Modality,
    pub camera: u32,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_to_string(entries)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Debug, Clone, Copy, PartialEq)]
enum Texture {
    Solid,
    HStripes { period: usize },
    VStripes { period: usize },
    Checker { period: usize },
}

impl Texture {
    fn modulation(self, r: usize, c: usize) -> f64 {
        let on = match self {
            Texture::Solid => return 0.0,
            Texture::HStripes { period } => (r / period) % 2 == 0,
            Texture::VStripes { period } => (c / period) % 2 == 0,
            Texture::Checker { period } => ((r / period) + (c / period)) % 2 == 0,
        };
        if on {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone)]
struct Band {
    color: [f64; 3],
    texture: Texture,
    contrast: f64,
    weight: f64,
}

#[derive(Debug, Clone)]
struct Person {
    bands: Vec<Band>,
    body_frac: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn person_for(spec: &DatasetSpec, identity: u32) -> Person {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + identity as u64);
    let bands = (0..spec.num_body_parts)
        .map(|_| {
            let color = hsv_to_rgb(
                rng.random::<f64>(),
                rng.random_range(0.35..1.0),
                rng.random_range(0.25..1.0),
            );
            let period = rng.random_range(1..=3);
            let texture = match rng.random_range(0..4) {
                0 => Texture::Solid,
                1 => Texture::HStripes { period },
                2 => Texture::VStripes { period },
                _ => Texture::Checker { period },
            };
            Band {
                color,
                texture,
                contrast: rng.random_range(0.15..0.35),
                weight: rng.random_range(0.8..1.25),
            }
        })
        .collect();
    Person {
        bands,
        body_frac: rng.random_range(0.5..0.75),
    }
}

/// Fixed nonlinear channel collapse used for infrared renderings.
fn infrared_collapse(rgb: [f64; 3], gamma: f64) -> f64 {
    let mix = 0.15 * rgb[0] + 0.6 * rgb[1] + 0.25 * rgb[2];
    mix.clamp(0.0, 1.0).powf(gamma)
}

/// Renders one image. Returns the image and the per-pixel band label
/// (`None` for background), used as ground truth for part-discovery checks.
fn render(
    spec: &DatasetSpec,
    person: &Person,
    modality: Modality,
    camera: u32,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Vec<Option<u8>>) {
    let (h, w) = (spec.image_height, spec.image_width);
    let scale = rng.random_range(0.9..1.1);
    let dy = rng.random_range(-2i64..=2);
    let dx = rng.random_range(-2i64..=2);
    let brightness = rng.random_range(0.85..1.15);
    let gamma = rng.random_range(0.7..1.4);
    let bg_base: [f64; 3] = {
        let cam_tint = 0.05 * camera as f64;
        [
            rng.random_range(0.05..0.35) + cam_tint,
            rng.random_range(0.05..0.35),
            rng.random_range(0.05..0.35) + cam_tint,
        ]
    };

    let fig_h = ((h as f64) * 0.9 * scale).round().min(h as f64) as i64;
    let fig_w = ((w as f64) * person.body_frac * scale).round().max(2.0) as i64;
    let top = (h as i64 - fig_h) / 2 + dy;
    let left = (w as i64 - fig_w) / 2 + dx;

    let total: f64 = person.bands.iter().map(|b| b.weight).sum();
    let mut cuts = Vec::with_capacity(person.bands.len());
    let mut acc = 0.0;
    for b in &person.bands {
        acc += b.weight / total;
        cuts.push(acc);
    }

    let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
    let mut labels = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as i64, c as i64);
            let mut rgb = bg_base;
            let mut label = None;
            if ri >= top && ri < top + fig_h && ci >= left && ci < left + fig_w {
                let rel = (ri - top) as f64 / fig_h as f64;
                let band_idx = cuts.iter().position(|&cut| rel < cut).unwrap_or(cuts.len() - 1);
                // The top band is narrower, head-like.
                let inside = if band_idx == 0 {
                    let inset = fig_w / 5;
                    ci >= left + inset && ci < left + fig_w - inset
                } else {
                    true
                };
                if inside {
                    let band = &person.bands[band_idx];
                    let m = band.texture.modulation((ri - top) as usize, (ci - left) as usize);
                    let f = brightness * (1.0 + band.contrast * m);
                    rgb = [band.color[0] * f, band.color[1] * f, band.color[2] * f];
                    label = Some(band_idx as u8);
                }
            }
            let px = match modality {
                Modality::Visible => {
                    let s = spec.noise_level * 0.25;
                    let mut out = [0u8; 3];
                    for (o, v) in out.iter_mut().zip(rgb) {
                        let n = if s > 0.0 { rng.random_range(-s..s) * 3f64.sqrt() } else { 0.0 };
                        *o = to_u8(v + n);
                    }
                    out
                }
                Modality::Infrared => {
                    let s = spec.noise_level;
                    let n = if s > 0.0 { rng.random_range(-s..s) * 3f64.sqrt() } else { 0.0 };
                    let g = to_u8(infrared_collapse(rgb, gamma) + n);
                    [g, g, g]
                }
            };
            img.put_pixel(c as u32, r as u32, Rgb(px));
            labels[r * w + c] = label;
        }
    }
    (img, labels)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One rendered image with its generator ground truth.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub entry: ManifestEntry,
    pub image: RgbImage,
    /// Band index per pixel (row-major), `None` for background.
    pub band_labels: Vec<Option<u8>>,
}

/// Renders a full dataset in memory, in manifest order.
pub fn render_dataset(spec: &DatasetSpec) -> Result<Vec<RenderedImage>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_identities * spec.images_per_identity_per_modality * 2);
    for identity in 0..spec.num_identities as u32 {
        let person = person_for(spec, identity);
        for modality in [Modality::Visible, Modality::Infrared] {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 << 32 | (identity as u64) << 1 | (modality == Modality::Infrared) as u64);
            for n in 0..spec.images_per_identity_per_modality {
                let camera = match modality {
                    Modality::Visible => (n % 2) as u32,
                    Modality::Infrared => 2 + (n % 2) as u32,
                };
                let (image, band_labels) = render(spec, &person, modality, camera, &mut rng);
                let path = format!("images/{}/{:04}_{:03}.png", modality.tag(), identity, n);
                out.push(RenderedImage {
                    entry: ManifestEntry {
                        path,
                        identity,
                        modality,
                        camera,
                    },
                    image,
                    band_labels,
                });
            }
        }
    }
    Ok(out)
}

/// Renders the dataset and writes images plus `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let rendered = render_dataset(spec)?;
    for m in [Modality::Visible, Modality::Infrared] {
        let dir = out_dir.join("images").join(m.tag());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for r in &rendered {
        let path = out_dir.join(&r.entry.path);
        r.image.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    let entries: Vec<ManifestEntry> = rendered.into_iter().map(|r| r.entry).collect();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &entries)?;
    Ok(DatasetManifest {
        manifest_path,
        entries,
    })
}

/// Builds manifest entries for a SYSU-MM01-style tree
/// (`cam{1..6}/{person id}/{image}`; cameras 3 and 6 are infrared).
/// Person ids are relabeled to `0..n` in ascending order.
pub fn sysu_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let mut raw = Vec::new();
    for cam in 1..=6u32 {
        let cam_dir = root.join(format!("cam{cam}"));
        if !cam_dir.is_dir() {
            continue;
        }
        let modality = if cam == 3 || cam == 6 {
            Modality::Infrared
        } else {
            Modality::Visible
        };
        let mut pids: Vec<_> = read_dir_sorted(&cam_dir)?;
        pids.retain(|p| p.is_dir());
        for pid_dir in pids {
            let pid: u32 = pid_dir
                .file_name()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("non-numeric person dir {}", pid_dir.display())))?;
            for file in read_dir_sorted(&pid_dir)? {
                let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
                if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                    continue;
                }
                let rel = file
                    .strip_prefix(root)
                    .expect("walked under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                raw.push((pid, modality, cam - 1, rel));
            }
        }
    }
    let sorted: BTreeMap<u32, u32> = raw
        .iter()
        .map(|r| r.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, pid)| (pid, i as u32))
        .collect();
    Ok(raw
        .into_iter()
        .map(|(pid, modality, camera, path)| ManifestEntry {
            path,
            identity: sorted[&pid],
            modality,
            camera,
        })
        .collect())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

// ---------------------------------------------------------------------------
// In-memory dataset

/// Immutable image index grouped by identity and modality.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    /// 8-bit HWC pixels, one buffer per entry.
    pub pixels: Vec<Vec<u8>>,
    pub height: usize,
    pub width: usize,
    groups: BTreeMap<(u32, Modality), Vec<usize>>,
    num_identities: usize,
}

impl Dataset {
    pub fn from_parts(entries: Vec<ManifestEntry>, pixels: Vec<Vec<u8>>, height: usize, width: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("empty manifest".into()));
        }
        for (e, p) in entries.iter().zip(&pixels) {
            if p.len() != height * width * 3 {
                return Err(Error::Shape(format!("image {} is not {height}x{width}x3", e.path)));
            }
        }
        let mut groups: BTreeMap<(u32, Modality), Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            groups.entry((e.identity, e.modality)).or_default().push(i);
        }
        let num_identities = entries.iter().map(|e| e.identity).max().unwrap() as usize + 1;
        for id in 0..num_identities as u32 {
            for m in [Modality::Visible, Modality::Infrared] {
                if !groups.contains_key(&(id, m)) {
                    return Err(Error::Coverage {
                        identity: id,
                        modality: m.name(),
                    });
                }
            }
        }
        Ok(Self {
            entries,
            pixels,
            height,
            width,
            groups,
            num_identities,
        })
    }

    pub fn from_rendered(rendered: &[RenderedImage]) -> Result<Self> {
        let h = rendered.first().map(|r| r.image.height() as usize).unwrap_or(0);
        let w = rendered.first().map(|r| r.image.width() as usize).unwrap_or(0);
        Self::from_parts(
            rendered.iter().map(|r| r.entry.clone()).collect(),
            rendered.iter().map(|r| r.image.as_raw().clone()).collect(),
            h,
            w,
        )
    }

    /// Number of distinct identities.
    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self, identity: u32, modality: Modality) -> &[usize] {
        self.groups.get(&(identity, modality)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn modality_indices(&self, modality: Modality) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].modality == modality)
            .collect()
    }
}

/// Loads a manifest and decodes every referenced image. Paths are relative
/// to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pixels = Vec::with_capacity(entries.len());
    let mut dims = None;
    for e in &entries {
        let p = base.join(&e.path);
        let img = image::open(&p)
            .map_err(|err| match err {
                image::ImageError::IoError(io) => Error::io(&p, io),
                other => Error::Image {
                    path: p.clone(),
                    message: other.to_string(),
                },
            })?
            .to_rgb8();
        let d = (img.height() as usize, img.width() as usize);
        match dims {
            None => dims = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {}x{}",
                    p.display(),
                    d.0,
                    d.1,
                    expected.0,
                    expected.1
                )))
            }
            _ => {}
        }
        pixels.push(img.into_raw());
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Dataset::from_parts(entries, pixels, h, w)
}

// ---------------------------------------------------------------------------
// Batches

/// Identity-balanced cross-modal batch. `visible[j]` and `infrared[j]` are
/// dataset indices of the same identity `identities[j]`, grouped identity-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
    pub identities: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

fn pick(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= n {
        sample_indices(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Samples `identities` distinct identities with `per_identity` images in
/// each modality. Under-populated identities are drawn with replacement.
pub fn sample_batch(dataset: &Dataset, identities: usize, per_identity: usize, rng: &mut impl Rng) -> Result<Batch> {
    if identities == 0 || per_identity == 0 {
        return Err(Error::Invalid("batch shape must be positive".into()));
    }
    if identities > dataset.num_identities() {
        return Err(Error::Invalid(format!(
            "batch needs {identities} identities, dataset has {}",
            dataset.num_identities()
        )));
    }
    let mut batch = Batch {
        visible: Vec::with_capacity(identities * per_identity),
        infrared: Vec::with_capacity(identities * per_identity),
        identities: Vec::with_capacity(identities * per_identity),
    };
    let mut chosen: Vec<u32> = sample_indices(rng, dataset.num_identities(), identities)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    chosen.sort_unstable();
    for id in chosen {
        let v = pick(dataset.indices(id, Modality::Visible), per_identity, rng);
        let i = pick(dataset.indices(id, Modality::Infrared), per_identity, rng);
        batch.visible.extend(v);
        batch.infrared.extend(i);
        batch.identities.extend(std::iter::repeat_n(id, per_identity));
    }
    Ok(batch)
}
