//! Procedural multi-domain segmentation benchmark.
//!
//! Scenes are flat-colored geometric layouts (sky background, ground
//! strip, blocks, discs) with hard class boundaries, so label maps are
//! exact by construction. Target domains are produced by parametric
//! appearance shifts with recorded magnitudes.
//!
//! Class colors are fixed with small per-object jitter. Keeping the
//! appearance variance across scenes low is deliberate: within one shift
//! kind the amplitude-crop distance then tracks the hidden magnitude
//! rather than scene-to-scene layout noise, which is what makes distance
//! ranking a well-posed problem on this benchmark. For the same reason
//! every magnitude sweep is applied to one shared base scene per sweep.
//!
//! Generation is pure per image given (spec, seed, index).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_image, load_labels, save_image, save_labels, Image};
use crate::seed::{derive_seed, seeded_rng};

/// Fixed per-class base colors (sky, ground, block, disc).
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.55, 0.62, 0.70],
    [0.35, 0.42, 0.22],
    [0.55, 0.30, 0.25],
    [0.75, 0.68, 0.25],
];
const COLOR_JITTER: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub cls: usize,
    pub seed: u64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object extent as a fraction of min(height, width).
    pub size_min: f64,
    pub size_max: f64,
    /// Top of the ground strip as a row fraction. Fixed across scenes:
    /// the strip edge dominates the low-frequency spectrum, so pinning it
    /// keeps scenes spectrally close to the source mean, which is what
    /// makes distance ranking track shift magnitude instead of layout.
    pub ground_frac: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            cls: 4,
            seed: 0,
            objects_min: 3,
            objects_max: 6,
            size_min: 0.10,
            size_max: 0.24,
            ground_frac: 0.68,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Parameter(format!(
                "scenes need at least 8x8 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if !(2..=4).contains(&self.cls) {
            return Err(Error::Parameter(format!(
                "scene classes must be in 2..=4, got {}",
                self.cls
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Parameter("object count range is empty".into()));
        }
        if !(self.size_min > 0.0 && self.size_max <= 0.45 && self.size_min <= self.size_max) {
            return Err(Error::Parameter(format!(
                "object size range must satisfy 0 < min <= max <= 0.45, got [{}, {}]",
                self.size_min, self.size_max
            )));
        }
        if !(self.ground_frac >= 0.5 && self.ground_frac <= 0.95) {
            return Err(Error::Parameter(format!(
                "ground_frac must be in [0.5, 0.95], got {}",
                self.ground_frac
            )));
        }
        Ok(())
    }
}

fn jittered(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    let mut c = base;
    for v in c.iter_mut() {
        *v = (*v + COLOR_JITTER * (2.0 * rng.gen::<f64>() - 1.0)).clamp(0.0, 1.0);
    }
    c
}

fn paint(img: &mut Vec<f64>, labels: &mut [u8], w: usize, y: usize, x: usize, color: [f64; 3], cls: u8) {
    let at = (y * w + x) * 3;
    img[at..at + 3].copy_from_slice(&color);
    labels[y * w + x] = cls;
}

fn fill_strip(img: &mut Vec<f64>, labels: &mut [u8], h: usize, w: usize, y0: usize, color: [f64; 3]) {
    for y in y0..h {
        for x in 0..w {
            paint(img, labels, w, y, x, color, 1);
        }
    }
}

fn fill_block(
    img: &mut Vec<f64>,
    labels: &mut [u8],
    w: usize,
    y0: usize,
    x0: usize,
    bh: usize,
    bw: usize,
    color: [f64; 3],
) {
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            paint(img, labels, w, y, x, color, 2);
        }
    }
}

/// Pixel (y, x) belongs to the disc when its center (y+0.5, x+0.5) lies
/// inside the circle.
fn disc_covers(y: usize, x: usize, cy: f64, cx: f64, r: f64) -> bool {
    let dy = y as f64 + 0.5 - cy;
    let dx = x as f64 + 0.5 - cx;
    dy * dy + dx * dx <= r * r
}

fn fill_disc(img: &mut Vec<f64>, labels: &mut [u8], h: usize, w: usize, cy: f64, cx: f64, r: f64, color: [f64; 3]) {
    let y_lo = (cy - r - 1.0).max(0.0) as usize;
    let y_hi = ((cy + r + 1.0) as usize).min(h - 1);
    let x_lo = (cx - r - 1.0).max(0.0) as usize;
    let x_hi = ((cx + r + 1.0) as usize).min(w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            if disc_covers(y, x, cy, cx, r) {
                paint(img, labels, w, y, x, color, 3);
            }
        }
    }
}

/// One scene, deterministic in (spec, index). Background first, then the
/// ground strip, then blocks and discs in painter's order. The strip counts
/// as the first object, so an object count of zero yields a pure-background
/// scene; when present it always sits at `ground_frac`, only its color
/// varies.
pub fn gen_scene(spec: &SceneSpec, index: usize) -> Result<Image> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, &format!("scene_{index}"));
    let (h, w) = (spec.height, spec.width);
    let mut pixels = vec![0.0; h * w * 3];
    let mut labels = vec![0u8; h * w];

    let bg = jittered(&mut rng, CLASS_COLORS[0]);
    for y in 0..h {
        // fixed vertical shading so even empty scenes have structure
        let shade = 1.0 - 0.10 * y as f64 / h as f64;
        for x in 0..w {
            let at = (y * w + x) * 3;
            for c in 0..3 {
                pixels[at + c] = (bg[c] * shade).clamp(0.0, 1.0);
            }
        }
    }

    let n = rng.gen_range(spec.objects_min..=spec.objects_max);
    let m = h.min(w) as f64;
    for i in 0..n {
        let kind = if i == 0 {
            1u8
        } else if spec.cls > 2 {
            rng.gen_range(2..spec.cls) as u8
        } else {
            1u8
        };
        let color = jittered(&mut rng, CLASS_COLORS[kind as usize]);
        match kind {
            1 => {
                let y0 = (spec.ground_frac * h as f64) as usize;
                fill_strip(&mut pixels, &mut labels, h, w, y0, color);
            }
            2 => {
                let bh = ((rng.gen_range(spec.size_min..=spec.size_max) * m) as usize).max(2);
                let bw = ((rng.gen_range(spec.size_min..=spec.size_max) * m) as usize).max(2);
                let y0 = rng.gen_range(0..=h - bh);
                let x0 = rng.gen_range(0..=w - bw);
                fill_block(&mut pixels, &mut labels, w, y0, x0, bh, bw, color);
            }
            _ => {
                let r = (rng.gen_range(spec.size_min..=spec.size_max) * m / 2.0).max(1.5);
                let cy = rng.gen_range(r..h as f64 - r);
                let cx = rng.gen_range(r..w as f64 - r);
                fill_disc(&mut pixels, &mut labels, h, w, cy, cx, r, color);
            }
        }
    }

    Image::new(h, w, 3, pixels)?.with_labels(labels, spec.cls)
}

/// Labeled source scenes at indices `0..n`.
pub fn gen_source(spec: &SceneSpec, n: usize) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::Parameter("need at least one source scene".into()));
    }
    (0..n).map(|i| gen_scene(spec, i)).collect()
}

// --- appearance shifts ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Brightness,
    ColorCast,
    GaussianNoise,
    Blur,
    Gamma,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 5] = [
        ShiftKind::Brightness,
        ShiftKind::ColorCast,
        ShiftKind::GaussianNoise,
        ShiftKind::Blur,
        ShiftKind::Gamma,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::Brightness => "brightness",
            ShiftKind::ColorCast => "color_cast",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::Blur => "blur",
            ShiftKind::Gamma => "gamma",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown shift kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

/// Standard normal draws via Box-Muller. Hand-rolled so the noise stream
/// is pinned by this crate, not by a dependency's internals.
struct Normals {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Normals {
    fn new(rng: ChaCha8Rng) -> Self {
        Normals { rng, spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Per-channel factors for the color cast: warm up red, pull down blue.
fn cast_weights(m: f64) -> [f64; 3] {
    [1.0 + m, 1.0 + 0.15 * m, 1.0 - 0.8 * m]
}

fn separable_blur(img: &Image, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let radius = radius.max(1);
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w, ch) = (img.height as i64, img.width as i64, img.channels);
    let mut tmp = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xi = (x + ki as i64 - radius).clamp(0, w - 1);
                    acc += kv * img.pixels[((y * w + xi) as usize) * ch + c];
                }
                tmp[((y * w + x) as usize) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yi = (y + ki as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[((yi * w + x) as usize) * ch + c];
                }
                out[((y * w + x) as usize) * ch + c] = acc;
            }
        }
    }
    out
}

/// Apply one appearance shift. Deterministic given the shift's seed;
/// labels and the domain tag pass through untouched; magnitude 0 is the
/// identity; outputs are clipped to [0, 1].
pub fn apply_shift(img: &Image, shift: &DomainShift) -> Result<Image> {
    if !(shift.magnitude >= 0.0 && shift.magnitude.is_finite()) {
        return Err(Error::Parameter(format!(
            "shift magnitude must be finite and >= 0, got {}",
            shift.magnitude
        )));
    }
    if shift.magnitude == 0.0 {
        return Ok(img.clone());
    }
    let m = shift.magnitude;
    let mut pixels = match shift.kind {
        ShiftKind::Brightness => img.pixels.iter().map(|p| p * (1.0 + m)).collect(),
        ShiftKind::ColorCast => {
            let weights = cast_weights(m);
            img.pixels
                .iter()
                .enumerate()
                .map(|(i, p)| p * weights[i % img.channels % 3])
                .collect()
        }
        ShiftKind::GaussianNoise => {
            let mut normals = Normals::new(seeded_rng(shift.seed, "gaussian_noise"));
            img.pixels.iter().map(|p| p + m * normals.next()).collect()
        }
        ShiftKind::Blur => separable_blur(img, m),
        ShiftKind::Gamma => img.pixels.iter().map(|p| p.powf(1.0 + m)).collect(),
    };
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    let mut out = Image::new(img.height, img.width, img.channels, pixels)?;
    out.labels = img.labels.clone();
    out.domain_tag = img.domain_tag.clone();
    Ok(out)
}

// --- benchmark ---------------------------------------------------------------

/// One magnitude sweep: `per_magnitude` base scenes, each shifted at every
/// magnitude in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub kind: ShiftKind,
    pub magnitudes: Vec<f64>,
    pub per_magnitude: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub scene: SceneSpec,
    pub n_source: usize,
    pub compound: Vec<PlanItem>,
    pub open: Vec<PlanItem>,
}

fn magnitude_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl BenchmarkPlan {
    /// Desk-scale default: 64x64, 40 source scenes, three compound shift
    /// kinds at 12 magnitudes each, gamma held out as the open domain.
    ///
    /// The noise grid starts at 0.4 because the amplitude distance is not
    /// monotone in noise level below that: mild white noise fills in the
    /// weak spectral bins and pulls an image toward the source mean before
    /// pushing it away. Blur is excluded for the same reason, it shrinks
    /// the strong bins toward the mean over the whole usable range.
    pub fn default_with_seed(seed: u64) -> Self {
        let grid = magnitude_grid(12, 0.05, 0.60);
        BenchmarkPlan {
            scene: SceneSpec {
                seed,
                ..SceneSpec::default()
            },
            n_source: 40,
            compound: vec![
                PlanItem {
                    kind: ShiftKind::Brightness,
                    magnitudes: grid.clone(),
                    per_magnitude: 1,
                },
                PlanItem {
                    kind: ShiftKind::ColorCast,
                    magnitudes: grid.clone(),
                    per_magnitude: 1,
                },
                PlanItem {
                    kind: ShiftKind::GaussianNoise,
                    magnitudes: magnitude_grid(12, 0.40, 1.40),
                    per_magnitude: 1,
                },
            ],
            open: vec![PlanItem {
                kind: ShiftKind::Gamma,
                magnitudes: grid,
                per_magnitude: 1,
            }],
        }
    }

    fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_source == 0 {
            return Err(Error::Parameter("benchmark needs source images".into()));
        }
        if self.compound.is_empty() || self.open.is_empty() {
            return Err(Error::Parameter("compound and open plans must be non-empty".into()));
        }
        for item in self.compound.iter().chain(self.open.iter()) {
            if item.magnitudes.is_empty() || item.per_magnitude == 0 {
                return Err(Error::Parameter(format!(
                    "empty magnitude sweep for kind {}",
                    item.kind
                )));
            }
            if item.magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
                return Err(Error::Parameter(format!(
                    "magnitudes for kind {} must be finite and >= 0",
                    item.kind
                )));
            }
        }
        for open_item in &self.open {
            if self.compound.iter().any(|c| c.kind == open_item.kind) {
                return Err(Error::Parameter(format!(
                    "open kind {} also appears in the compound plan; the open domain must be held out",
                    open_item.kind
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Source,
    Compound,
    Open,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Source => "source",
            Split::Compound => "compound",
            Split::Open => "open",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub cls: usize,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Hidden ground truth about each shifted image. Written next to the
/// manifest for evaluation of the ranking itself; the training path never
/// reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub base_scene: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIDECAR_FILE: &str = "sidecar.json";

/// Generate the dataset under `root`: images/, labels/, manifest.json,
/// sidecar.json. The manifest is written last and atomically, so a failed
/// run never leaves a readable but incomplete dataset.
pub fn gen_benchmark(root: &Path, plan: &BenchmarkPlan) -> Result<Manifest> {
    plan.validate()?;
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&images_dir).map_err(Error::io(&images_dir))?;
    std::fs::create_dir_all(&labels_dir).map_err(Error::io(&labels_dir))?;

    let mut entries = Vec::new();
    let mut sidecar: BTreeMap<String, SidecarEntry> = BTreeMap::new();

    let mut write_entry = |img: &Image, id: &str, split: Split| -> Result<()> {
        let image_rel = format!("images/{id}.png");
        let labels_rel = format!("labels/{id}.png");
        save_image(img, &root.join(&image_rel))?;
        save_labels(
            img.labels.as_deref().expect("generated scenes are labeled"),
            img.height,
            img.width,
            &root.join(&labels_rel),
        )?;
        entries.push(ManifestEntry {
            id: id.to_string(),
            split,
            image: image_rel,
            labels: labels_rel,
        });
        Ok(())
    };

    for i in 0..plan.n_source {
        let scene = gen_scene(&plan.scene, i)?;
        write_entry(&scene, &format!("source_{i:03}"), Split::Source)?;
    }

    // Held-out base scenes continue the source index space.
    let mut scene_cursor = plan.n_source;
    for (split, items) in [(Split::Compound, &plan.compound), (Split::Open, &plan.open)] {
        let mut seq = 0usize;
        for item in items {
            for _ in 0..item.per_magnitude {
                let base_index = scene_cursor;
                scene_cursor += 1;
                let base = gen_scene(&plan.scene, base_index)?;
                for &magnitude in &item.magnitudes {
                    let id = format!("{split}_{seq:03}");
                    let shift = DomainShift {
                        kind: item.kind,
                        magnitude,
                        seed: derive_seed(plan.scene.seed, &format!("shift_{id}")),
                    };
                    let shifted = apply_shift(&base, &shift)?;
                    write_entry(&shifted, &id, split)?;
                    sidecar.insert(
                        id,
                        SidecarEntry {
                            kind: item.kind,
                            magnitude,
                            base_scene: base_index,
                        },
                    );
                    seq += 1;
                }
            }
        }
    }

    let mut counts = BTreeMap::new();
    for split in [Split::Source, Split::Compound, Split::Open] {
        counts.insert(split.to_string(), entries.iter().filter(|e| e.split == split).count());
    }
    let manifest = Manifest {
        height: plan.scene.height,
        width: plan.scene.width,
        cls: plan.scene.cls,
        seed: plan.scene.seed,
        counts,
        entries,
    };

    let sidecar_bytes = serde_json::to_vec_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar serialization: {e}")))?;
    crate::artifact::atomic_write(&root.join(SIDECAR_FILE), &sidecar_bytes)?;
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    crate::artifact::atomic_write(&root.join(MANIFEST_FILE), &manifest_bytes)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_sidecar(root: &Path) -> Result<BTreeMap<String, SidecarEntry>> {
    let path = root.join(SIDECAR_FILE);
    let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Load one dataset entry. The returned image carries the entry id as its
/// domain tag. Labels are attached only when requested: the training path
/// loads compound and open images without them.
pub fn load_entry(root: &Path, manifest: &Manifest, entry: &ManifestEntry, with_labels: bool) -> Result<Image> {
    let mut img = load_image(&root.join(&entry.image))?;
    if img.height != manifest.height || img.width != manifest.width {
        return Err(Error::Format(format!(
            "{}: size {}x{} does not match manifest {}x{}",
            entry.image, img.height, img.width, manifest.height, manifest.width
        )));
    }
    if with_labels {
        let labels = load_labels(&root.join(&entry.labels))?;
        img = img.with_labels(labels, manifest.cls)?;
    }
    img.domain_tag = Some(entry.id.clone());
    Ok(img)
}

pub fn load_split(root: &Path, manifest: &Manifest, split: Split, with_labels: bool) -> Result<Vec<Image>> {
    manifest
        .split_entries(split)
        .map(|e| load_entry(root, manifest, e, with_labels))
        .collect()
}
