//! Synthetic datasets, portable PPM image I/O, and geometric transforms.
//!
//! The generator builds each class as a 4×4 grid of shaped, colored tiles.
//! A class is one of the 24 shape→color bijections: its tiles pair each of
//! the four shapes with its own color, four copies apiece, laid out in a
//! class-seeded arrangement. Every class therefore shows the same color
//! histogram and the same shape histogram — first-order statistics identify
//! nothing — while the shape×color conjunctions are unique per class, which
//! is exactly the kind of local feature a convolutional embedding can learn
//! and a randomly initialized one does not yet possess. Distractor and
//! group images instead draw a free-form tile per slot from all 16
//! combinations. Per-image perturbations (wrap-around translation,
//! brightness, occlusion, noise) reproduce the viewpoint / illumination /
//! partial-view axes a retrieval model must tolerate.
//!
//! All randomness is keyed as `f(global seed, image id)`, so any image can be
//! regenerated independently and the whole dataset is byte-reproducible.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled image with pixels in `[0, 1]`, planar `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub label: u32,
    pub pixels: Tensor,
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: u32,
    pub images_per_class: u32,
    /// Square image side; must be a positive multiple of 4 (tile grid), ≥ 16.
    pub image_size: usize,
    /// Wrap-around translation amplitude in pixels (viewpoint change).
    pub translation_px: usize,
    /// Brightness is scaled by a factor in [1−b, 1+b] (illumination change).
    pub brightness_delta: f64,
    /// Upper bound on the occluded area fraction (incomplete view).
    pub occlusion_fraction: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Gallery-only images with unique labels, generated like extra classes.
    pub distractors: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 20,
            images_per_class: 24,
            image_size: 32,
            translation_px: 4,
            brightness_delta: 0.25,
            occlusion_fraction: 0.2,
            noise_sigma: 0.02,
            distractors: 100,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.images_per_class == 0 {
            return Err(Error::Config(
                "need at least one class and one image per class".into(),
            ));
        }
        if self.num_classes as usize > PAIRINGS.len() {
            return Err(Error::Config(format!(
                "at most {} classes are distinguishable (one per shape-color pairing), got {}",
                PAIRINGS.len(),
                self.num_classes
            )));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 4 and at least 16, got {}",
                self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.brightness_delta) {
            return Err(Error::Config(format!(
                "brightness_delta must lie in [0, 1), got {}",
                self.brightness_delta
            )));
        }
        if !(0.0..=0.9).contains(&self.occlusion_fraction) {
            return Err(Error::Config(format!(
                "occlusion_fraction must lie in [0, 0.9], got {}",
                self.occlusion_fraction
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// How one class's images split into train / gallery / query.
    pub fn split_sizes(&self) -> Result<(u32, u32, u32)> {
        let per = self.images_per_class;
        let gallery = (per / 4).max(2);
        let query = (per / 6).max(1);
        if per < gallery + query + 2 {
            return Err(Error::Config(format!(
                "images_per_class {per} cannot cover gallery {gallery} + query {query} \
                 and still leave at least 2 training images"
            )));
        }
        Ok((per - gallery - query, gallery, query))
    }
}

/// A generated dataset: disjoint train / gallery / query splits.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
    pub query: Vec<ImageRecord>,
}

// --- base patterns ---------------------------------------------------------

const TILE_GRID: usize = 4;
const TILE_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.75, 0.20],
];
const TILE_BG: [f64; 3] = [0.08, 0.08, 0.10];

/// All 24 shape→color bijections, lexicographic; class `c` uses row `c`.
const PAIRINGS: [[usize; 4]; 24] = [
    [0, 1, 2, 3],
    [0, 1, 3, 2],
    [0, 2, 1, 3],
    [0, 2, 3, 1],
    [0, 3, 1, 2],
    [0, 3, 2, 1],
    [1, 0, 2, 3],
    [1, 0, 3, 2],
    [1, 2, 0, 3],
    [1, 2, 3, 0],
    [1, 3, 0, 2],
    [1, 3, 2, 0],
    [2, 0, 1, 3],
    [2, 0, 3, 1],
    [2, 1, 0, 3],
    [2, 1, 3, 0],
    [2, 3, 0, 1],
    [2, 3, 1, 0],
    [3, 0, 1, 2],
    [3, 0, 2, 1],
    [3, 1, 0, 2],
    [3, 1, 2, 0],
    [3, 2, 0, 1],
    [3, 2, 1, 0],
];

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seed for one image's perturbations: FNV-1a over the id, mixed with the
/// global seed, so images are independent and reproducible in isolation.
fn image_seed(global: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in id.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix(h ^ splitmix(global))
}

/// Paints one tile type (color index × shape index) into the given window.
fn paint_tile(pixels: &mut Tensor, size: usize, ty: usize, tx: usize, tile: usize, side: usize) {
    let color = TILE_COLORS[tile % TILE_COLORS.len()];
    let shape = tile / TILE_COLORS.len();
    let (y0, x0) = (ty * side, tx * side);
    let data = pixels.data_mut();
    for dy in 0..side {
        for dx in 0..side {
            let (fy, fx) = (dy as f64 / (side - 1) as f64, dx as f64 / (side - 1) as f64);
            let value = match shape {
                // Solid fill.
                0 => color,
                // Centered disc on background.
                1 => {
                    let (cy, cx) = (fy - 0.5, fx - 0.5);
                    if (cy * cy + cx * cx).sqrt() <= 0.38 {
                        color
                    } else {
                        TILE_BG
                    }
                }
                // Horizontal gradient from background to color.
                2 => {
                    let mut mixed = [0.0; 3];
                    for c in 0..3 {
                        mixed[c] = TILE_BG[c] + (color[c] - TILE_BG[c]) * fx;
                    }
                    mixed
                }
                // Diagonal split: color above the diagonal, background below.
                _ => {
                    if fy + fx <= 1.0 {
                        color
                    } else {
                        TILE_BG
                    }
                }
            };
            for c in 0..3 {
                data[(c * size + y0 + dy) * size + x0 + dx] = value[c];
            }
        }
    }
}

/// Lays 16 tile codes (shape·4 + color) out on the grid.
fn paint_grid(tiles: &[usize], size: usize) -> Tensor {
    let side = size / TILE_GRID;
    let mut pixels = Tensor::zeros(vec![3, size, size]);
    for ty in 0..TILE_GRID {
        for tx in 0..TILE_GRID {
            paint_tile(&mut pixels, size, ty, tx, tiles[ty * TILE_GRID + tx], side);
        }
    }
    pixels
}

/// The class's canonical appearance: four copies of each shape, colored by
/// the class's shape→color pairing, in a class-seeded arrangement.
fn class_pattern(label: u32, size: usize) -> Tensor {
    let pairing = PAIRINGS[label as usize % PAIRINGS.len()];
    let mut tiles: Vec<usize> = (0..TILE_GRID * TILE_GRID)
        .map(|slot| {
            let shape = slot % 4;
            shape * 4 + pairing[shape]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(0xC1A5_5000 + label as u64));
    use rand::seq::SliceRandom;
    tiles.shuffle(&mut rng);
    paint_grid(&tiles, size)
}

/// Distractor / group appearance: an unconstrained seeded tile per slot,
/// drawn from all 16 shape×color combinations.
fn freeform_pattern(label: u32, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(0xF0_4711 + label as u64));
    let tiles: Vec<usize> = (0..TILE_GRID * TILE_GRID)
        .map(|_| rng.gen_range(0..16))
        .collect();
    paint_grid(&tiles, size)
}

// --- perturbations ---------------------------------------------------------

/// Cyclic translation: content wraps around, so nothing leaves the frame.
fn wrap_translate(pixels: &Tensor, size: usize, dy: i64, dx: i64) -> Tensor {
    let mut out = Tensor::zeros(vec![3, size, size]);
    let src = pixels.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..size {
            let sy = (y as i64 - dy).rem_euclid(size as i64) as usize;
            for x in 0..size {
                let sx = (x as i64 - dx).rem_euclid(size as i64) as usize;
                dst[(c * size + y) * size + x] = src[(c * size + sy) * size + sx];
            }
        }
    }
    out
}

/// Renders one image: base pattern + seeded perturbations, quantized to
/// exact 1/255 steps so in-memory pixels match a PPM round trip bit for bit.
fn render_image(
    spec: &SynthSpec,
    global_seed: u64,
    id: &str,
    label: u32,
    freeform: bool,
) -> ImageRecord {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(global_seed, id));
    let mut pixels = if freeform {
        freeform_pattern(label, size)
    } else {
        class_pattern(label, size)
    };

    if spec.translation_px > 0 {
        let t = spec.translation_px as i64;
        let (dy, dx) = (rng.gen_range(-t..=t), rng.gen_range(-t..=t));
        pixels = wrap_translate(&pixels, size, dy, dx);
    }
    if spec.brightness_delta > 0.0 {
        let scale = rng.gen_range(1.0 - spec.brightness_delta..=1.0 + spec.brightness_delta);
        for v in pixels.data_mut() {
            *v = (*v * scale).clamp(0.0, 1.0);
        }
    }
    if spec.occlusion_fraction > 0.0 {
        let fraction = rng.gen_range(0.0..=spec.occlusion_fraction);
        let aspect = rng.gen_range(0.7..=1.4);
        let w = ((size as f64 * fraction.sqrt() * aspect).round() as usize).min(size);
        let h = ((size as f64 * fraction.sqrt() / aspect).round() as usize).min(size);
        if w > 0 && h > 0 {
            let y0 = rng.gen_range(0..=size - h);
            let x0 = rng.gen_range(0..=size - w);
            let data = pixels.data_mut();
            for c in 0..3 {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        data[(c * size + y) * size + x] = 0.5;
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in pixels.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    for v in pixels.data_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
    ImageRecord {
        id: id.to_string(),
        label,
        pixels,
    }
}

/// Generates the full train / gallery / query dataset, plus distractors that
/// appear only in the gallery under unique labels.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (train_n, gallery_n, query_n) = spec.split_sizes()?;
    let mut dataset = SyntheticDataset {
        train: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
    };
    for label in 0..spec.num_classes {
        for k in 0..spec.images_per_class {
            let id = format!("c{label:03}_i{k:02}");
            let record = render_image(spec, seed, &id, label, false);
            if k < train_n {
                dataset.train.push(record);
            } else if k < train_n + gallery_n {
                dataset.gallery.push(record);
            } else {
                let _ = query_n;
                dataset.query.push(record);
            }
        }
    }
    for d in 0..spec.distractors {
        let label = spec.num_classes + d;
        let id = format!("d{d:03}");
        dataset
            .gallery
            .push(render_image(spec, seed, &id, label, true));
    }
    Ok(dataset)
}

/// Groups-of-4 variant: `groups` classes with exactly 4 images each, all in
/// one flat list. Evaluation queries each image against the whole set, where
/// its own group (self-match included) is the relevant set. Groups use the
/// free-form pattern space, which is large enough for hundreds of distinct
/// identities.
pub fn generate_groups_of_4(spec: &SynthSpec, groups: u32, seed: u64) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let mut records = Vec::with_capacity(groups as usize * 4);
    for label in 0..groups {
        for k in 0..4 {
            let id = format!("g{label:03}_i{k}");
            records.push(render_image(spec, seed, &id, label, true));
        }
    }
    Ok(records)
}

// --- PPM I/O ----------------------------------------------------------------

const MAX_PPM_SIDE: usize = 1 << 15;

/// Writes binary PPM (P6, maxval 255); pixels are rounded to the nearest
/// 1/255 step.
pub fn save_image(record: &ImageRecord, path: &Path) -> Result<()> {
    let (h, w) = match record.pixels.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape(format!(
                "expected [3, H, W] pixels, got {other:?}"
            )));
        }
    };
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P6\n{w} {h}\n255\n")?;
    let data = record.pixels.data();
    let mut row = Vec::with_capacity(w * 3);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x];
                row.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        file.write_all(&row)?;
    }
    file.flush()?;
    Ok(())
}

/// Streaming token reader for the PPM header that tracks its byte offset for
/// error reports and tolerates comments.
struct PpmReader<R: Read> {
    inner: R,
    offset: u64,
    peeked: Option<u8>,
}

impl<R: Read> PpmReader<R> {
    fn new(inner: R) -> Self {
        PpmReader {
            inner,
            offset: 0,
            peeked: None,
        }
    }

    fn next_byte(&mut self) -> Result<Option<u8>> {
        if let Some(b) = self.peeked.take() {
            return Ok(Some(b));
        }
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf)? {
            0 => Ok(None),
            _ => {
                self.offset += 1;
                Ok(Some(buf[0]))
            }
        }
    }

    fn put_back(&mut self, b: u8) {
        debug_assert!(self.peeked.is_none());
        self.peeked = Some(b);
    }

    /// Reads one whitespace-delimited header token, skipping `#` comments.
    fn token(&mut self, what: &str) -> Result<Vec<u8>> {
        // Skip whitespace and comment lines.
        loop {
            match self.next_byte()? {
                None => return Err(Error::parse(format!("missing {what}"), self.offset)),
                Some(b) if b.is_ascii_whitespace() => continue,
                Some(b'#') => {
                    while let Some(b) = self.next_byte()? {
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(b) => {
                    self.put_back(b);
                    break;
                }
            }
        }
        let mut token = Vec::new();
        while let Some(b) = self.next_byte()? {
            if b.is_ascii_whitespace() {
                self.put_back(b);
                break;
            }
            token.push(b);
            if token.len() > 32 {
                return Err(Error::parse(
                    format!("{what} token is absurdly long"),
                    self.offset,
                ));
            }
        }
        Ok(token)
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let at = self.offset;
        let token = self.token(what)?;
        std::str::from_utf8(&token)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(format!("{what} is not a decimal number: {token:?}"), at))
    }
}

/// Reads a binary PPM (P6, maxval 255) into `[3, H, W]` pixels in `[0, 1]`.
/// Malformed or truncated input fails with the byte offset; nothing panics.
pub fn load_image(path: &Path, id: &str, label: u32) -> Result<ImageRecord> {
    let file = BufReader::new(File::open(path)?);
    let pixels = read_ppm(file)?;
    Ok(ImageRecord {
        id: id.to_string(),
        label,
        pixels,
    })
}

/// PPM decoding on any byte stream (used directly by the fuzz tests).
pub fn read_ppm(reader: impl Read) -> Result<Tensor> {
    let mut r = PpmReader::new(reader);
    let magic = r.token("magic number")?;
    if magic != b"P6" {
        return Err(Error::parse(
            format!("unsupported magic {magic:?}, want P6"),
            0,
        ));
    }
    let w = r.number("width")?;
    let h = r.number("height")?;
    let at_dims = r.offset;
    if w == 0 || h == 0 || w > MAX_PPM_SIDE || h > MAX_PPM_SIDE {
        return Err(Error::parse(
            format!("unreasonable dimensions {w}x{h}"),
            at_dims,
        ));
    }
    let maxval_at = r.offset;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(
            format!("unsupported maxval {maxval}, want 255"),
            maxval_at,
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match r.next_byte()? {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err(Error::parse(
                "missing raster separator after maxval",
                r.offset,
            ));
        }
    }
    let len = 3usize
        .checked_mul(w)
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| Error::parse("pixel payload size overflows", at_dims))?;
    let mut raster = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match r.next_byte()? {
            Some(b) => {
                raster[filled] = b;
                filled += 1;
            }
            None => {
                return Err(Error::parse(
                    format!("raster truncated: expected {len} bytes, got {filled}"),
                    r.offset,
                ));
            }
        }
    }
    if r.next_byte()?.is_some() {
        return Err(Error::parse("trailing bytes after raster", r.offset));
    }
    let mut data = vec![0.0; len];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = raster[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

// --- dataset directory layout ------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    label: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    splits: BTreeMap<String, Vec<ManifestEntry>>,
}

fn image_path(root: &Path, split: &str, record: &ImageRecord) -> std::path::PathBuf {
    root.join(split)
        .join(record.label.to_string())
        .join(format!("{}.ppm", record.id))
}

/// Writes `<root>/<split>/<label>/<id>.ppm` for every record, plus a
/// `manifest.json` listing all splits.
pub fn save_dataset(root: &Path, dataset: &SyntheticDataset) -> Result<()> {
    let mut manifest = Manifest {
        splits: BTreeMap::new(),
    };
    for (split, records) in [
        ("train", &dataset.train),
        ("gallery", &dataset.gallery),
        ("query", &dataset.query),
    ] {
        let mut entries = Vec::with_capacity(records.len());
        for record in records {
            let path = image_path(root, split, record);
            std::fs::create_dir_all(path.parent().expect("path has a parent"))?;
            save_image(record, &path)?;
            entries.push(ManifestEntry {
                id: record.id.clone(),
                label: record.label,
            });
        }
        manifest.splits.insert(split.to_string(), entries);
    }
    let file = BufWriter::new(File::create(root.join("manifest.json"))?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<SyntheticDataset> {
    let manifest_path = root.join("manifest.json");
    let file = BufReader::new(File::open(&manifest_path)?);
    let manifest: Manifest = serde_json::from_reader(file)?;
    let mut dataset = SyntheticDataset {
        train: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
    };
    for (split, records) in [
        ("train", &mut dataset.train),
        ("gallery", &mut dataset.gallery),
        ("query", &mut dataset.query),
    ] {
        let Some(entries) = manifest.splits.get(split) else {
            continue;
        };
        for entry in entries {
            let path = root
                .join(split)
                .join(entry.label.to_string())
                .join(format!("{}.ppm", entry.id));
            records.push(load_image(&path, &entry.id, entry.label)?);
        }
    }
    Ok(dataset)
}

// --- transforms --------------------------------------------------------------

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::Shape(format!(
            "expected [3, H, W] pixels, got {other:?}"
        ))),
    }
}

fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_dims(t)?;
    let mut out = Tensor::zeros(vec![3, out_h, out_w]);
    let src = t.data();
    let dst = out.data_mut();
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for y in 0..out_h {
        // Half-pixel-center mapping; clamped at the borders.
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let base = c * h;
                let v00 = src[(base + y0) * w + x0];
                let v01 = src[(base + y0) * w + x1];
                let v10 = src[(base + y1) * w + x0];
                let v11 = src[(base + y1) * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                dst[(c * out_h + y) * out_w + x] = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}

/// Bilinear resize so the longer side equals `max_side`, preserving aspect.
pub fn resize_max_side(t: &Tensor, max_side: usize) -> Result<Tensor> {
    if max_side == 0 {
        return Err(Error::Config("max_side must be positive".into()));
    }
    let (h, w) = image_dims(t)?;
    let (out_h, out_w) = if h >= w {
        let scaled = ((w as f64 * max_side as f64 / h as f64).round() as usize).max(1);
        (max_side, scaled)
    } else {
        let scaled = ((h as f64 * max_side as f64 / w as f64).round() as usize).max(1);
        (scaled, max_side)
    };
    bilinear_resize(t, out_h, out_w)
}

/// Bilinear resize to an exact square, ignoring aspect ratio.
pub fn resize_square(t: &Tensor, side: usize) -> Result<Tensor> {
    if side == 0 {
        return Err(Error::Config("side must be positive".into()));
    }
    bilinear_resize(t, side, side)
}

fn crop(t: &Tensor, y0: usize, x0: usize, side: usize) -> Result<Tensor> {
    let (h, w) = image_dims(t)?;
    if y0 + side > h || x0 + side > w {
        return Err(Error::Shape(format!(
            "crop window {side}x{side} at ({y0}, {x0}) leaves the {h}x{w} image"
        )));
    }
    let mut out = Tensor::zeros(vec![3, side, side]);
    let src = t.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..side {
            let src_row = (c * h + y0 + y) * w + x0;
            let dst_row = (c * side + y) * side;
            dst[dst_row..dst_row + side].copy_from_slice(&src[src_row..src_row + side]);
        }
    }
    Ok(out)
}

/// The centered `side`×`side` window.
pub fn center_crop(t: &Tensor, side: usize) -> Result<Tensor> {
    let (h, w) = image_dims(t)?;
    if side > h.min(w) {
        return Err(Error::Shape(format!("crop {side} exceeds image {h}x{w}")));
    }
    crop(t, (h - side) / 2, (w - side) / 2, side)
}

/// Center plus the four corners, in the order
/// [center, top-left, top-right, bottom-left, bottom-right].
pub fn five_crops(t: &Tensor, side: usize) -> Result<Vec<Tensor>> {
    let (h, w) = image_dims(t)?;
    if side > h.min(w) {
        return Err(Error::Shape(format!("crop {side} exceeds image {h}x{w}")));
    }
    Ok(vec![
        center_crop(t, side)?,
        crop(t, 0, 0, side)?,
        crop(t, 0, w - side, side)?,
        crop(t, h - side, 0, side)?,
        crop(t, h - side, w - side, side)?,
    ])
}
