//! Rain composition, synthetic streak generation, dataset IO, and patch
//! extraction.
//!
//! The rainy observation model is additive: a clean background plus a
//! nonnegative rain layer, clamped to `[0, 1]`. The generator draws line
//! segments with sampled orientation, length, width, and intensity,
//! rasterizes them with soft edges, blurs each streak along its own
//! direction, and merges streaks by maximum so crossings do not bloom.
//! Everything is a pure function of its parameters and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::elem::{c, Elem};
use crate::error::{Error, Result};
use crate::util::{reflect_index, DeterministicRng};

/// A batch of RGB images in `(batch, channel, height, width)` layout with
/// finite values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T: Elem> {
    data: Array4<T>,
}

impl<T: Elem> ImageTensor<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        let (n, ch, h, w) = data.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image tensor has an empty dimension: {:?}",
                data.dim()
            )));
        }
        if ch != 3 {
            return Err(Error::Shape(format!(
                "image tensor must have 3 channels, got {ch}"
            )));
        }
        for &v in data.iter() {
            let f = v.to_f64();
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(Error::Data(format!(
                    "image values must be finite and in [0,1], found {f}"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn array(&self) -> &Array4<T> {
        &self.data
    }

    pub fn into_array(self) -> Array4<T> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }
}

/// A rainy image with its clean ground truth, matched by identifier.
#[derive(Debug, Clone)]
pub struct RainPair<T: Elem> {
    pub rainy: ImageTensor<T>,
    pub ground_truth: ImageTensor<T>,
    pub id: String,
}

impl<T: Elem> RainPair<T> {
    pub fn new(rainy: ImageTensor<T>, ground_truth: ImageTensor<T>, id: String) -> Result<Self> {
        if rainy.dim() != ground_truth.dim() {
            return Err(Error::Shape(format!(
                "pair {id}: rainy {:?} and ground truth {:?} differ",
                rainy.dim(),
                ground_truth.dim()
            )));
        }
        Ok(Self {
            rainy,
            ground_truth,
            id,
        })
    }
}

/// Sampling ranges for the streak generator. All ranges are inclusive and
/// sampled uniformly; orientation is a set of bands in degrees, where 90
/// means straight down, so rain can lean several ways in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreakParams {
    pub streak_count: (usize, usize),
    pub orientation_deg: Vec<(f64, f64)>,
    pub length_px: (f64, f64),
    pub width_px: (f64, f64),
    pub intensity: (f64, f64),
    pub seed: u64,
}

impl Default for StreakParams {
    fn default() -> Self {
        Self {
            streak_count: (60, 120),
            orientation_deg: vec![(75.0, 105.0)],
            length_px: (12.0, 28.0),
            width_px: (1.0, 2.0),
            intensity: (0.25, 0.65),
            seed: 0,
        }
    }
}

impl StreakParams {
    /// Dense rain: more streaks, five orientation bands, longer and brighter
    /// streaks.
    pub fn heavy(seed: u64) -> Self {
        Self {
            streak_count: (150, 250),
            orientation_deg: vec![
                (55.0, 65.0),
                (70.0, 80.0),
                (85.0, 95.0),
                (100.0, 110.0),
                (115.0, 125.0),
            ],
            length_px: (16.0, 40.0),
            width_px: (1.0, 3.0),
            intensity: (0.3, 0.8),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streak_count.0 > self.streak_count.1 {
            return Err(Error::Config(format!(
                "streak count range {:?} is empty",
                self.streak_count
            )));
        }
        if self.orientation_deg.is_empty() {
            return Err(Error::Config(
                "at least one orientation band is required".into(),
            ));
        }
        for band in &self.orientation_deg {
            if band.0 > band.1 {
                return Err(Error::Config(format!(
                    "orientation band {band:?} is empty"
                )));
            }
        }
        for (name, range) in [("length", self.length_px), ("width", self.width_px)] {
            if !(range.0 > 0.0 && range.1 >= range.0) {
                return Err(Error::Config(format!(
                    "{name} range {range:?} must be positive and nonempty"
                )));
            }
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "intensity range {:?} must sit inside [0,1]",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// Rasterize a rain layer of the given `(height, width)`. The returned
/// tensor is `(1, 3, h, w)` with identical channels, nonnegative, and never
/// brighter than the sampled intensities.
pub fn generate_streaks<T: Elem>(shape: (usize, usize), p: &StreakParams) -> Result<ImageTensor<T>> {
    p.validate()?;
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("rain layer shape {h}x{w} is empty")));
    }
    let mut rng = DeterministicRng::derive(p.seed, "streaks", 0);
    let count = rng.int_in(p.streak_count.0 as u64, p.streak_count.1 as u64) as usize;
    let max_len = h.max(w) as f64;

    let mut layer = vec![0.0f64; h * w];
    let mut scratch = vec![0.0f64; h * w];
    let mut clipped = false;

    for _ in 0..count {
        let band = p.orientation_deg[rng.below(p.orientation_deg.len() as u64) as usize];
        let theta = rng.uniform_in(band.0, band.1).to_radians();
        let mut length = rng.uniform_in(p.length_px.0, p.length_px.1);
        if length > max_len {
            length = max_len;
            clipped = true;
        }
        let width = rng.uniform_in(p.width_px.0, p.width_px.1);
        let intensity = rng.uniform_in(p.intensity.0, p.intensity.1);
        // Integer pixel centers keep an exactly vertical streak on a single
        // column instead of straddling two.
        let cx = rng.below(w as u64) as f64;
        let cy = rng.below(h as u64) as f64;
        let mut dx = theta.cos();
        let mut dy = theta.sin();
        if dx.abs() < 1e-9 {
            dx = 0.0;
        }
        if dy.abs() < 1e-9 {
            dy = 0.0;
        }

        let ax = cx - 0.5 * length * dx;
        let ay = cy - 0.5 * length * dy;
        let vx = length * dx;
        let vy = length * dy;
        let len2 = vx * vx + vy * vy;

        // Stamp coverage into the scratch plane, tracking the touched
        // bounding box so the per-streak blur stays cheap.
        let (mut lo_i, mut hi_i, mut lo_j, mut hi_j) = (h as isize, -1isize, w as isize, -1isize);
        let reach = (width / 2.0 + 1.5).ceil() as isize;
        let steps = (length * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let qx = ax + t * vx;
            let qy = ay + t * vy;
            let qi = qy.round() as isize;
            let qj = qx.round() as isize;
            for di in -reach..=reach {
                for dj in -reach..=reach {
                    let i = qi + di;
                    let j = qj + dj;
                    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                        continue;
                    }
                    let (px, py) = (j as f64, i as f64);
                    let tt = if len2 < 1e-12 {
                        0.0
                    } else {
                        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
                    };
                    let ex = ax + tt * vx - px;
                    let ey = ay + tt * vy - py;
                    let d = (ex * ex + ey * ey).sqrt();
                    let cov = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                    if cov < 1e-6 {
                        continue;
                    }
                    let idx = i as usize * w + j as usize;
                    let v = intensity * cov;
                    if v > scratch[idx] {
                        scratch[idx] = v;
                        lo_i = lo_i.min(i);
                        hi_i = hi_i.max(i);
                        lo_j = lo_j.min(j);
                        hi_j = hi_j.max(j);
                    }
                }
            }
        }
        if hi_i < 0 {
            continue;
        }

        // Three-tap blur along the streak direction, then fold the streak
        // into the layer by maximum.
        let oi = dy.round() as isize;
        let oj = dx.round() as isize;
        let (bl_i, bh_i) = ((lo_i - oi.abs()).max(0), (hi_i + oi.abs()).min(h as isize - 1));
        let (bl_j, bh_j) = ((lo_j - oj.abs()).max(0), (hi_j + oj.abs()).min(w as isize - 1));
        for i in bl_i..=bh_i {
            for j in bl_j..=bh_j {
                let tap = |ii: isize, jj: isize| -> f64 {
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        0.0
                    } else {
                        scratch[ii as usize * w + jj as usize]
                    }
                };
                let v = 0.5 * tap(i, j) + 0.25 * tap(i - oi, j - oj) + 0.25 * tap(i + oi, j + oj);
                let idx = i as usize * w + j as usize;
                if v > layer[idx] {
                    layer[idx] = v;
                }
            }
        }
        for i in lo_i.max(0)..=hi_i.min(h as isize - 1) {
            for j in lo_j.max(0)..=hi_j.min(w as isize - 1) {
                scratch[i as usize * w + j as usize] = 0.0;
            }
        }
    }

    if clipped {
        log::warn!("streak lengths clipped to {max_len} to fit a {h}x{w} layer");
    }

    let mut out = Array4::<T>::zeros((1, 3, h, w));
    for i in 0..h {
        for j in 0..w {
            let v = c::<T>(layer[i * w + j]);
            for ch in 0..3 {
                out[[0, ch, i, j]] = v;
            }
        }
    }
    ImageTensor::new(out)
}

/// Additive rain composition: `clamp(background + rain, 0, 1)`.
pub fn compose_rainy<T: Elem>(b: &ImageTensor<T>, r: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if b.dim() != r.dim() {
        return Err(Error::Shape(format!(
            "background {:?} and rain layer {:?} differ",
            b.dim(),
            r.dim()
        )));
    }
    let zero = T::zero();
    let one = T::one();
    let mut data = b.array().clone();
    data.zip_mut_with(r.array(), |bv, &rv| {
        let v = *bv + rv;
        *bv = if v < zero {
            zero
        } else if v > one {
            one
        } else {
            v
        };
    });
    ImageTensor::new(data)
}

/// Smooth procedural background: per-channel linear gradients plus a few
/// soft blobs, kept comfortably inside `[0, 1]`.
pub fn synth_background<T: Elem>(h: usize, w: usize, seed: u64) -> Result<ImageTensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("background shape {h}x{w} is empty")));
    }
    let mut rng = DeterministicRng::derive(seed, "background", 0);
    let mut out = Array4::<T>::zeros((1, 3, h, w));
    for ch in 0..3 {
        let base = rng.uniform_in(0.2, 0.7);
        let gx = rng.uniform_in(-0.25, 0.25);
        let gy = rng.uniform_in(-0.25, 0.25);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.uniform_in(0.0, w as f64),
                    rng.uniform_in(0.0, h as f64),
                    rng.uniform_in(0.1, 0.35) * h.max(w) as f64,
                    rng.uniform_in(-0.2, 0.2),
                )
            })
            .collect();
        for i in 0..h {
            for j in 0..w {
                let mut v = base
                    + gx * (j as f64 / w.max(1) as f64 - 0.5)
                    + gy * (i as f64 / h.max(1) as f64 - 0.5);
                for &(bx, by, sigma, amp) in &blobs {
                    let dx = j as f64 - bx;
                    let dy = i as f64 - by;
                    v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                out[[0, ch, i, j]] = c::<T>(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(out)
}

/// Filename convention for pairing rainy and clean images by identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairNaming {
    pub rainy_prefix: String,
    pub clean_prefix: String,
}

impl Default for PairNaming {
    fn default() -> Self {
        Self {
            rainy_prefix: "rain-".into(),
            clean_prefix: "norain-".into(),
        }
    }
}

/// Result of scanning a dataset directory: matched pairs in ascending id
/// order plus any files that had no partner.
#[derive(Debug)]
pub struct LoadedDataset<T: Elem> {
    pub pairs: Vec<RainPair<T>>,
    pub orphans: Vec<PathBuf>,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

fn file_id(path: &Path, prefix: &str) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    Some(stem.strip_prefix(prefix).unwrap_or(stem).to_string())
}

/// Ascending numeric order when ids parse as integers, lexicographic
/// otherwise.
fn id_sort_key(id: &str) -> (u64, String) {
    (id.parse::<u64>().unwrap_or(u64::MAX), id.to_string())
}

fn scan_dir(dir: &Path, prefix: &str, within: &mut BTreeMap<String, PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            if let Some(id) = file_id(&path, prefix) {
                within.insert(id, path);
            }
        }
    }
    Ok(())
}

/// Load every rainy/clean pair under `root`.
///
/// Two layouts are accepted: `root/rainy/*` with `root/norain/*`, or a flat
/// directory where filenames carry the naming prefixes. Files without a
/// partner are skipped and reported; an empty result is an error.
pub fn load_pair_dataset<T: Elem>(root: &Path, naming: &PairNaming) -> Result<LoadedDataset<T>> {
    let rainy_dir = root.join("rainy");
    let clean_dir = root.join("norain");
    let mut rainy = BTreeMap::new();
    let mut clean = BTreeMap::new();
    if rainy_dir.is_dir() && clean_dir.is_dir() {
        scan_dir(&rainy_dir, &naming.rainy_prefix, &mut rainy)?;
        scan_dir(&clean_dir, &naming.clean_prefix, &mut clean)?;
    } else {
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let path = entry.path();
            if !path.is_file() || !is_image_file(&path) {
                continue;
            }
            let name = match path.file_name().and_then(|n| n.to_str()) {
                Some(n) => n,
                None => continue,
            };
            if name.starts_with(&naming.clean_prefix) {
                if let Some(id) = file_id(&path, &naming.clean_prefix) {
                    clean.insert(id, path);
                }
            } else if name.starts_with(&naming.rainy_prefix) {
                if let Some(id) = file_id(&path, &naming.rainy_prefix) {
                    rainy.insert(id, path);
                }
            }
        }
    }

    let mut ids: Vec<String> = rainy.keys().filter(|id| clean.contains_key(*id)).cloned().collect();
    ids.sort_by_key(|id| id_sort_key(id));
    let mut orphans: Vec<PathBuf> = rainy
        .iter()
        .filter(|(id, _)| !clean.contains_key(*id))
        .map(|(_, p)| p.clone())
        .chain(
            clean
                .iter()
                .filter(|(id, _)| !rainy.contains_key(*id))
                .map(|(_, p)| p.clone()),
        )
        .collect();
    orphans.sort();
    for orphan in &orphans {
        log::warn!("unpaired dataset file {}", orphan.display());
    }

    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no {}{{id}} / {}{{id}} image pairs found under {}",
            naming.rainy_prefix,
            naming.clean_prefix,
            root.display()
        )));
    }

    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let x = load_image::<T>(&rainy[&id])?;
        let b = load_image::<T>(&clean[&id])?;
        pairs.push(RainPair::new(x, b, id)?);
    }
    Ok(LoadedDataset { pairs, orphans })
}

/// Decode an 8-bit RGB PNG or JPEG into `[0, 1]` floats.
pub fn load_image<T: Elem>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array4::<T>::zeros((1, 3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[0, ch, y as usize, x as usize]] = c::<T>(pixel.0[ch] as f64 / 255.0);
        }
    }
    ImageTensor::new(out)
}

/// Encode a single image to 8-bit RGB; the format follows the file
/// extension (PNG or JPEG).
pub fn save_image<T: Elem>(path: &Path, img: &ImageTensor<T>) -> Result<()> {
    let (n, _, h, w) = img.dim();
    if n != 1 {
        return Err(Error::Shape(format!(
            "can only save single images, got a batch of {n}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img.array()[[0, ch, y as usize, x as usize]].to_f64();
            pixel.0[ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Crop `count` aligned patches of `size`x`size` from a pair, corners drawn
/// uniformly with replacement from the seeded generator.
///
/// An image smaller than the patch is reflected out to size and returned as
/// a single pair, with a warning.
pub fn extract_patches<T: Elem>(
    pair: &RainPair<T>,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<RainPair<T>>> {
    if size == 0 || count == 0 {
        return Err(Error::Config(format!(
            "patch extraction needs positive count and size, got {count} and {size}"
        )));
    }
    let (_, _, h, w) = pair.rainy.dim();
    if h < size || w < size {
        log::warn!(
            "pair {}: image {h}x{w} is smaller than the {size}x{size} patch, reflecting",
            pair.id
        );
        let rainy = reflect_to_size(pair.rainy.array(), size)?;
        let clean = reflect_to_size(pair.ground_truth.array(), size)?;
        return Ok(vec![RainPair::new(
            ImageTensor::new(rainy)?,
            ImageTensor::new(clean)?,
            format!("{}#pad", pair.id),
        )?]);
    }
    let mut rng = DeterministicRng::derive(seed, "patch", 0);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let top = rng.below((h - size + 1) as u64) as usize;
        let left = rng.below((w - size + 1) as u64) as usize;
        let window = s![.., .., top..top + size, left..left + size];
        let rainy = pair.rainy.array().slice(window).to_owned();
        let clean = pair.ground_truth.array().slice(window).to_owned();
        out.push(RainPair::new(
            ImageTensor::new(rainy)?,
            ImageTensor::new(clean)?,
            format!("{}#{k}", pair.id),
        )?);
    }
    Ok(out)
}

fn reflect_to_size<T: Elem>(x: &Array4<T>, size: usize) -> Result<Array4<T>> {
    let (n, cdim, h, w) = x.dim();
    let oh = h.max(size);
    let ow = w.max(size);
    let mut out = Array4::<T>::zeros((n, cdim, oh, ow));
    for b in 0..n {
        for ch in 0..cdim {
            for i in 0..oh {
                for j in 0..ow {
                    let si = reflect_index(i as isize, h);
                    let sj = reflect_index(j as isize, w);
                    out[[b, ch, i, j]] = x[[b, ch, si, sj]];
                }
            }
        }
    }
    Ok(out)
}

/// Everything that defines a synthetic dataset; echoed into its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub streaks: StreakParams,
}

/// Generate `spec.count` rainy/clean pairs under `root` in the subdirectory
/// layout, plus a `manifest.txt` recording the parameters. Per-image seeds
/// are derived from the base seed and the image index, so the dataset is a
/// pure function of the spec.
pub fn synth_dataset(root: &Path, spec: &SynthSpec) -> Result<()> {
    spec.streaks.validate()?;
    if spec.count == 0 {
        return Err(Error::Config("synthetic dataset needs count >= 1".into()));
    }
    let rainy_dir = root.join("rainy");
    let clean_dir = root.join("norain");
    fs::create_dir_all(&rainy_dir).map_err(|e| Error::io(&rainy_dir, e))?;
    fs::create_dir_all(&clean_dir).map_err(|e| Error::io(&clean_dir, e))?;

    for i in 1..=spec.count {
        let mut per_image = DeterministicRng::derive(spec.streaks.seed, "image", i as u64);
        let bg_seed = per_image.next_u64();
        let streak_seed = per_image.next_u64();
        let background = synth_background::<f32>(spec.height, spec.width, bg_seed)?;
        let mut sp = spec.streaks.clone();
        sp.seed = streak_seed;
        let rain = generate_streaks::<f32>((spec.height, spec.width), &sp)?;
        let rainy = compose_rainy(&background, &rain)?;
        save_image(&rainy_dir.join(format!("rain-{i:04}.png")), &rainy)?;
        save_image(&clean_dir.join(format!("norain-{i:04}.png")), &background)?;
    }

    let manifest = root.join("manifest.txt");
    let body = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    crate::util::atomic_write(&manifest, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(values: Array4<f64>) -> ImageTensor<f64> {
        ImageTensor::new(values).unwrap()
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mhdn-data-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn image_tensor_rejects_bad_values() {
        assert!(ImageTensor::new(Array4::<f64>::zeros((1, 3, 4, 4))).is_ok());
        assert!(ImageTensor::new(Array4::<f64>::zeros((1, 4, 4, 4))).is_err());
        assert!(ImageTensor::new(Array4::<f64>::from_elem((1, 3, 2, 2), 1.5)).is_err());
        assert!(ImageTensor::new(Array4::<f64>::from_elem((1, 3, 2, 2), f64::NAN)).is_err());
        assert!(ImageTensor::new(Array4::<f64>::zeros((0, 3, 4, 4))).is_err());
    }

    #[test]
    fn rain_pair_rejects_shape_mismatch() {
        let a = tensor(Array4::zeros((1, 3, 4, 4)));
        let b = tensor(Array4::zeros((1, 3, 4, 5)));
        assert!(RainPair::new(a.clone(), a.clone(), "x".into()).is_ok());
        assert!(RainPair::new(a, b, "x".into()).is_err());
    }

    #[test]
    fn zero_rain_layer_composes_to_the_background() {
        let b = synth_background::<f64>(12, 10, 3).unwrap();
        let r = tensor(Array4::zeros((1, 3, 12, 10)));
        let x = compose_rainy(&b, &r).unwrap();
        assert_eq!(x.array(), b.array());
    }

    #[test]
    fn composition_clamps_at_one() {
        let b = tensor(Array4::from_elem((1, 3, 2, 2), 0.9));
        let mut rain = Array4::<f64>::zeros((1, 3, 2, 2));
        rain[[0, 0, 0, 0]] = 0.3;
        let x = compose_rainy(&b, &tensor(rain)).unwrap();
        assert_eq!(x.array()[[0, 0, 0, 0]], 1.0);
        assert_eq!(x.array()[[0, 1, 0, 0]], 0.9);
        let wrong = tensor(Array4::zeros((1, 3, 3, 2)));
        assert!(compose_rainy(&b, &wrong).is_err());
    }

    #[test]
    fn rainy_images_are_never_darker_than_the_background() {
        for seed in [1u64, 2, 3] {
            let b = synth_background::<f64>(24, 24, seed).unwrap();
            let r = generate_streaks::<f64>((24, 24), &StreakParams {
                seed,
                ..StreakParams::default()
            })
            .unwrap();
            let x = compose_rainy(&b, &r).unwrap();
            let mean_b: f64 = b.array().iter().sum::<f64>() / b.array().len() as f64;
            let mean_x: f64 = x.array().iter().sum::<f64>() / x.array().len() as f64;
            assert!(mean_x >= mean_b);
            for (xv, bv) in x.array().iter().zip(b.array().iter()) {
                assert!(xv >= bv);
            }
        }
    }

    #[test]
    fn zero_streak_count_gives_an_empty_layer() {
        let p = StreakParams {
            streak_count: (0, 0),
            ..StreakParams::default()
        };
        let r = generate_streaks::<f64>((16, 16), &p).unwrap();
        assert!(r.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_deterministic_for_a_seed() {
        let p = StreakParams {
            seed: 99,
            ..StreakParams::default()
        };
        let a = generate_streaks::<f32>((32, 20), &p).unwrap();
        let b = generate_streaks::<f32>((32, 20), &p).unwrap();
        assert_eq!(a.array(), b.array());
        let other = generate_streaks::<f32>(
            (32, 20),
            &StreakParams {
                seed: 100,
                ..StreakParams::default()
            },
        )
        .unwrap();
        assert_ne!(a.array(), other.array());
    }

    #[test]
    fn vertical_width_one_streaks_stay_in_one_column() {
        for seed in [4u64, 9, 23, 31] {
            let p = StreakParams {
                streak_count: (1, 1),
                orientation_deg: vec![(90.0, 90.0)],
                length_px: (8.0, 14.0),
                width_px: (1.0, 1.0),
                intensity: (0.5, 0.5),
                seed,
            };
            let r = generate_streaks::<f64>((24, 24), &p).unwrap();
            let mut columns = std::collections::BTreeSet::new();
            for i in 0..24 {
                for j in 0..24 {
                    if r.array()[[0, 0, i, j]] > 0.0 {
                        columns.insert(j);
                    }
                }
            }
            assert_eq!(columns.len(), 1, "seed {seed}: columns {columns:?}");
        }
    }

    #[test]
    fn rain_layer_is_bounded_by_the_intensity_range() {
        let p = StreakParams {
            seed: 7,
            ..StreakParams::default()
        };
        let r = generate_streaks::<f64>((40, 40), &p).unwrap();
        let max = r.array().iter().cloned().fold(0.0f64, f64::max);
        assert!(max > 0.0, "expected some rain");
        assert!(max <= p.intensity.1 + 1e-12);
        assert!(r.array().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn oversized_lengths_are_clipped_not_fatal() {
        let p = StreakParams {
            streak_count: (3, 3),
            length_px: (200.0, 200.0),
            seed: 5,
            ..StreakParams::default()
        };
        let r = generate_streaks::<f64>((10, 10), &p).unwrap();
        assert!(r.array().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn streak_params_validation_catches_empty_ranges() {
        let mut p = StreakParams::default();
        p.streak_count = (5, 2);
        assert!(p.validate().is_err());
        p = StreakParams::default();
        p.orientation_deg.clear();
        assert!(p.validate().is_err());
        p = StreakParams::default();
        p.intensity = (0.2, 1.4);
        assert!(p.validate().is_err());
        p = StreakParams::default();
        p.width_px = (0.0, 1.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn png_round_trip_is_idempotent_at_8_bit() {
        let dir = temp_dir("roundtrip");
        let mut rng = DeterministicRng::derive(11, "io", 0);
        let quantized = Array4::from_shape_fn((1, 3, 9, 7), |_| {
            (rng.below(256) as f64) / 255.0
        });
        let img = tensor(quantized);
        let path = dir.join("q.png");
        save_image(&path, &img).unwrap();
        let back = load_image::<f64>(&path).unwrap();
        assert_eq!(back.array(), img.array());

        let arbitrary = tensor(Array4::from_shape_fn((1, 3, 9, 7), |_| rng.uniform()));
        let path2 = dir.join("a.png");
        save_image(&path2, &arbitrary).unwrap();
        let approx = load_image::<f64>(&path2).unwrap();
        for (a, b) in approx.array().iter().zip(arbitrary.array().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn jpeg_files_are_accepted() {
        let dir = temp_dir("jpeg");
        let img = synth_background::<f32>(16, 16, 8).unwrap();
        let path = dir.join("bg.jpg");
        save_image(&path, &img).unwrap();
        let back = load_image::<f32>(&path).unwrap();
        assert_eq!(back.dim(), (1, 3, 16, 16));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn flat_directory_pairs_sort_numerically_and_report_orphans() {
        let dir = temp_dir("flat");
        let img = synth_background::<f32>(8, 8, 1).unwrap();
        for id in ["2", "10", "1"] {
            save_image(&dir.join(format!("rain-{id}.png")), &img).unwrap();
            save_image(&dir.join(format!("norain-{id}.png")), &img).unwrap();
        }
        save_image(&dir.join("rain-77.png"), &img).unwrap();
        let ds = load_pair_dataset::<f32>(&dir, &PairNaming::default()).unwrap();
        let ids: Vec<&str> = ds.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["1", "2", "10"]);
        assert_eq!(ds.orphans.len(), 1);
        assert!(ds.orphans[0].ends_with("rain-77.png"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn subdirectory_layout_loads_pairs() {
        let dir = temp_dir("subdirs");
        let spec = SynthSpec {
            count: 3,
            height: 12,
            width: 12,
            streaks: StreakParams {
                seed: 21,
                ..StreakParams::default()
            },
        };
        synth_dataset(&dir, &spec).unwrap();
        let ds = load_pair_dataset::<f32>(&dir, &PairNaming::default()).unwrap();
        assert_eq!(ds.pairs.len(), 3);
        assert!(ds.orphans.is_empty());
        assert!(dir.join("manifest.txt").is_file());
        for pair in &ds.pairs {
            assert_eq!(pair.rainy.dim(), (1, 3, 12, 12));
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn synthetic_datasets_are_reproducible() {
        let spec = SynthSpec {
            count: 2,
            height: 10,
            width: 14,
            streaks: StreakParams {
                seed: 5,
                ..StreakParams::default()
            },
        };
        let d1 = temp_dir("synth-a");
        let d2 = temp_dir("synth-b");
        synth_dataset(&d1, &spec).unwrap();
        synth_dataset(&d2, &spec).unwrap();
        let a = load_pair_dataset::<f32>(&d1, &PairNaming::default()).unwrap();
        let b = load_pair_dataset::<f32>(&d2, &PairNaming::default()).unwrap();
        for (pa, pb) in a.pairs.iter().zip(b.pairs.iter()) {
            assert_eq!(pa.id, pb.id);
            assert_eq!(pa.rainy.array(), pb.rainy.array());
            assert_eq!(pa.ground_truth.array(), pb.ground_truth.array());
        }
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn empty_directory_is_an_explicit_error() {
        let dir = temp_dir("empty");
        let err = load_pair_dataset::<f32>(&dir, &PairNaming::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rain-") && msg.contains("norain-"), "{msg}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn patches_are_aligned_with_their_source() {
        let b = synth_background::<f64>(40, 36, 13).unwrap();
        let r = generate_streaks::<f64>((40, 36), &StreakParams {
            seed: 13,
            ..StreakParams::default()
        })
        .unwrap();
        let x = compose_rainy(&b, &r).unwrap();
        let diff = x.array() - b.array();
        let pair = RainPair::new(x, b, "probe".into()).unwrap();
        let patches = extract_patches(&pair, 6, 16, 77).unwrap();
        assert_eq!(patches.len(), 6);
        for patch in &patches {
            let pd = patch.rainy.array() - patch.ground_truth.array();
            // Recover the crop offset from the patch id ordering by scanning
            // the parent difference image for an exact match.
            let mut found = false;
            'outer: for top in 0..=(40 - 16) {
                for left in 0..=(36 - 16) {
                    let window = diff.slice(s![.., .., top..top + 16, left..left + 16]);
                    if window == pd {
                        found = true;
                        break 'outer;
                    }
                }
            }
            assert!(found, "patch {} does not align with the source", patch.id);
        }
    }

    #[test]
    fn identity_crop_returns_the_whole_image() {
        let b = synth_background::<f64>(18, 18, 2).unwrap();
        let pair = RainPair::new(b.clone(), b, "whole".into()).unwrap();
        let patches = extract_patches(&pair, 1, 18, 3).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].rainy.array(), pair.rainy.array());
    }

    #[test]
    fn undersized_images_are_reflected_to_patch_size() {
        let b = synth_background::<f64>(6, 5, 4).unwrap();
        let pair = RainPair::new(b.clone(), b.clone(), "small".into()).unwrap();
        let patches = extract_patches(&pair, 15, 8, 3).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].rainy.dim(), (1, 3, 8, 8));
        let src = b.array();
        let padded = patches[0].rainy.array();
        for i in 0..8 {
            for j in 0..8 {
                let si = reflect_index(i as isize, 6);
                let sj = reflect_index(j as isize, 5);
                assert_eq!(padded[[0, 1, i, j]], src[[0, 1, si, sj]]);
            }
        }
    }
}
