//! Procedural mask-image pairs standing in for annotated medical slices.
//!
//! Each image is a band-limited background texture with one to three lesion
//! blobs (perturbed superellipses) composited through a soft alpha. The mask
//! is the alpha's 0.5 level set, and the lesion pixel count is fixed up front
//! from a target fraction drawn uniformly in `[min_frac, max_frac]`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub resolution: usize,
    pub channels: usize,
    pub min_frac: f64,
    pub max_frac: f64,
    pub max_blobs: usize,
    /// Lesion level above the background level.
    pub contrast: f64,
    /// Guaranteed gap between lesion and background mean intensity.
    pub contrast_margin: f64,
    pub texture_amplitude: f64,
    /// Width of the alpha transition, in blob-field units.
    pub blend_softness: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::easy(32)
    }
}

impl GenConfig {
    /// High-contrast lesions; a small segmenter solves this reliably.
    pub fn easy(resolution: usize) -> Self {
        Self {
            resolution,
            channels: 1,
            min_frac: 0.02,
            max_frac: 0.40,
            max_blobs: 3,
            contrast: 0.6,
            contrast_margin: 0.4,
            texture_amplitude: 0.12,
            blend_softness: 0.04,
        }
    }

    /// Low-contrast lesions that differ from the background mostly in texture.
    pub fn hard(resolution: usize) -> Self {
        Self {
            contrast: 0.15,
            contrast_margin: 0.1,
            texture_amplitude: 0.25,
            ..Self::easy(resolution)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 {
            return Err(Error::invalid("data.resolution", "must be at least 4"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("data.channels", "must be 1 or 3"));
        }
        if !(self.min_frac > 0.0 && self.max_frac < 1.0) {
            return Err(Error::invalid(
                "data.min_frac",
                "lesion fractions must lie in (0, 1); lesion-free images are excluded",
            ));
        }
        if self.min_frac > self.max_frac {
            return Err(Error::invalid("data.min_frac", "must not exceed max_frac"));
        }
        let n = (self.resolution * self.resolution) as f64;
        if (self.min_frac * n).ceil() > (self.max_frac * n).floor() {
            return Err(Error::invalid("data.max_frac", "no integer pixel count fits the fraction bounds"));
        }
        if self.max_blobs == 0 {
            return Err(Error::invalid("data.max_blobs", "must be at least 1"));
        }
        if !(self.contrast_margin >= 0.0 && self.contrast_margin <= 1.0) {
            return Err(Error::invalid("data.contrast_margin", "must lie in [0, 1]"));
        }
        if !(self.blend_softness > 0.0) {
            return Err(Error::invalid("data.blend_softness", "must be positive"));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return Err(Error::invalid("data.texture_amplitude", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub seed: u64,
    pub blobs: usize,
    pub target_fraction: f64,
    pub lesion_fraction: f64,
    pub lesion_mean: f64,
    pub background_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskImagePair {
    /// Channel-major `C x H x W` values in `[-1, 1]`.
    pub image: Vec<f32>,
    pub mask: Mask,
    pub channels: usize,
    pub meta: PairMeta,
}

impl MaskImagePair {
    pub fn resolution(&self) -> usize {
        self.mask.height()
    }

    pub fn image_tensor(pairs: &[&MaskImagePair], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = pairs.first().ok_or_else(|| Error::invalid("pairs", "empty batch"))?;
        let (c, r) = (first.channels, first.resolution());
        let mut values = Vec::with_capacity(pairs.len() * c * r * r);
        for p in pairs {
            if (p.channels, p.resolution()) != (c, r) {
                return Err(Error::Shape {
                    context: "image batch",
                    expected: vec![c, r, r],
                    actual: vec![p.channels, p.resolution(), p.resolution()],
                });
            }
            values.extend_from_slice(&p.image);
        }
        Ok(Tensor::from_vec(values, (pairs.len(), c, r, r), device)?.to_dtype(dtype)?)
    }

    pub fn mask_tensor(pairs: &[&MaskImagePair], dtype: DType, device: &Device) -> Result<Tensor> {
        let masks: Vec<&Mask> = pairs.iter().map(|p| &p.mask).collect();
        Mask::batch_tensor(&masks, dtype, device)
    }

    /// Wraps an externally produced image (e.g. a generated sample) with its mask.
    pub fn from_parts(image: Vec<f32>, mask: Mask, channels: usize, seed: u64) -> Result<Self> {
        let expected = channels * mask.len();
        if image.len() != expected {
            return Err(Error::Shape {
                context: "image values",
                expected: vec![expected],
                actual: vec![image.len()],
            });
        }
        let (lesion_mean, background_mean) = region_means(&image, &mask, channels);
        Ok(Self {
            meta: PairMeta {
                seed,
                blobs: 0,
                target_fraction: mask.fraction(),
                lesion_fraction: mask.fraction(),
                lesion_mean,
                background_mean,
            },
            image,
            mask,
            channels,
        })
    }

    /// Mean intensity (over channels) inside and outside the mask.
    pub fn region_means(&self) -> (f64, f64) {
        region_means(&self.image, &self.mask, self.channels)
    }
}

fn region_means(image: &[f32], mask: &Mask, channels: usize) -> (f64, f64) {
    let n = mask.len();
    let (mut sin, mut sout) = (0.0, 0.0);
    for c in 0..channels {
        for (i, &m) in mask.data().iter().enumerate() {
            let v = image[c * n + i] as f64;
            if m == 1 {
                sin += v;
            } else {
                sout += v;
            }
        }
    }
    let k = mask.count();
    (
        sin / (k * channels).max(1) as f64,
        sout / ((n - k) * channels).max(1) as f64,
    )
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    exponent: f64,
    rotation: f64,
    harmonics: Vec<(usize, f64, f64)>,
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let harmonics = (2..=4)
            .map(|k| (k, rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self {
            cx: rng.random_range(0.2..0.8),
            cy: rng.random_range(0.2..0.8),
            rx: rng.random_range(0.08..0.25),
            ry: rng.random_range(0.08..0.25),
            exponent: rng.random_range(1.6..4.0),
            rotation: rng.random_range(0.0..PI),
            harmonics,
        }
    }

    /// Larger inside; equals 0 on the nominal boundary.
    fn field(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rotation.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u.abs().powf(self.exponent) + v.abs().powf(self.exponent)).powf(1.0 / self.exponent);
        let phi = v.atan2(u);
        let wobble: f64 = self.harmonics.iter().map(|&(k, a, p)| a * (k as f64 * phi + p).cos()).sum();
        1.0 - r / (1.0 + wobble)
    }
}

/// Sum of random plane waves with frequencies in `[f_lo, f_hi]` cycles per image,
/// scaled to unit peak amplitude.
fn texture(rng: &mut ChaCha8Rng, res: usize, f_lo: f64, f_hi: f64, waves: usize) -> Vec<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            let f = rng.random_range(f_lo..f_hi);
            let theta = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (f * theta.cos(), f * theta.sin(), phase, amp)
        })
        .collect();
    let norm: f64 = params.iter().map(|p| p.3).sum();
    let mut out = Vec::with_capacity(res * res);
    for yi in 0..res {
        for xi in 0..res {
            let (x, y) = (xi as f64 / res as f64, yi as f64 / res as f64);
            let v: f64 = params
                .iter()
                .map(|&(kx, ky, ph, a)| a * (2.0 * PI * (kx * x + ky * y) + ph).sin())
                .sum();
            out.push(v / norm);
        }
    }
    out
}

/// Generates one pair; the output is a pure function of `(config, seed)`.
pub fn generate_pair(config: &GenConfig, seed: u64) -> Result<MaskImagePair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = config.resolution;
    let n = res * res;

    let target_fraction = rng.random_range(config.min_frac..=config.max_frac);
    let lo = (config.min_frac * n as f64).ceil() as usize;
    let hi = (config.max_frac * n as f64).floor() as usize;
    let k = ((target_fraction * n as f64).round() as usize).clamp(lo.max(1), hi);

    let blobs: Vec<Blob> = (0..rng.random_range(1..=config.max_blobs))
        .map(|_| Blob::sample(&mut rng))
        .collect();
    let field: Vec<f64> = (0..n)
        .map(|i| {
            let (x, y) = ((i % res) as f64 + 0.5, (i / res) as f64 + 0.5);
            blobs
                .iter()
                .map(|b| b.field(x / res as f64, y / res as f64))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    // Top-k pixels by field value are lesion; the threshold sits between the
    // k-th and (k+1)-th values so the alpha midpoint reproduces the mask.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask_data = vec![0u8; n];
    for &i in &order[..k] {
        mask_data[i] = 1;
    }
    let threshold = if k < n {
        0.5 * (field[order[k - 1]] + field[order[k]])
    } else {
        field[order[n - 1]] - 1.0
    };
    let alpha: Vec<f64> = field
        .iter()
        .zip(&mask_data)
        .map(|(&f, &m)| {
            let a = 1.0 / (1.0 + (-(f - threshold) / config.blend_softness).exp());
            // Pin ties at the threshold to the mask side.
            if m == 1 { a.max(0.5) } else { a.min(0.5 - 1e-9) }
        })
        .collect();
    let mask = Mask::new(res, res, mask_data)?;

    let bg_level = rng.random_range(-0.45..-0.15);
    let lesion_level = bg_level + config.contrast * rng.random_range(1.0..1.25);
    let amp = config.texture_amplitude;
    let mut image = Vec::with_capacity(config.channels * n);
    let bg_tex = texture(&mut rng, res, 1.0, 4.0, 6);
    let lesion_tex = texture(&mut rng, res, 5.0, 9.0, 6);
    for _ in 0..config.channels {
        let tint = if config.channels == 1 { 0.0 } else { rng.random_range(-0.1..0.1) };
        for i in 0..n {
            let b = bg_level + tint + amp * bg_tex[i];
            let l = lesion_level + tint + amp * lesion_tex[i];
            image.push((1.0 - alpha[i]) * b + alpha[i] * l);
        }
    }

    // Widen the lesion/background gap to the configured margin if the
    // textures happened to eat into it.
    let to_f32 = |img: &[f64]| img.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect::<Vec<f32>>();
    let (mi, mo) = region_means(&to_f32(&image), &mask, config.channels);
    if mi - mo < config.contrast_margin {
        let (ai, ao) = region_means(
            &alpha.iter().map(|&a| a as f32).collect::<Vec<_>>(),
            &mask,
            1,
        );
        let delta = (config.contrast_margin - (mi - mo)) / (ai - ao) * 1.05;
        for c in 0..config.channels {
            for i in 0..n {
                image[c * n + i] += delta * alpha[i];
            }
        }
    }
    let image = to_f32(&image);
    let (lesion_mean, background_mean) = region_means(&image, &mask, config.channels);
    Ok(MaskImagePair {
        meta: PairMeta {
            seed,
            blobs: blobs.len(),
            target_fraction,
            lesion_fraction: mask.fraction(),
            lesion_mean,
            background_mean,
        },
        image,
        mask,
        channels: config.channels,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct per-pair seeds: train first, then test.
pub fn pair_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        let s = splitmix64(seed.wrapping_mul(0x1000_0000_01B3) ^ splitmix64(i));
        i += 1;
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
    pub lesion_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: GenConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Hash of the experiment config that produced the dataset, if any.
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub version: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<MaskImagePair>,
    pub test: Vec<MaskImagePair>,
}

/// Generates both splits in memory.
pub fn generate_dataset(config: &GenConfig, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("n_train/n_test", "both splits need at least one pair"));
    }
    config.validate()?;
    let seeds = pair_seeds(seed, n_train + n_test);
    let pairs = seeds
        .iter()
        .map(|&s| generate_pair(config, s))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = pairs.into_iter();
    let train = pairs.by_ref().take(n_train).collect();
    let test = pairs.collect();
    Ok(Dataset { train, test })
}

pub fn encode_image_png(pair: &MaskImagePair) -> Result<Vec<u8>> {
    let r = pair.resolution() as u32;
    let n = pair.mask.len();
    let mut buf = std::io::Cursor::new(Vec::new());
    let result = if pair.channels == 1 {
        let px: Vec<u16> = pair
            .image
            .iter()
            .map(|&v| (((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(r, r, px).expect("buffer sized");
        img.write_to(&mut buf, image::ImageFormat::Png)
    } else {
        let mut px = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                let v = pair.image[c * n + i] as f64;
                px.push((((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let img = image::RgbImage::from_raw(r, r, px).expect("buffer sized");
        img.write_to(&mut buf, image::ImageFormat::Png)
    };
    result.map_err(|e| Error::Format {
        path: PathBuf::from("<png>"),
        reason: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let px: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, px).expect("buffer sized");
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Format {
        path: PathBuf::from("<png>"),
        reason: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| match p.0[0] {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(Error::NonBinaryMask("mask png")),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h as usize, w as usize, data)
}

/// Reads an image written by [`encode_image_png`] back into `[-1, 1]`.
pub fn read_image_png(path: &Path, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let to_unit = |v: f64| (v * 2.0 - 1.0) as f32;
    if channels == 1 {
        Ok(img.to_luma16().pixels().map(|p| to_unit(p.0[0] as f64 / 65535.0)).collect())
    } else {
        let rgb = img.to_rgb8();
        let n = (rgb.width() * rgb.height()) as usize;
        let mut out = vec![0f32; 3 * n];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * n + i] = to_unit(p.0[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates and persists a dataset under `dir`.
pub fn build_dataset(
    config: &GenConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
    dir: &Path,
    overwrite: bool,
    config_hash: Option<String>,
) -> Result<Manifest> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::invalid(
                "output",
                format!("{} already exists; pass overwrite to replace it", dir.display()),
            ));
        }
        if non_empty {
            for sub in ["images", "masks"] {
                let p = dir.join(sub);
                if p.exists() {
                    fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
    }
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let data = generate_dataset(config, n_train, n_test, seed)?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    for (split, pairs) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for (index, pair) in pairs.iter().enumerate() {
            let image_rel = format!("images/{tag}_{index:05}.png");
            let mask_rel = format!("masks/{tag}_{index:05}.png");
            let image_bytes = encode_image_png(pair)?;
            let mask_bytes = encode_mask_png(&pair.mask)?;
            write_file(&dir.join(&image_rel), &image_bytes)?;
            write_file(&dir.join(&mask_rel), &mask_bytes)?;
            entries.push(ManifestEntry {
                split,
                index,
                seed: pair.meta.seed,
                image: image_rel,
                mask: mask_rel,
                image_sha256: sha256_hex(&image_bytes),
                mask_sha256: sha256_hex(&mask_bytes),
                lesion_fraction: pair.meta.lesion_fraction,
            });
        }
    }
    let manifest = Manifest {
        generator: config.clone(),
        seed,
        n_train,
        n_test,
        config_hash,
        version: Some(env!("CARGO_PKG_VERSION").to_string()),
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&path, &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Rebuilds the dataset described by `manifest` into `dir`.
pub fn regenerate(manifest: &Manifest, dir: &Path, overwrite: bool) -> Result<Manifest> {
    build_dataset(
        &manifest.generator,
        manifest.n_train,
        manifest.n_test,
        manifest.seed,
        dir,
        overwrite,
        manifest.config_hash.clone(),
    )
}

/// Loads a persisted dataset, verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let channels = manifest.generator.channels;
    let mut out = Dataset::default();
    for e in &manifest.entries {
        let ipath = dir.join(&e.image);
        let mpath = dir.join(&e.mask);
        let ibytes = fs::read(&ipath).map_err(|err| Error::io(&ipath, err))?;
        let mbytes = fs::read(&mpath).map_err(|err| Error::io(&mpath, err))?;
        if sha256_hex(&ibytes) != e.image_sha256 {
            return Err(Error::Format {
                path: ipath,
                reason: "checksum mismatch".into(),
            });
        }
        if sha256_hex(&mbytes) != e.mask_sha256 {
            return Err(Error::Format {
                path: mpath,
                reason: "checksum mismatch".into(),
            });
        }
        let mask = read_mask_png(&mpath)?;
        let image = read_image_png(&ipath, channels)?;
        let mut pair = MaskImagePair::from_parts(image, mask, channels, e.seed)?;
        pair.meta.target_fraction = e.lesion_fraction;
        match e.split {
            Split::Train => out.train.push(pair),
            Split::Test => out.test.push(pair),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_infeasible_configs() {
        let mut c = GenConfig::easy(16);
        c.min_frac = 0.0;
        c.max_frac = 0.0;
        assert!(matches!(generate_pair(&c, 0), Err(Error::Invalid { .. })));
        c = GenConfig::easy(16);
        c.min_frac = 0.5;
        c.max_frac = 0.3;
        assert!(generate_pair(&c, 0).is_err());
        c = GenConfig::easy(16);
        c.channels = 2;
        assert!(generate_pair(&c, 0).is_err());
    }

    #[test]
    fn pairs_are_deterministic_and_bounded() {
        for cfg in [GenConfig::easy(16), GenConfig::hard(32)] {
            for seed in 0..50 {
                let a = generate_pair(&cfg, seed).unwrap();
                let b = generate_pair(&cfg, seed).unwrap();
                assert_eq!(a, b);
                let f = a.mask.fraction();
                assert!(f >= cfg.min_frac && f <= cfg.max_frac, "{f}");
                assert!(a.image.iter().all(|v| (-1.0..=1.0).contains(v)));
                let (li, lo) = a.region_means();
                assert!(li - lo >= cfg.contrast_margin, "seed {seed}: {li} vs {lo}");
            }
        }
    }

    #[test]
    fn rgb_pairs() {
        let cfg = GenConfig {
            channels: 3,
            ..GenConfig::easy(16)
        };
        let p = generate_pair(&cfg, 9).unwrap();
        assert_eq!(p.image.len(), 3 * 256);
        let png = encode_image_png(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        fs::write(&path, png).unwrap();
        let back = read_image_png(&path, 3).unwrap();
        for (a, b) in p.image.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn seeds_are_unique() {
        let s = pair_seeds(7, 640);
        let set: HashSet<_> = s.iter().collect();
        assert_eq!(set.len(), 640);
        assert_eq!(pair_seeds(7, 10), s[..10]);
    }

    #[test]
    fn dataset_roundtrip_and_collision() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let cfg = GenConfig::easy(16);
        let m = build_dataset(&cfg, 4, 2, 3, &root, false, None).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert!(build_dataset(&cfg, 4, 2, 3, &root, false, None).is_err());
        let ds = load_dataset(&root).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (4, 2));
        let mem = generate_dataset(&cfg, 4, 2, 3).unwrap();
        for (a, b) in ds.train.iter().zip(&mem.train) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.iter().zip(&b.image) {
                assert!((x - y).abs() <= 1.0 / 65535.0 + 1e-6);
            }
        }
        let again = regenerate(&m, &dir.path().join("copy"), false).unwrap();
        assert_eq!(again.entries, m.entries);
    }
}
