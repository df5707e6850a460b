//! Synthetic face-surrogate generation, ground-truth tampering, and
//! dataset manifests.
//!
//! Real surrogates are smooth seeded random fields plus a low-amplitude
//! fine noise that is common to all three channels. The two tamper
//! families are built to be separable by branch:
//!
//! * `upsample-artifact` mean-pools a region x2, re-upsamples it by zero
//!   insertion followed by a fixed 3x3 interpolation kernel, and blends the
//!   result back. The zero insertion plants periodic spectral replicas in
//!   the patch spectra while staying visually close to the original.
//! * `texture-swap` replaces the region's high-frequency residual with
//!   per-channel independent noise whose luminance-projected variance
//!   matches the original residual. The grayscale spectrum barely moves,
//!   but the cross-channel correlation structure does.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::image::{write_pnm, Image, PnmError};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image extents {h}x{w} are not divisible by patch size {p}")]
    Indivisible { h: usize, w: usize, p: usize },
    #[error("tamper region {spec:?} out of bounds for {h}x{w} image")]
    RegionOutOfBounds { spec: Region, h: usize, w: usize },
    #[error("tamper region {spec:?} smaller than one {p}x{p} patch")]
    RegionTooSmall { spec: Region, p: usize },
    #[error("tamper strength {0} outside (0, 1]")]
    BadStrength(f64),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pnm(#[from] PnmError),
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TamperKind {
    UpsampleArtifact,
    TextureSwap,
}

impl TamperKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TamperKind::UpsampleArtifact => "upsample-artifact",
            TamperKind::TextureSwap => "texture-swap",
        }
    }
}

impl FromStr for TamperKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upsample-artifact" => Ok(TamperKind::UpsampleArtifact),
            "texture-swap" => Ok(TamperKind::TextureSwap),
            other => Err(format!("unknown tamper kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TamperSpec {
    pub kind: TamperKind,
    pub region: Region,
    pub strength: f64,
}

impl TamperSpec {
    pub fn validate(&self, height: usize, width: usize, patch: usize) -> Result<(), DatasetError> {
        let r = self.region;
        if r.x + r.w > width || r.y + r.h > height || r.w == 0 || r.h == 0 {
            return Err(DatasetError::RegionOutOfBounds {
                spec: r,
                h: height,
                w: width,
            });
        }
        if r.w * r.h < patch * patch {
            return Err(DatasetError::RegionTooSmall { spec: r, p: patch });
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(DatasetError::BadStrength(self.strength));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_name(&self) -> String {
        format!("{}.manifest", self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub tamper: Option<TamperSpec>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub split: Split,
}

impl DatasetManifest {
    pub fn label_counts(&self) -> (usize, usize) {
        let fake = self.entries.iter().filter(|e| e.label == 1).count();
        (self.entries.len() - fake, fake)
    }
}

/// One entry per line: `<relative-path>\t<label>\t<kind|->\t<x,y,w,h|->\t<strength|->`.
pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    for e in &manifest.entries {
        match &e.tamper {
            Some(t) => {
                let r = t.region;
                out.push_str(&format!(
                    "{}\t{}\t{}\t{},{},{},{}\t{}\n",
                    e.path,
                    e.label,
                    t.kind.as_str(),
                    r.x,
                    r.y,
                    r.w,
                    r.h,
                    t.strength
                ));
            }
            None => out.push_str(&format!("{}\t{}\t-\t-\t-\n", e.path, e.label)),
        }
    }
    out
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, manifest_to_string(manifest))?;
    Ok(())
}

pub fn read_manifest(
    path: impl AsRef<Path>,
    split: Split,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| DatasetError::MalformedManifest {
            line: i + 1,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(&format!("expected 5 tab-separated columns, got {}", cols.len())));
        }
        let label: u8 = cols[1].parse().map_err(|_| bad("bad label"))?;
        if label > 1 {
            return Err(bad("label must be 0 or 1"));
        }
        let tamper = if cols[2] == "-" {
            None
        } else {
            let kind = TamperKind::from_str(cols[2]).map_err(|e| bad(&e))?;
            let nums: Vec<usize> = cols[3]
                .split(',')
                .map(|v| v.parse().map_err(|_| bad("bad region")))
                .collect::<Result<_, _>>()?;
            if nums.len() != 4 {
                return Err(bad("region needs x,y,w,h"));
            }
            let strength: f64 = cols[4].parse().map_err(|_| bad("bad strength"))?;
            Some(TamperSpec {
                kind,
                region: Region {
                    x: nums[0],
                    y: nums[1],
                    w: nums[2],
                    h: nums[3],
                },
                strength,
            })
        };
        entries.push(ManifestEntry {
            path: cols[0].to_string(),
            label,
            tamper,
        });
    }
    Ok(DatasetManifest {
        entries,
        seed,
        split,
    })
}

// ── Generation ──────────────────────────────────────────────────────────

/// Deterministic sub-seed derivation (splitmix64 over master, tag, index).
pub fn sub_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gaussian_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Separable box blur with replicated edges, one horizontal and one
/// vertical pass.
fn box_blur(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let k = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let xi = (x as isize + d).clamp(0, w as isize - 1) as usize;
                s += plane[y * w + xi];
            }
            tmp[y * w + x] = s / k;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let yi = (y as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[yi * w + x];
            }
            out[y * w + x] = s / k;
        }
    }
    out
}

/// Blurred Gaussian field standardized to zero mean, unit variance.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: usize, passes: usize) -> Vec<f64> {
    let mut plane = gaussian_plane(rng, h * w);
    for _ in 0..passes {
        plane = box_blur(&plane, h, w, radius);
    }
    let n = (h * w) as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    plane.iter().map(|&v| (v - mean) * inv).collect()
}

const TEMPLATE_AMP: f64 = 40.0;
const SMOOTH_AMP: f64 = 16.0;
const TINT_AMP: f64 = 7.0;
const FINE_AMP: f64 = 2.2;
/// Fixed stream for the shared structural template; every surrogate is a
/// variation of the same macro structure, the way aligned face crops are.
const TEMPLATE_SEED: u64 = 0x7E3A_11A7;

/// Smooth pseudo-face surrogate: a shared blurred template field plus a
/// seeded per-image field, per-channel smooth tints, and common-mode fine
/// noise. Deterministic per seed.
pub fn gen_real(height: usize, width: usize, patch: usize, seed: u64) -> Result<Image, DatasetError> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(DatasetError::Indivisible {
            h: height,
            w: width,
            p: patch,
        });
    }
    let mut template_rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let template = smooth_field(&mut template_rng, height, width, 4, 2);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lum = smooth_field(&mut rng, height, width, 4, 2);
    let tints: Vec<Vec<f64>> = (0..3)
        .map(|_| smooth_field(&mut rng, height, width, 4, 2))
        .collect();
    let fine = gaussian_plane(&mut rng, height * width);

    let mut pixels = Vec::with_capacity(height * width * 3);
    for i in 0..height * width {
        for tint in &tints {
            let v = 128.0
                + TEMPLATE_AMP * template[i]
                + SMOOTH_AMP * lum[i]
                + TINT_AMP * tint[i]
                + FINE_AMP * fine[i];
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(Image::new(height, width, 3, pixels))
}

fn plane_of(image: &Image, c: usize) -> Vec<f64> {
    image
        .pixels
        .chunks_exact(image.channels)
        .map(|px| px[c] as f64)
        .collect()
}

/// Applies a tamper to a copy of `image`. Pixels outside the region are
/// untouched; the result is deterministic in (image, spec, seed).
pub fn apply_tamper(image: &Image, spec: &TamperSpec, seed: u64) -> Result<Image, DatasetError> {
    assert_eq!(image.channels, 3, "tampering operates on RGB surrogates");
    spec.validate(image.height, image.width, 1)?;
    let mut out = image.clone();
    match spec.kind {
        TamperKind::UpsampleArtifact => upsample_artifact(image, &mut out, spec),
        TamperKind::TextureSwap => texture_swap(image, &mut out, spec, seed),
    }
    Ok(out)
}

/// Mean-pool x2, zero-insert, smooth with the fixed 3x3 interpolation
/// kernel, blend back with weight `strength`.
fn upsample_artifact(src: &Image, out: &mut Image, spec: &TamperSpec) {
    let r = spec.region;
    let s = spec.strength;
    // Odd extents lose their last row/col of processing, never of locality.
    let (rw, rh) = (r.w & !1usize, r.h & !1usize);
    if rw < 2 || rh < 2 {
        return;
    }
    let (pw, ph) = (rw / 2, rh / 2);
    for c in 0..3 {
        // Pooled region with one replicated ring so smoothing has support
        // at the region border.
        let mut pooled = vec![0.0; (ph + 2) * (pw + 2)];
        for py in 0..ph {
            for px in 0..pw {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += src.get(r.y + py * 2 + dy, r.x + px * 2 + dx, c) as f64;
                    }
                }
                pooled[(py + 1) * (pw + 2) + px + 1] = acc / 4.0;
            }
        }
        for px in 0..pw + 2 {
            pooled[px] = pooled[(pw + 2) + px.clamp(1, pw)];
            pooled[(ph + 1) * (pw + 2) + px] = pooled[ph * (pw + 2) + px.clamp(1, pw)];
        }
        for py in 0..ph + 2 {
            pooled[py * (pw + 2)] = pooled[py * (pw + 2) + 1];
            pooled[py * (pw + 2) + pw + 1] = pooled[py * (pw + 2) + pw];
        }

        // Zero insertion onto the padded double-resolution grid.
        let (uw, uh) = (2 * (pw + 2), 2 * (ph + 2));
        let mut up = vec![0.0; uh * uw];
        for py in 0..ph + 2 {
            for px in 0..pw + 2 {
                up[(py * 2) * uw + px * 2] = pooled[py * (pw + 2) + px];
            }
        }

        // 3x3 interpolation kernel [1 2 1; 2 4 2; 1 2 1] / 4.
        const K: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];
        for y in 0..rh {
            for x in 0..rw {
                let (cy, cx) = (y + 2, x + 2);
                let mut acc = 0.0;
                for (dy, krow) in K.iter().enumerate() {
                    for (dx, &kv) in krow.iter().enumerate() {
                        acc += kv * up[(cy + dy - 1) * uw + cx + dx - 1];
                    }
                }
                let orig = src.get(r.y + y, r.x + x, c) as f64;
                let v = (1.0 - s) * orig + s * acc;
                out.set(r.y + y, r.x + x, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Replace the region's high-frequency residual with per-channel
/// independent noise whose luminance-projected variance matches the
/// original residual's, scaled by `strength`.
fn texture_swap(src: &Image, out: &mut Image, spec: &TamperSpec, seed: u64) {
    let r = spec.region;
    let s = spec.strength;
    let (h, w) = (src.height, src.width);
    let planes: Vec<Vec<f64>> = (0..3).map(|c| plane_of(src, c)).collect();
    let blurred: Vec<Vec<f64>> = planes.iter().map(|p| box_blur(p, h, w, 2)).collect();

    // Region residual statistics per channel and in luminance.
    let mut var_c = [0.0f64; 3];
    let mut var_lum = 0.0f64;
    let n = (r.w * r.h) as f64;
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let mut lum_res = 0.0;
            for c in 0..3 {
                let res = planes[c][y * w + x] - blurred[c][y * w + x];
                var_c[c] += res * res;
                lum_res += LUMA[c] * res;
            }
            var_lum += lum_res * lum_res;
        }
    }
    for v in var_c.iter_mut() {
        *v /= n;
    }
    var_lum /= n;

    let denom: f64 = (0..3).map(|c| LUMA[c] * LUMA[c] * var_c[c]).sum();
    let k = if denom > 1e-12 {
        (var_lum / denom).sqrt()
    } else {
        1.0
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            for c in 0..3 {
                let res = planes[c][y * w + x] - blurred[c][y * w + x];
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * k * var_c[c].sqrt();
                let v = blurred[c][y * w + x] + (1.0 - s) * res + s * noise;
                out.set(y, x, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Patch-level ground-truth mask: a patch is tampered when its tile
/// intersects the region.
pub fn patch_mask(region: Region, height: usize, width: usize, patch: usize) -> Vec<bool> {
    let (gh, gw) = (height / patch, width / patch);
    let mut mask = vec![false; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let (py0, px0) = (gy * patch, gx * patch);
            let overlaps = px0 < region.x + region.w
                && region.x < px0 + patch
                && py0 < region.y + region.h
                && region.y < py0 + patch;
            mask[gy * gw + gx] = overlaps;
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub real: usize,
    pub fake: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Percentage of fakes that use the upsample-artifact kind.
    pub upsample_percent: u32,
    pub strength: f64,
    pub seed: u64,
    pub split: Split,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            real: 64,
            fake: 64,
            height: 64,
            width: 64,
            patch: 8,
            upsample_percent: 50,
            strength: 1.0,
            seed: 7,
            split: Split::Train,
        }
    }
}

/// Generates a balanced split on disk: PNM images plus `<split>.manifest`.
/// Byte-identical for identical configs.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    if cfg.real == 0 || cfg.fake == 0 {
        return Err(DatasetError::InvalidConfig(
            "real and fake counts must be positive".into(),
        ));
    }
    if cfg.upsample_percent > 100 {
        return Err(DatasetError::InvalidConfig(format!(
            "upsample mix {}% outside 0..=100",
            cfg.upsample_percent
        )));
    }
    if !(cfg.strength > 0.0 && cfg.strength <= 1.0) {
        return Err(DatasetError::BadStrength(cfg.strength));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut entries = Vec::with_capacity(cfg.real + cfg.fake);
    for i in 0..cfg.real {
        let name = format!("{}_real_{:04}.pnm", cfg.split.as_str(), i);
        let img = gen_real(cfg.height, cfg.width, cfg.patch, sub_seed(cfg.seed, 1, i as u64))?;
        write_pnm(&img, dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            label: 0,
            tamper: None,
        });
    }

    // Pristine sources of the fakes go to a side directory so the split
    // itself stays exactly real+fake images plus the manifest; the analyze
    // workflow diffs a fake against its source.
    let sources = dir.join("sources");
    fs::create_dir_all(&sources)?;

    let upsample_quota = (cfg.fake as u64 * cfg.upsample_percent as u64 + 50) / 100;
    let mut upsample_used = 0u64;
    for i in 0..cfg.fake {
        let name = format!("{}_fake_{:04}.pnm", cfg.split.as_str(), i);
        let base = gen_real(cfg.height, cfg.width, cfg.patch, sub_seed(cfg.seed, 2, i as u64))?;
        write_pnm(&base, sources.join(&name))?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3, i as u64));

        // Round-robin toward the quota keeps |#upsample - #texture| <= 1
        // at a 50/50 mix.
        let remaining = (cfg.fake - i) as u64;
        let kind = if upsample_used < upsample_quota
            && (upsample_quota - upsample_used) * 2 >= remaining
        {
            upsample_used += 1;
            TamperKind::UpsampleArtifact
        } else if upsample_used < upsample_quota && i % 2 == 0 {
            upsample_used += 1;
            TamperKind::UpsampleArtifact
        } else {
            TamperKind::TextureSwap
        };

        let spec = sample_tamper_spec(&mut rng, cfg, kind);
        let img = apply_tamper(&base, &spec, sub_seed(cfg.seed, 4, i as u64))?;
        write_pnm(&img, dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            label: 1,
            tamper: Some(spec),
        });
    }

    let manifest = DatasetManifest {
        entries,
        seed: cfg.seed,
        split: cfg.split,
    };
    write_manifest(&manifest, dir.join(cfg.split.manifest_name()))?;
    Ok(manifest)
}

fn sample_tamper_spec(rng: &mut ChaCha8Rng, cfg: &DatasetConfig, kind: TamperKind) -> TamperSpec {
    let p = cfg.patch;
    // Manipulations cover a substantial part of the crop, the way face
    // swaps and reenactments do: three to six patch widths per side.
    let min_side = (3 * p).min(cfg.width.min(cfg.height) / 2).max(p);
    let max_w = (6 * p).min(cfg.width * 3 / 4).max(min_side);
    let max_h = (6 * p).min(cfg.height * 3 / 4).max(min_side);
    // Even extents so x2 pooling tiles the region exactly.
    let w = ((rng.gen_range(min_side..=max_w) + 1) & !1usize).min(cfg.width);
    let h = ((rng.gen_range(min_side..=max_h) + 1) & !1usize).min(cfg.height);
    let x = rng.gen_range(0..=cfg.width - w);
    let y = rng.gen_range(0..=cfg.height - h);
    TamperSpec {
        kind,
        region: Region { x, y, w, h },
        strength: cfg.strength,
    }
}

pub fn load_image(dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<Image, DatasetError> {
    let path: PathBuf = dir.as_ref().join(&entry.path);
    Ok(crate::image::read_pnm(path)?)
}
