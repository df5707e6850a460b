//! Patch splitting, per-patch discrete Fourier transforms, amplitude/phase
//! spectra, residual analysis between image pairs, and spectrum rendering.
//!
//! The forward transform carries the 1/P² factor:
//!
//!   F(u,v) = (1/P²) ΣΣ f(x,y) · exp(−2πj(ux+vy)/P)
//!
//! so the DC bin of a patch equals its mean value. All consumers (Parseval
//! checks, embeddings, renderers) assume this normalization.

use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("image extents {h}x{w} are not divisible by patch size {p}")]
    Indivisible { h: usize, w: usize, p: usize },
    #[error("patch layouts differ: {lhs} patches of {lp}x{lp} vs {rhs} patches of {rp}x{rp}")]
    Mismatch {
        lhs: usize,
        lp: usize,
        rhs: usize,
        rp: usize,
    },
}

/// Non-overlapping P×P tiles of a grayscale image, raster order, values
/// scaled to [0,1].
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Per-patch amplitude and phase spectra.
#[derive(Debug, Clone)]
pub struct PatchSpectra {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub amplitude: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
}

impl PatchSpectra {
    pub fn len(&self) -> usize {
        self.amplitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitude.is_empty()
    }
}

/// Per-patch mean absolute spectral residuals between two images, plus
/// tampered/untouched group means when a patch mask is supplied.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub grid_h: usize,
    pub grid_w: usize,
    pub amp: Vec<f64>,
    pub phase: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub group: Option<GroupStats>,
}

#[derive(Debug, Clone, Copy)]
pub struct GroupStats {
    pub tampered_amp: f64,
    pub untouched_amp: f64,
    pub tampered_phase: f64,
    pub untouched_phase: f64,
}

impl ResidualReport {
    /// Index of the patch with the largest amplitude residual.
    pub fn argmax_amp(&self) -> usize {
        self.amp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

pub fn split_patches(gray: &Image, patch: usize) -> Result<PatchGrid, SpectralError> {
    assert_eq!(gray.channels, 1, "split_patches expects grayscale input");
    if patch == 0 || gray.height % patch != 0 || gray.width % patch != 0 {
        return Err(SpectralError::Indivisible {
            h: gray.height,
            w: gray.width,
            p: patch,
        });
    }
    let grid_h = gray.height / patch;
    let grid_w = gray.width / patch;
    let mut patches = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut buf = Vec::with_capacity(patch * patch);
            for y in 0..patch {
                for x in 0..patch {
                    buf.push(gray.get(gy * patch + y, gx * patch + x, 0) as f64 / 255.0);
                }
            }
            patches.push(buf);
        }
    }
    Ok(PatchGrid {
        patch,
        grid_h,
        grid_w,
        patches,
    })
}

/// 2D DFT of one P×P patch via row-column FFTs, scaled by 1/P².
pub fn dft2(patch: &[f64], p: usize) -> Vec<Complex64> {
    debug_assert_eq!(patch.len(), p * p);
    let mut buf: Vec<Complex64> = patch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(p);
    for row in buf.chunks_exact_mut(p) {
        fft.process(row);
    }
    let mut t = transpose_c(&buf, p);
    for row in t.chunks_exact_mut(p) {
        fft.process(row);
    }
    let mut out = transpose_c(&t, p);
    let scale = 1.0 / (p * p) as f64;
    for v in out.iter_mut() {
        *v *= scale;
    }
    out
}

fn transpose_c(buf: &[Complex64], p: usize) -> Vec<Complex64> {
    let mut t = vec![Complex64::default(); p * p];
    for i in 0..p {
        for j in 0..p {
            t[j * p + i] = buf[i * p + j];
        }
    }
    t
}

/// Amplitude |F| and phase atan2(Im, Re) of a spectrum. The phase is 0 at
/// the R=I=0 singularity and folded onto (−π, π].
pub fn amp_phase(f: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    let mut amp = Vec::with_capacity(f.len());
    let mut phase = Vec::with_capacity(f.len());
    for v in f {
        amp.push(v.norm());
        let ps = if v.re == 0.0 && v.im == 0.0 {
            0.0
        } else {
            let a = v.im.atan2(v.re);
            if a <= -std::f64::consts::PI {
                std::f64::consts::PI
            } else {
                a
            }
        };
        phase.push(ps);
    }
    (amp, phase)
}

/// Splits, transforms, and decomposes every patch of a grayscale image.
pub fn patch_spectra(gray: &Image, patch: usize) -> Result<PatchSpectra, SpectralError> {
    let grid = split_patches(gray, patch)?;
    let mut amplitude = Vec::with_capacity(grid.len());
    let mut phase = Vec::with_capacity(grid.len());
    for buf in &grid.patches {
        let f = dft2(buf, patch);
        let (a, p) = amp_phase(&f);
        amplitude.push(a);
        phase.push(p);
    }
    Ok(PatchSpectra {
        patch,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        amplitude,
        phase,
    })
}

/// Difference of two angles wrapped onto (−π, π].
fn wrap_angle(d: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (d + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w = PI;
    }
    w
}

pub fn residual_report(
    real: &PatchSpectra,
    fake: &PatchSpectra,
    mask: Option<&[bool]>,
) -> Result<ResidualReport, SpectralError> {
    if real.patch != fake.patch || real.len() != fake.len() {
        return Err(SpectralError::Mismatch {
            lhs: real.len(),
            lp: real.patch,
            rhs: fake.len(),
            rp: fake.patch,
        });
    }
    let bins = (real.patch * real.patch) as f64;
    let amp: Vec<f64> = real
        .amplitude
        .iter()
        .zip(&fake.amplitude)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / bins)
        .collect();
    let phase: Vec<f64> = real
        .phase
        .iter()
        .zip(&fake.phase)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| wrap_angle(x - y).abs())
                .sum::<f64>()
                / bins
        })
        .collect();

    let group = mask.map(|m| {
        debug_assert_eq!(m.len(), amp.len());
        let mean_where = |vals: &[f64], want: bool| {
            let picked: Vec<f64> = vals
                .iter()
                .zip(m)
                .filter(|(_, &t)| t == want)
                .map(|(&v, _)| v)
                .collect();
            if picked.is_empty() {
                0.0
            } else {
                picked.iter().sum::<f64>() / picked.len() as f64
            }
        };
        GroupStats {
            tampered_amp: mean_where(&amp, true),
            untouched_amp: mean_where(&amp, false),
            tampered_phase: mean_where(&phase, true),
            untouched_phase: mean_where(&phase, false),
        }
    });

    Ok(ResidualReport {
        grid_h: real.grid_h,
        grid_w: real.grid_w,
        amp,
        phase,
        mask: mask.map(|m| m.to_vec()),
        group,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumView {
    Amplitude,
    Phase,
}

/// Renders per-patch spectra tiled in grid order. Amplitude is shown as
/// log(1+AS) with the DC bin shifted to the patch center, then min-max
/// scaled; phase maps (−π, π] linearly.
pub fn render_spectrum_map(spectra: &PatchSpectra, view: SpectrumView) -> Image {
    let values = match view {
        SpectrumView::Amplitude => log_tiles(&spectra.amplitude),
        SpectrumView::Phase => spectra.phase.clone(),
    };
    let tiles = shift_tiles(&values, spectra.patch);
    tile_to_image(&tiles, spectra, view == SpectrumView::Amplitude, false)
}

/// Per-bin residual between two spectra rendered tiled and value-inverted,
/// so brighter pixels mean smaller residuals.
pub fn render_residual_map(
    a: &PatchSpectra,
    b: &PatchSpectra,
    view: SpectrumView,
) -> Result<Image, SpectralError> {
    if a.patch != b.patch || a.len() != b.len() {
        return Err(SpectralError::Mismatch {
            lhs: a.len(),
            lp: a.patch,
            rhs: b.len(),
            rp: b.patch,
        });
    }
    let diff: Vec<Vec<f64>> = match view {
        SpectrumView::Amplitude => a
            .amplitude
            .iter()
            .zip(&b.amplitude)
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(u, v)| (u - v).abs().ln_1p())
                    .collect()
            })
            .collect(),
        SpectrumView::Phase => a
            .phase
            .iter()
            .zip(&b.phase)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| wrap_angle(u - v).abs()).collect())
            .collect(),
    };
    let tiles = shift_tiles(&diff, a.patch);
    Ok(tile_to_image(&tiles, a, true, true))
}

fn log_tiles(tiles: &[Vec<f64>]) -> Vec<Vec<f64>> {
    tiles
        .iter()
        .map(|t| t.iter().map(|&v| v.ln_1p()).collect())
        .collect()
}

/// Moves the DC bin to the tile center (circular shift by P/2 on both axes).
fn shift_tiles(tiles: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    let half = p / 2;
    tiles
        .iter()
        .map(|t| {
            let mut s = vec![0.0; p * p];
            for u in 0..p {
                for v in 0..p {
                    s[((u + half) % p) * p + (v + half) % p] = t[u * p + v];
                }
            }
            s
        })
        .collect()
}

fn tile_to_image(tiles: &[Vec<f64>], layout: &PatchSpectra, minmax: bool, invert: bool) -> Image {
    let p = layout.patch;
    let (gh, gw) = (layout.grid_h, layout.grid_w);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in tiles {
        for &v in t {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let scale = |v: f64| -> u8 {
        let x = if minmax {
            if span > 0.0 {
                (v - lo) / span
            } else {
                0.0
            }
        } else {
            // Phase view: linear map from (−π, π].
            (v + std::f64::consts::PI) / std::f64::consts::TAU
        };
        let byte = (x * 255.0).round().clamp(0.0, 255.0) as u8;
        if invert {
            255 - byte
        } else {
            byte
        }
    };
    let mut img = Image::zeros(gh * p, gw * p, 1);
    for (i, t) in tiles.iter().enumerate() {
        let (gy, gx) = (i / gw, i % gw);
        for y in 0..p {
            for x in 0..p {
                img.set(gy * p + y, gx * p + x, 0, scale(t[y * p + x]));
            }
        }
    }
    img
}

/// CSV rows `patch_index,row,col,amp_residual,phase_residual,tampered`,
/// with `-` in the tampered column when no mask was given.
pub fn residual_csv(report: &ResidualReport) -> String {
    let mut out = String::from("patch_index,row,col,amp_residual,phase_residual,tampered\n");
    for i in 0..report.amp.len() {
        let tampered = match &report.mask {
            Some(m) => {
                if m[i] {
                    "1"
                } else {
                    "0"
                }
            }
            None => "-",
        };
        out.push_str(&format!(
            "{},{},{},{:.9},{:.9},{}\n",
            i,
            i / report.grid_w,
            i % report.grid_w,
            report.amp[i],
            report.phase[i],
            tampered
        ));
    }
    out
}
