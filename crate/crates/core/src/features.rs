//! Log-mel spectrogram features.
//!
//! Pipeline: Hann-windowed power STFT with reflect padding, HTK mel
//! filterbank, `ln(x + 1e-10)`, per-spectrogram standardization, then a
//! bilinear resize to the network input size.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{self, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("n_fft must be a power of two, got {0}")]
    FftSizeNotPowerOfTwo(usize),
    #[error("hop must satisfy 0 < hop <= n_fft, got hop {hop} with n_fft {n_fft}")]
    InvalidHop { hop: usize, n_fft: usize },
    #[error("clip of {len} samples is too short for n_fft {n_fft} with reflect padding")]
    ClipTooShort { len: usize, n_fft: usize },
    #[error("f_max {f_max} Hz exceeds the Nyquist frequency {nyquist} Hz")]
    FMaxAboveNyquist { f_max: f64, nyquist: f64 },
    #[error("frequency range must satisfy 0 <= f_min < f_max, got [{f_min}, {f_max}]")]
    InvalidFrequencyRange { f_min: f64, f_max: f64 },
    #[error("n_mels must be at least 1")]
    NoMelBands,
    #[error("mel band {band} covers no FFT bin; use fewer bands or a larger n_fft")]
    EmptyMelBand { band: usize },
    #[error("grid dimensions must be non-zero, got {rows}x{cols}")]
    EmptyGrid { rows: usize, cols: usize },
}

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "grid data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_argmax(&self, c: usize) -> usize {
        (0..self.rows)
            .fold((0, f64::NEG_INFINITY), |best, r| {
                let v = self.get(r, c);
                if v > best.1 {
                    (r, v)
                } else {
                    best
                }
            })
            .0
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        (self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// (height, width) after resizing.
    pub target_size: (usize, usize),
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 11_025.0,
            target_size: (224, 224),
        }
    }
}

impl FeatureParams {
    pub fn validate(&self, sample_rate: u32) -> Result<(), FeatureError> {
        if !self.n_fft.is_power_of_two() {
            return Err(FeatureError::FftSizeNotPowerOfTwo(self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(FeatureError::InvalidHop {
                hop: self.hop,
                n_fft: self.n_fft,
            });
        }
        if self.n_mels == 0 {
            return Err(FeatureError::NoMelBands);
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(FeatureError::InvalidFrequencyRange {
                f_min: self.f_min,
                f_max: self.f_max,
            });
        }
        let nyquist = sample_rate as f64 / 2.0;
        if self.f_max > nyquist {
            return Err(FeatureError::FMaxAboveNyquist {
                f_max: self.f_max,
                nyquist,
            });
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(FeatureError::EmptyGrid {
                rows: self.target_size.0,
                cols: self.target_size.1,
            });
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// Power spectrogram, shape `[n_fft/2 + 1, 1 + len/hop]`.
pub fn stft_power(clip: &AudioClip, n_fft: usize, hop: usize) -> Result<Grid, FeatureError> {
    if !n_fft.is_power_of_two() {
        return Err(FeatureError::FftSizeNotPowerOfTwo(n_fft));
    }
    if hop == 0 || hop > n_fft {
        return Err(FeatureError::InvalidHop { hop, n_fft });
    }
    let pad = n_fft / 2;
    if clip.len() <= pad {
        return Err(FeatureError::ClipTooShort {
            len: clip.len(),
            n_fft,
        });
    }
    let padded = reflect_pad(&clip.samples, pad);
    let n_frames = 1 + clip.len() / hop;
    let n_bins = n_fft / 2 + 1;
    let window = hann_window(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut out = Grid::zeros(n_bins, n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in 0..n_frames {
        let start = frame * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (bin, c) in buf.iter().take(n_bins).enumerate() {
            out.set(bin, frame, c.norm_sqr());
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` bands, plus the two outer corners:
/// `n_mels + 2` points equally spaced on the mel axis.
pub fn mel_band_edges(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK-mel filterbank, shape `[n_mels, n_fft/2 + 1]`. Each row is
/// scaled so its largest sampled weight is exactly 1.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Grid, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::NoMelBands);
    }
    if !(f_min >= 0.0 && f_min < f_max) {
        return Err(FeatureError::InvalidFrequencyRange { f_min, f_max });
    }
    let nyquist = rate as f64 / 2.0;
    if f_max > nyquist {
        return Err(FeatureError::FMaxAboveNyquist { f_max, nyquist });
    }
    let n_bins = n_fft / 2 + 1;
    let edges = mel_band_edges(n_mels, f_min, f_max);
    let bin_hz = rate as f64 / n_fft as f64;
    let mut fb = Grid::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut peak = 0.0f64;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb.set(m, k, w);
            peak = peak.max(w);
        }
        if peak <= 0.0 {
            return Err(FeatureError::EmptyMelBand { band: m });
        }
        for k in 0..n_bins {
            let w = fb.get(m, k);
            fb.set(m, k, w / peak);
        }
    }
    Ok(fb)
}

fn matmul(a: &Grid, b: &Grid) -> Grid {
    assert_eq!(a.cols, b.rows);
    let mut out = Grid::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let w = a.get(i, k);
            if w == 0.0 {
                continue;
            }
            let src = b.row(k);
            let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// Mel power spectrogram followed by `ln(x + 1e-10)`; shape `[n_mels, n_frames]`.
pub fn log_mel(clip: &AudioClip, params: &FeatureParams) -> Result<Grid, FeatureError> {
    params.validate(clip.sample_rate)?;
    let power = stft_power(clip, params.n_fft, params.hop)?;
    let fb = mel_filterbank(
        params.n_mels,
        params.n_fft,
        clip.sample_rate,
        params.f_min,
        params.f_max,
    )?;
    let mut mel = matmul(&fb, &power);
    for v in mel.data.iter_mut() {
        *v = (*v + LOG_FLOOR).ln();
    }
    Ok(mel)
}

/// Zero-mean, unit-variance scaling. A grid whose standard deviation is below
/// [`STD_FLOOR`] becomes all zeros.
pub fn standardize(grid: &Grid) -> Grid {
    let mean = grid.mean();
    let std = grid.std();
    let data = if std < STD_FLOOR {
        vec![0.0; grid.data.len()]
    } else {
        grid.data.iter().map(|v| (v - mean) / std).collect()
    };
    Grid {
        rows: grid.rows,
        cols: grid.cols,
        data,
    }
}

/// Bilinear interpolation with half-pixel centers (align-corners off).
pub fn resize_bilinear(grid: &Grid, out_h: usize, out_w: usize) -> Result<Grid, FeatureError> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(FeatureError::EmptyGrid {
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(FeatureError::EmptyGrid {
            rows: out_h,
            cols: out_w,
        });
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, grid.rows);
    let xs = axis(out_w, grid.cols);
    let mut out = Grid::zeros(out_h, out_w);
    for (r, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (c, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bottom = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            out.set(r, c, top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// A standardized, resized log-mel spectrogram ready for the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// Network input, `target_size` in shape.
    pub values: Grid,
    /// Mel band count before resizing.
    pub n_mels: usize,
    /// STFT frame count before resizing.
    pub n_frames: usize,
    pub params: FeatureParams,
}

/// Standardized log-mel grid at native resolution (before the resize).
pub fn standardized_log_mel(clip: &AudioClip, params: &FeatureParams) -> Result<Grid, FeatureError> {
    Ok(standardize(&log_mel(clip, params)?))
}

pub fn mel_spectrogram(
    clip: &AudioClip,
    params: &FeatureParams,
) -> Result<MelSpectrogram, FeatureError> {
    let native = standardized_log_mel(clip, params)?;
    let (h, w) = params.target_size;
    Ok(MelSpectrogram {
        values: resize_bilinear(&native, h, w)?,
        n_mels: native.rows,
        n_frames: native.cols,
        params: params.clone(),
    })
}

/// Writes a grid as CSV, one row per line, values with 9 significant digits.
pub fn write_grid_csv<W: Write>(grid: &Grid, mut out: W) -> io::Result<()> {
    let mut line = String::new();
    for r in 0..grid.rows {
        line.clear();
        for (c, v) in grid.row(r).iter().enumerate() {
            if c > 0 {
                line.push(',');
            }
            write!(line, "{v:.8e}").expect("writing to a String cannot fail");
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Writes a grid as a binary 8-bit PGM, min-max scaled. Row 0 of the grid is
/// drawn at the bottom so low frequencies sit low in the image.
pub fn write_grid_pgm<W: Write>(grid: &Grid, mut out: W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", grid.cols, grid.rows)?;
    let (lo, hi) = (grid.min(), grid.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = Vec::with_capacity(grid.data.len());
    for r in (0..grid.rows).rev() {
        bytes.extend(
            grid.row(r)
                .iter()
                .map(|v| (((v - lo) / span) * 255.0).round() as u8),
        );
    }
    out.write_all(&bytes)
}

/// Stacks equally sized grids into a mosaic: `layout[row][col]` indexes `tiles`.
pub fn tile_grids(tiles: &[&Grid], layout: &[Vec<usize>]) -> Grid {
    let (th, tw) = tiles[0].shape();
    let n_rows = layout.len();
    let n_cols = layout.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Grid::zeros(n_rows * th, n_cols * tw);
    for (lr, row) in layout.iter().enumerate() {
        for (lc, &idx) in row.iter().enumerate() {
            let tile = tiles[idx];
            for r in 0..th {
                // mosaic rows run top-down while PGM output flips vertically
                let dst_r = (n_rows - 1 - lr) * th + r;
                for c in 0..tw {
                    out.set(dst_r, lc * tw + c, tile.get(r, c));
                }
            }
        }
    }
    out
}
