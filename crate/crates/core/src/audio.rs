//! Audio ingestion: WAV decoding and encoding, band-limited resampling and
//! duration normalization.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Canonical sample rate of the feature pipeline.
pub const CANONICAL_RATE: u32 = 22_050;

/// Half-width of the windowed-sinc interpolation kernel, in input samples.
pub const SINC_TAPS_PER_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV header: field `{field}`: {detail}")]
    Malformed { field: &'static str, detail: String },

    #[error("unsupported WAV encoding: field `{field}` = {value}")]
    Unsupported { field: &'static str, value: u32 },

    #[error("sample rate must be positive, got {0}")]
    InvalidRate(u32),

    #[error("duration must be positive, got {0} s")]
    InvalidDuration(f64),

    #[error("clip has no samples")]
    Empty,

    #[error("clip contains a non-finite sample at index {0}")]
    NonFinite(usize),
}

/// A mono clip. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav(&bytes)
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decodes an in-memory WAV image. Chunks other than `fmt ` and `data` are
/// skipped wherever they appear.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::Malformed {
            field: "riff",
            detail: format!("file is {} bytes, shorter than a RIFF header", bytes.len()),
        });
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::Malformed {
            field: "riff",
            detail: "missing RIFF magic".into(),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Malformed {
            field: "wave",
            detail: "RIFF form type is not WAVE".into(),
        });
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > bytes.len() {
                    return Err(AudioError::Malformed {
                        field: "fmt",
                        detail: format!("chunk size {size} is invalid"),
                    });
                }
                let mut format = read_u16(bytes, body);
                if format == WAVE_FORMAT_EXTENSIBLE && size >= 26 {
                    // sub-format GUID starts with the plain format tag
                    format = read_u16(bytes, body + 24);
                }
                fmt = Some(FmtChunk {
                    format,
                    channels: read_u16(bytes, body + 2),
                    sample_rate: read_u32(bytes, body + 4),
                    bits: read_u16(bytes, body + 14),
                });
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| AudioError::Malformed {
                    field: "fmt",
                    detail: "data chunk precedes fmt chunk".into(),
                })?;
                if body + size > bytes.len() {
                    return Err(AudioError::Malformed {
                        field: "data",
                        detail: format!(
                            "chunk declares {size} bytes but only {} remain",
                            bytes.len() - body
                        ),
                    });
                }
                return decode_samples(&fmt, &bytes[body..body + size]);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(AudioError::Malformed {
        field: "data",
        detail: "no data chunk found".into(),
    })
}

fn decode_samples(fmt: &FmtChunk, data: &[u8]) -> Result<AudioClip, AudioError> {
    if fmt.channels != 1 && fmt.channels != 2 {
        return Err(AudioError::Unsupported {
            field: "channels",
            value: fmt.channels as u32,
        });
    }
    if fmt.sample_rate == 0 {
        return Err(AudioError::Malformed {
            field: "sample_rate",
            detail: "sample rate is zero".into(),
        });
    }
    let channels = fmt.channels as usize;
    let decoded: Vec<f64> = match (fmt.format, fmt.bits) {
        (WAVE_FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (WAVE_FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (WAVE_FORMAT_PCM, bits) | (WAVE_FORMAT_IEEE_FLOAT, bits) => {
            return Err(AudioError::Unsupported {
                field: "bits_per_sample",
                value: bits as u32,
            })
        }
        (format, _) => {
            return Err(AudioError::Unsupported {
                field: "audio_format",
                value: format as u32,
            })
        }
    };
    let frame_count = decoded.len() / channels;
    if frame_count == 0 {
        return Err(AudioError::Malformed {
            field: "data",
            detail: "data chunk holds no complete frame".into(),
        });
    }
    let samples: Vec<f64> = decoded
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, fmt.sample_rate)
}

/// Encodes a clip as mono 16-bit PCM. Samples are clamped to [-1, 1].
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn save_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    fs::write(path, encode_wav_pcm16(clip)).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel spanning
/// [`SINC_TAPS_PER_SIDE`] input samples either side of each output instant.
/// When downsampling the kernel cutoff drops to the output Nyquist rate.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let in_rate = clip.sample_rate as f64;
    let ratio = target_rate as f64 / in_rate;
    let out_len = ((clip.len() as f64 * ratio).round() as usize).max(1);
    let cutoff = ratio.min(1.0);
    let half_width = SINC_TAPS_PER_SIDE as f64;
    let x = &clip.samples;
    let n_in = x.len() as isize;

    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as isize;
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let u = t - k as f64;
                let window = 0.5 * (1.0 + (PI * u / half_width).cos());
                acc += x[k as usize] * cutoff * sinc(cutoff * u) * window;
            }
            acc
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
    })
}

/// Trims (keeping the head) or zero-pads a clip to exactly
/// `seconds × sample_rate` samples.
pub fn normalize_duration(clip: &AudioClip, seconds: f64) -> Result<AudioClip, AudioError> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(AudioError::InvalidDuration(seconds));
    }
    if clip.is_empty() {
        return Err(AudioError::Empty);
    }
    let target = (seconds * clip.sample_rate as f64).round() as usize;
    if target == 0 {
        return Err(AudioError::InvalidDuration(seconds));
    }
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

/// Resamples to the canonical rate and normalizes to one second.
pub fn prepare_clip(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    let resampled = resample(clip, CANONICAL_RATE)?;
    normalize_duration(&resampled, 1.0)
}
