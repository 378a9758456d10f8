//! Seeded synthetic "cough-like" clips: decaying band-passed noise bursts
//! over a white noise floor, one frequency band per class.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, CANONICAL_RATE};
use crate::dataset::{split_stratified, ClipPool, LabeledClip, SplitPool};
use crate::seed::derive_seed;

pub const PEAK_LEVEL: f64 = 0.9;
pub const TEST_FRACTION: f64 = 0.2;
pub const MIN_PER_CLASS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid class spec `{class}`: {reason}")]
    InvalidSpec { class: String, reason: String },
    #[error("need at least {MIN_PER_CLASS} clips per class, got {0}")]
    TooFewPerClass(usize),
    #[error("center-frequency ranges of `{0}` and `{1}` overlap")]
    OverlappingBands(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub class_name: String,
    /// Inclusive.
    pub burst_count: (usize, usize),
    /// Burst center frequency range in Hz, `[lo, hi)`.
    pub center_hz: (f64, f64),
    pub bandwidth_hz: f64,
    /// Per-burst peak amplitude range, `[lo, hi)`.
    pub amplitude: (f64, f64),
    /// Amplitude envelope `exp(−decay_rate · t)`, t in seconds.
    pub decay_rate: f64,
    /// Standard deviation of the white noise floor before normalization.
    pub noise_floor: f64,
}

impl SynthClassSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let nyquist = CANONICAL_RATE as f64 / 2.0;
        let fail = |reason: String| {
            Err(SynthError::InvalidSpec {
                class: self.class_name.clone(),
                reason,
            })
        };
        let (lo, hi) = self.center_hz;
        if !(lo > 0.0 && lo <= hi && hi < nyquist) {
            return fail(format!("center range [{lo}, {hi}) must lie inside (0, {nyquist})"));
        }
        let (a_lo, a_hi) = self.amplitude;
        if !(a_lo > 0.0 && a_lo < a_hi && a_hi.is_finite()) {
            return fail(format!("amplitude range [{a_lo}, {a_hi}) must be positive and non-empty"));
        }
        if self.burst_count.0 > self.burst_count.1 {
            return fail("burst_count minimum exceeds maximum".into());
        }
        if !(self.bandwidth_hz > 0.0 && self.decay_rate > 0.0 && self.noise_floor >= 0.0) {
            return fail("bandwidth and decay must be positive, noise floor non-negative".into());
        }
        Ok(())
    }
}

fn class(name: &str, center_hz: (f64, f64)) -> SynthClassSpec {
    SynthClassSpec {
        class_name: name.into(),
        burst_count: (1, 3),
        center_hz,
        bandwidth_hz: 1200.0,
        amplitude: (0.1, 1.0),
        decay_rate: 18.0,
        noise_floor: 0.05,
    }
}

/// Three adjacent, non-overlapping bands. Wide bursts, a tenfold amplitude
/// range and a visible noise floor keep one-shot accuracy well below
/// saturation so that larger K has room to help.
pub fn default_classes() -> Vec<SynthClassSpec> {
    vec![
        class("low-band", (300.0, 1100.0)),
        class("mid-band", (1100.0, 2300.0)),
        class("high-band", (2300.0, 4200.0)),
    ]
}

pub fn check_disjoint(specs: &[SynthClassSpec]) -> Result<(), SynthError> {
    for (i, a) in specs.iter().enumerate() {
        a.validate()?;
        for b in &specs[i + 1..] {
            if a.center_hz.0 < b.center_hz.1 && b.center_hz.0 < a.center_hz.1 {
                return Err(SynthError::OverlappingBands(
                    a.class_name.clone(),
                    b.class_name.clone(),
                ));
            }
        }
    }
    Ok(())
}

/// RBJ band-pass biquad (0 dB peak gain).
struct BandPass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl BandPass {
    fn new(center: f64, bandwidth: f64, rate: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * center / rate;
        let q = center / bandwidth;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn apply(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b0 * *v + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// One second at the canonical rate. Silence (no bursts, zero floor) is
/// returned as zeros without normalization.
pub fn generate_clip(spec: &SynthClassSpec, seed: u64) -> Result<AudioClip, SynthError> {
    spec.validate()?;
    let rate = CANONICAL_RATE as f64;
    let n = CANONICAL_RATE as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];
    let bursts = rng.random_range(spec.burst_count.0..=spec.burst_count.1);
    for _ in 0..bursts {
        let onset = rng.random_range(0..(n * 4 / 5));
        let center = rng.random_range(spec.center_hz.0..spec.center_hz.1.max(spec.center_hz.0 + 1e-9));
        let amplitude = rng.random_range(spec.amplitude.0..spec.amplitude.1);
        let mut burst: Vec<f64> = (onset..n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        BandPass::new(center, spec.bandwidth_hz, rate).apply(&mut burst);
        for (k, v) in burst.iter().enumerate() {
            out[onset + k] += amplitude * (-spec.decay_rate * k as f64 / rate).exp() * v;
        }
    }
    if spec.noise_floor > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_floor * z;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = PEAK_LEVEL / peak;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(AudioClip::new(out, CANONICAL_RATE).expect("finite samples at the canonical rate"))
}

/// `n_per_class` clips for each spec, ids `<class>/<index>`, seeds derived
/// per class and clip.
pub fn generate_pool(
    specs: &[SynthClassSpec],
    n_per_class: usize,
    seed: u64,
) -> Result<ClipPool, SynthError> {
    check_disjoint(specs)?;
    let mut items = Vec::with_capacity(specs.len() * n_per_class);
    for (label, spec) in specs.iter().enumerate() {
        for i in 0..n_per_class {
            let clip = generate_clip(spec, derive_seed(seed, &spec.class_name, i as u64))?;
            items.push(LabeledClip {
                id: format!("{}/{i:05}", spec.class_name),
                class: label,
                clip,
            });
        }
    }
    Ok(ClipPool {
        class_names: specs.iter().map(|s| s.class_name.clone()).collect(),
        items,
    })
}

/// The default three classes with a stratified 80/20 split.
pub fn generate_dataset(n_per_class: usize, seed: u64) -> Result<SplitPool, SynthError> {
    generate_split(&default_classes(), n_per_class, seed)
}

pub fn generate_split(
    specs: &[SynthClassSpec],
    n_per_class: usize,
    seed: u64,
) -> Result<SplitPool, SynthError> {
    if n_per_class < MIN_PER_CLASS {
        return Err(SynthError::TooFewPerClass(n_per_class));
    }
    let pool = generate_pool(specs, n_per_class, seed)?;
    Ok(split_stratified(&pool, TEST_FRACTION, derive_seed(seed, "split", 0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{self, FeatureParams};

    #[test]
    fn deterministic_and_peak_normalized() {
        let spec = &default_classes()[1];
        let a = generate_clip(spec, 7).unwrap();
        assert_eq!(a, generate_clip(spec, 7).unwrap());
        assert_ne!(a, generate_clip(spec, 8).unwrap());
        assert_eq!(a.len(), 22050);
        let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK_LEVEL).abs() < 1e-12);
    }

    #[test]
    fn silence_stays_zero() {
        let spec = SynthClassSpec {
            burst_count: (0, 0),
            noise_floor: 0.0,
            ..default_classes()[0].clone()
        };
        let c = generate_clip(&spec, 1).unwrap();
        assert!(c.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_validation() {
        let mut s = default_classes()[0].clone();
        s.center_hz = (0.0, 100.0);
        assert!(s.validate().is_err());
        s.center_hz = (100.0, 12000.0);
        assert!(s.validate().is_err());
        let mut specs = default_classes();
        specs[1].center_hz = (1000.0, 2000.0);
        assert!(matches!(check_disjoint(&specs), Err(SynthError::OverlappingBands(..))));
        assert!(check_disjoint(&default_classes()).is_ok());
    }

    fn band_centroid(clip: &AudioClip) -> f64 {
        let p = FeatureParams::default();
        let g = features::log_mel(clip, &p).unwrap();
        // energy-weighted mean band index over the linear mel power
        let (mut num, mut den) = (0.0, 0.0);
        for b in 0..g.rows() {
            let e: f64 = g.row(b).iter().map(|v| v.exp()).sum();
            num += b as f64 * e;
            den += e;
        }
        num / den
    }

    #[test]
    fn low_band_centroid_below_high_band() {
        let classes = default_classes();
        for seed in 0..50 {
            let low = band_centroid(&generate_clip(&classes[0], seed).unwrap());
            let high = band_centroid(&generate_clip(&classes[2], seed).unwrap());
            assert!(low < high, "seed {seed}: {low} vs {high}");
        }
    }

    #[test]
    fn dataset_split_sizes_and_disjoint_ids() {
        let s = generate_dataset(5, 3).unwrap();
        assert_eq!(s.train.class_counts(), vec![4, 4, 4]);
        assert_eq!(s.test.class_counts(), vec![1, 1, 1]);
        let ids: std::collections::HashSet<_> = s.train.items.iter().map(|i| i.id.clone()).collect();
        assert!(s.test.items.iter().all(|i| !ids.contains(&i.id)));
        assert_eq!(generate_dataset(4, 3), Err(SynthError::TooFewPerClass(4)));
    }

    /// Share of the clip's linear mel energy in each band; invariant to the
    /// random burst amplitude.
    fn band_profile(clip: &AudioClip) -> Vec<f64> {
        let g = features::log_mel(clip, &FeatureParams::default()).unwrap();
        let energy: Vec<f64> = (0..g.rows()).map(|b| g.row(b).iter().map(|v| v.exp()).sum()).collect();
        let total: f64 = energy.iter().sum();
        energy.iter().map(|e| e / total).collect()
    }

    #[test]
    fn default_classes_nearest_centroid_separable() {
        let split = generate_dataset(100, 11).unwrap();
        let n_classes = split.train.class_names.len();
        let mut centroids = vec![vec![0.0; 128]; n_classes];
        for item in &split.train.items {
            for (c, v) in centroids[item.class].iter_mut().zip(band_profile(&item.clip)) {
                *c += v / 80.0;
            }
        }
        assert_eq!(split.test.len(), 60);
        let correct = split
            .test
            .items
            .iter()
            .filter(|item| {
                let f = band_profile(&item.clip);
                let nearest = (0..n_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = f.iter().zip(&centroids[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = f.iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == item.class
            })
            .count();
        assert!(correct >= 54, "nearest-centroid accuracy {correct}/60");
    }
}
