//! Synthetic band-limited corpus for desk-scale experiments.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::manifest::{Manifest, ManifestRow};
use super::wav::write_wav;
use super::worker_pool;
use crate::error::{Error, Result};
use crate::rng::{derived_seed, rng_from_seed};

/// Bands used for up to three classes at 16 kHz.
pub const DEFAULT_BANDS: [(f64, f64); 3] = [(200.0, 400.0), (800.0, 1200.0), (2000.0, 3000.0)];

const TONES_PER_CLIP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub snr_db: f64,
    /// Half-open `[lo, hi)` Hz band per class; `None` picks defaults.
    pub bands: Option<Vec<(f64, f64)>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            clips_per_class: 60,
            clip_seconds: 2.0,
            sample_rate: 16_000,
            seed: 1,
            snr_db: 10.0,
            bands: None,
        }
    }
}

impl SynthSpec {
    /// Class bands: the explicit list, the three defaults, or for more
    /// classes disjoint log-spaced bands between 200 Hz and 0.45·rate.
    pub fn class_bands(&self) -> Result<Vec<(f64, f64)>> {
        if self.classes < 2 {
            return Err(Error::Param(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let bands = match &self.bands {
            Some(b) => {
                if b.len() != self.classes {
                    return Err(Error::Param(format!(
                        "{} bands given for {} classes",
                        b.len(),
                        self.classes
                    )));
                }
                b.clone()
            }
            None if self.classes <= DEFAULT_BANDS.len() => DEFAULT_BANDS[..self.classes].to_vec(),
            None => {
                let (lo, hi) = (200.0f64, 0.45 * self.sample_rate as f64);
                let edges = 2 * self.classes;
                let ratio = (hi / lo).powf(1.0 / (edges - 1) as f64);
                (0..self.classes)
                    .map(|j| {
                        (
                            lo * ratio.powi(2 * j as i32),
                            lo * ratio.powi(2 * j as i32 + 1),
                        )
                    })
                    .collect()
            }
        };
        let nyquist = self.sample_rate as f64 / 2.0;
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::Param(format!("band {j} [{lo}, {hi}) is empty")));
            }
            if hi > nyquist {
                return Err(Error::Param(format!(
                    "band {j} upper edge {hi} Hz exceeds the Nyquist frequency {nyquist} Hz"
                )));
            }
        }
        let mut sorted = bands.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Param("class bands overlap".into()));
        }
        Ok(bands)
    }

    pub fn label(class: usize) -> String {
        format!("class{class:02}")
    }

    pub fn file_name(class: usize, clip: usize) -> String {
        format!("{}_clip{clip:04}.wav", Self::label(class))
    }
}

/// One clip: a few tones drawn inside `band` with random phases and
/// amplitudes, plus white Gaussian noise at the requested SNR, peak
/// scaled to 0.9.
pub fn synth_clip(spec: &SynthSpec, band: (f64, f64), stream: u64) -> Vec<f32> {
    let mut rng = rng_from_seed(derived_seed(spec.seed, stream));
    let n = (spec.clip_seconds * spec.sample_rate as f64).round() as usize;
    let rate = spec.sample_rate as f64;
    let tones: Vec<(f64, f64, f64)> = (0..TONES_PER_CLIP)
        .map(|_| {
            let f = rng.random_range(band.0..band.1);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            (f, phase, amp)
        })
        .collect();
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            tones
                .iter()
                .map(|&(f, ph, a)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum()
        })
        .collect();
    let power = x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let sigma = (power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    x.into_iter().map(|v| (v * scale) as f32).collect()
}

/// Writes every clip as a mono PCM-16 WAV under `out_dir` together with
/// `manifest.csv`, and returns the manifest.
pub fn synth_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let bands = spec.class_bands()?;
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.clips_per_class).map(move |i| (c, i)))
        .collect();
    worker_pool()?.install(|| {
        jobs.par_iter().try_for_each(|&(c, i)| {
            let stream = (c * spec.clips_per_class + i) as u64;
            let clip = synth_clip(spec, bands[c], stream);
            write_wav(
                out_dir.join(SynthSpec::file_name(c, i)),
                &clip,
                spec.sample_rate,
            )
        })
    })?;
    let rows = jobs
        .iter()
        .map(|&(c, i)| ManifestRow {
            path: SynthSpec::file_name(c, i),
            label: SynthSpec::label(c),
            split: None,
        })
        .collect();
    let manifest = Manifest::new(rows, out_dir)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
