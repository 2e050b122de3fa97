//! Audio ingestion, windowing, dataset splits and the synthetic corpus.

mod cache;
mod manifest;
mod signal;
mod synth;
mod wav;

pub use cache::{decode_cache, encode_cache, read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use manifest::{
    emodb_emotion, emodb_manifest, largest_remainder, split_stratified, Manifest, ManifestRow,
    Split,
};
pub use signal::{
    hop_for, normalize_window, resample_linear, segment_windows, window_count, window_geometry,
};
pub use synth::{synth_clip, synth_dataset, SynthSpec, DEFAULT_BANDS};
pub use wav::{decode_wav, encode_wav_pcm16, quantize_pcm16, read_wav, write_wav, AudioClip};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable capping data-pipeline worker threads.
pub const THREADS_ENV: &str = "WADENET_THREADS";

/// Thread pool sized by `WADENET_THREADS`, defaulting to the core count.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
            })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One standardized waveform window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedExample {
    pub window: Vec<f32>,
    pub label: usize,
    pub split: Split,
    /// Row of the originating clip in the manifest.
    pub clip_id: usize,
}

/// How clips become windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub overlap: f64,
    pub split_ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            overlap: 0.75,
            split_ratios: [0.6, 0.2, 0.2],
        }
    }
}

/// Every window of every split clip, in manifest order then time order.
///
/// Clips are decoded in parallel; output order does not depend on the
/// number of workers.
pub fn load_windows(
    manifest: &Manifest,
    data: &DataConfig,
    window_len: usize,
) -> Result<Vec<WindowedExample>> {
    if !manifest.is_split() {
        return Err(Error::Data("manifest has rows without a split".into()));
    }
    let labels = manifest.label_indices();
    let hop = hop_for(window_len, data.overlap);
    let per_clip: Vec<Result<Vec<WindowedExample>>> = worker_pool()?.install(|| {
        manifest
            .rows
            .par_iter()
            .enumerate()
            .map(|(clip_id, row)| {
                let clip = read_wav(manifest.resolve(row))?;
                let clip = resample_linear(&clip, data.sample_rate);
                let windows = segment_windows(&clip.samples, window_len, hop);
                if windows.is_empty() {
                    log::warn!(
                        "{} has {} samples, shorter than one {window_len}-sample window; skipped",
                        row.path,
                        clip.samples.len()
                    );
                }
                Ok(windows
                    .into_iter()
                    .map(|w| {
                        let mut v: Vec<f64> = w.iter().map(|&s| s as f64).collect();
                        normalize_window(&mut v);
                        WindowedExample {
                            window: v.into_iter().map(|s| s as f32).collect(),
                            label: labels[clip_id],
                            split: row.split.expect("checked above"),
                            clip_id,
                        }
                    })
                    .collect())
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_clip {
        out.extend(r?);
    }
    Ok(out)
}
