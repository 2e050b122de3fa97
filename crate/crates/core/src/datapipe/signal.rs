use super::wav::AudioClip;
use crate::scalar::Scalar;

/// Linear interpolation onto `round(len·target/source)` samples whose
/// first and last points coincide with the input's.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    if clip.sample_rate == target_rate || clip.samples.is_empty() {
        return clip.clone();
    }
    let n = clip.samples.len();
    let m = ((n as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize).max(1);
    let samples = if n == 1 || m == 1 {
        vec![clip.samples[0]; m]
    } else {
        let step = (n - 1) as f64 / (m - 1) as f64;
        (0..m)
            .map(|i| {
                let pos = i as f64 * step;
                let j = (pos.floor() as usize).min(n - 2);
                let frac = pos - j as f64;
                let (a, b) = (clip.samples[j] as f64, clip.samples[j + 1] as f64);
                (a + (b - a) * frac) as f32
            })
            .collect()
    };
    AudioClip {
        samples,
        sample_rate: target_rate,
        source_path: clip.source_path.clone(),
        label: clip.label,
    }
}

/// Window length and hop in samples for a duration and overlap fraction.
pub fn window_geometry(sample_rate: u32, window_ms: f64, overlap: f64) -> (usize, usize) {
    let len = (sample_rate as f64 * window_ms / 1000.0).round() as usize;
    (len, hop_for(len, overlap))
}

pub fn hop_for(window_len: usize, overlap: f64) -> usize {
    ((window_len as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Windows that fit entirely inside `samples` samples.
pub fn window_count(samples: usize, window_len: usize, hop: usize) -> usize {
    if samples < window_len || window_len == 0 {
        0
    } else {
        (samples - window_len) / hop + 1
    }
}

/// Fixed-length slices starting every `hop` samples. Clips shorter than
/// one window yield nothing.
pub fn segment_windows<T: Copy>(samples: &[T], window_len: usize, hop: usize) -> Vec<&[T]> {
    (0..window_count(samples.len(), window_len, hop))
        .map(|i| &samples[i * hop..i * hop + window_len])
        .collect()
}

/// Standardizes a window in place: subtract the mean, divide by
/// `stddev + 1e-8` (population stddev).
pub fn normalize_window<T: Scalar>(w: &mut [T]) {
    if w.is_empty() {
        return;
    }
    let n = T::from_usize_lossy(w.len());
    let mean = w.iter().copied().sum::<T>() / n;
    let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let denom = var.sqrt() + T::lit(1e-8);
    for v in w.iter_mut() {
        *v = (*v - mean) / denom;
    }
}
