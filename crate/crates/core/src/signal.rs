//! CIR preprocessing: amplitude normalization, peak alignment and the
//! Hann-windowed STFT that turns a complex trace into a 32×32 magnitude grid.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of complex samples per CIR trace.
pub const DEFAULT_SIGNAL_LEN: usize = 250;
/// Default time index where the primary pulse peak is placed.
pub const DEFAULT_PEAK_INDEX: usize = 50;

/// One labeled complex channel impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct CirMeasurement {
    pub samples: Vec<Complex64>,
    pub device_id: u16,
    pub location_id: u16,
    pub session_id: u8,
    pub distance_m: f32,
}

impl CirMeasurement {
    pub fn new(samples: Vec<Complex64>, device_id: u16, location_id: u16) -> Self {
        Self {
            samples,
            device_id,
            location_id,
            session_id: 0,
            distance_m: 1.0,
        }
    }

    pub fn labels(&self) -> SourceLabels {
        SourceLabels {
            device_id: self.device_id,
            location_id: self.location_id,
            session_id: self.session_id,
        }
    }

    /// Checks the trace length and that every sample is finite.
    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if self.samples.len() != signal_len {
            return Err(Error::invalid(format!(
                "trace has {} samples, expected {signal_len}",
                self.samples.len()
            )));
        }
        if let Some(k) = self.samples.iter().position(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::invalid(format!("sample {k} is not finite")));
        }
        Ok(())
    }

    fn with_samples(&self, samples: Vec<Complex64>) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLabels {
    pub device_id: u16,
    pub location_id: u16,
    pub session_id: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub n_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 32,
            hop: 7,
            n_bins: 32,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 {
            return Err(Error::invalid("window_len and hop must be positive"));
        }
        if self.n_bins != self.window_len {
            return Err(Error::invalid(format!(
                "n_bins ({}) must equal window_len ({})",
                self.n_bins, self.window_len
            )));
        }
        Ok(())
    }

    /// Number of frames produced for a trace of `signal_len` samples.
    pub fn frame_count(&self, signal_len: usize) -> usize {
        if signal_len < self.window_len {
            0
        } else {
            (signal_len - self.window_len) / self.hop + 1
        }
    }
}

/// Complex time-frequency grid, row-major `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }
}

/// Real grid fed to the encoders; `rows` are STFT frames, `cols` frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<f64>,
    pub source_labels: SourceLabels,
}

/// Symmetric Hann window.
pub fn hann_window(len: usize) -> Result<Vec<f64>> {
    match len {
        0 => Err(Error::invalid("window length must be at least 1")),
        1 => Ok(vec![1.0]),
        _ => {
            let denom = (len - 1) as f64;
            Ok((0..len)
                .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / denom).cos()))
                .collect())
        }
    }
}

/// Min-max scales sample magnitudes to [0, 1] and keeps each sample's phase.
pub fn normalize_amplitude(m: &CirMeasurement) -> CirMeasurement {
    let mags: Vec<f64> = m.samples.iter().map(|s| s.norm()).collect();
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.samples.is_empty() || !(hi > lo) {
        return m.with_samples(vec![Complex64::new(0.0, 0.0); m.samples.len()]);
    }
    let span = hi - lo;
    let samples = m
        .samples
        .iter()
        .zip(&mags)
        .map(|(s, &a)| {
            let target = (a - lo) / span;
            if a > 0.0 {
                s * (target / a)
            } else {
                // a zero sample has no phase; only reachable when lo == 0
                Complex64::new(target, 0.0)
            }
        })
        .collect();
    m.with_samples(samples)
}

/// Index of the largest-magnitude sample, earliest on ties.
pub fn peak_index(samples: &[Complex64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in samples.iter().enumerate() {
        let a = s.norm_sqr();
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((k, a)),
        }
    }
    best.map(|(k, _)| k)
}

/// Translates the trace so its peak sits at `target_index`; vacated positions are zero.
pub fn center_peak(m: &CirMeasurement, target_index: usize) -> Result<CirMeasurement> {
    let len = m.samples.len();
    if target_index >= len {
        return Err(Error::invalid(format!(
            "target index {target_index} outside trace of length {len}"
        )));
    }
    let peak = peak_index(&m.samples).unwrap_or(target_index);
    let shift = target_index as isize - peak as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for (k, s) in m.samples.iter().enumerate() {
        let dst = k as isize + shift;
        if (0..len as isize).contains(&dst) {
            out[dst as usize] = *s;
        }
    }
    Ok(m.with_samples(out))
}

/// Hann-windowed STFT with the phase referenced to the absolute sample index:
/// `X[t, k] = sum_n x[n] w[n - tR] exp(-j 2π k n / N)`.
pub fn stft(samples: &[Complex64], cfg: &StftConfig) -> Result<ComplexGrid> {
    cfg.validate()?;
    if samples.len() < cfg.window_len {
        return Err(Error::invalid(format!(
            "window length {} exceeds trace length {}",
            cfg.window_len,
            samples.len()
        )));
    }
    let window = hann_window(cfg.window_len)?;
    let n = cfg.n_bins;
    let frames = cfg.frame_count(samples.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);

    let mut data = Vec::with_capacity(frames * n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = samples[start + i] * window[i];
        }
        fft.process(&mut buf);
        // the FFT indexes from the frame start; shift the phase back to absolute n
        for (k, v) in buf.iter().enumerate() {
            let turns = ((k * start) % n) as f64 / n as f64;
            data.push(v * Complex64::from_polar(1.0, -2.0 * PI * turns));
        }
    }
    Ok(ComplexGrid {
        frames,
        bins: n,
        data,
    })
}

/// Full pipeline: normalize, center, STFT, magnitude, per-grid min-max.
pub fn preprocess(m: &CirMeasurement, cfg: &StftConfig) -> Result<ModelInput> {
    let normalized = normalize_amplitude(m);
    let target = DEFAULT_PEAK_INDEX.min(normalized.samples.len().saturating_sub(1));
    let centered = center_peak(&normalized, target)?;
    let spec = stft(&centered.samples, cfg)?;
    let mut grid: Vec<f64> = spec.data.iter().map(|c| c.norm()).collect();
    minmax_in_place(&mut grid);
    Ok(ModelInput {
        rows: spec.frames,
        cols: spec.bins,
        grid,
        source_labels: m.labels(),
    })
}

fn minmax_in_place(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let span = hi - lo;
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(samples: Vec<Complex64>) -> CirMeasurement {
        CirMeasurement::new(samples, 0, 0)
    }

    fn impulse(len: usize, at: usize, amp: f64) -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); len];
        v[at] = Complex64::new(amp, 0.0);
        v
    }

    #[test]
    fn hann_small_windows() {
        assert_eq!(hann_window(1).unwrap(), vec![1.0]);
        let w3 = hann_window(3).unwrap();
        for (a, b) in w3.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w4 = hann_window(4).unwrap();
        for (a, b) in w4.iter().zip([0.0, 0.75, 0.75, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(hann_window(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn normalize_hand_example() {
        let m = trace(vec![
            Complex64::new(0.0, 0.0),
            Complex64::from_polar(2.0, PI / 2.0),
            Complex64::new(1.0, 0.0),
        ]);
        let out = normalize_amplitude(&m);
        let mags: Vec<f64> = out.samples.iter().map(|s| s.norm()).collect();
        for (a, b) in mags.iter().zip([0.0, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.samples[1].arg() - PI / 2.0).abs() < 1e-12);
        assert!(out.samples[2].arg().abs() < 1e-12);
    }

    #[test]
    fn normalize_identity_and_constant() {
        let m = trace(vec![
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(0.5, 0.0),
        ]);
        assert_eq!(normalize_amplitude(&m), m);

        let c = trace(vec![Complex64::from_polar(3.0, 0.3); 5]);
        assert!(normalize_amplitude(&c).samples.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn center_peak_cases() {
        let at_target = trace(impulse(250, 50, 1.0));
        assert_eq!(center_peak(&at_target, 50).unwrap(), at_target);

        let moved = center_peak(&trace(impulse(250, 10, 1.0)), 50).unwrap();
        assert_eq!(moved.samples, impulse(250, 50, 1.0));

        let mut two = impulse(250, 10, 1.0);
        two[30] = Complex64::new(0.0, 1.0);
        let out = center_peak(&trace(two), 50).unwrap();
        assert_eq!(out.samples[50], Complex64::new(1.0, 0.0));
        assert_eq!(out.samples[70], Complex64::new(0.0, 1.0));

        assert!(center_peak(&at_target, 250).is_err());
    }

    #[test]
    fn center_peak_zero_fills() {
        let mut s: Vec<Complex64> = (0..20).map(|k| Complex64::new(0.1 * k as f64, 0.0)).collect();
        s[2] = Complex64::new(5.0, 0.0);
        let out = center_peak(&trace(s.clone()), 12).unwrap();
        assert!(out.samples[..10].iter().all(|v| v.norm() == 0.0));
        assert_eq!(out.samples[12], s[2]);
        assert_eq!(out.samples[19], s[9]);
    }

    #[test]
    fn stft_default_geometry() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(250), 32);
        let g = stft(&vec![Complex64::new(0.0, 0.0); 250], &cfg).unwrap();
        assert_eq!((g.frames, g.bins), (32, 32));
        assert!(g.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn stft_rejects_bad_config() {
        let x = vec![Complex64::new(1.0, 0.0); 16];
        let cfg = StftConfig::default();
        assert!(matches!(stft(&x, &cfg), Err(Error::InvalidArgument(_))));
        let bad = StftConfig { window_len: 8, hop: 0, n_bins: 8 };
        assert!(stft(&x, &bad).is_err());
        let bad = StftConfig { window_len: 8, hop: 2, n_bins: 16 };
        assert!(stft(&x, &bad).is_err());
    }

    #[test]
    fn stft_tone_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let k0 = 5;
        let x: Vec<Complex64> = (0..250)
            .map(|n| Complex64::from_polar(1.0, 2.0 * PI * (k0 * n) as f64 / 32.0))
            .collect();
        let g = stft(&x, &cfg).unwrap();
        for t in 0..g.frames {
            let best = (0..g.bins)
                .max_by(|&a, &b| g.at(t, a).norm().total_cmp(&g.at(t, b).norm()))
                .unwrap();
            assert_eq!(best, k0);
        }
    }

    #[test]
    fn preprocess_zero_and_range() {
        let cfg = StftConfig::default();
        let zero = preprocess(&trace(vec![Complex64::new(0.0, 0.0); 250]), &cfg).unwrap();
        assert_eq!((zero.rows, zero.cols), (32, 32));
        assert!(zero.grid.iter().all(|&v| v == 0.0));

        let x: Vec<Complex64> = (0..250)
            .map(|n| Complex64::from_polar((-((n as f64 - 80.0) / 6.0).powi(2)).exp(), 0.05 * n as f64))
            .collect();
        let a = preprocess(&trace(x.clone()), &cfg).unwrap();
        let lo = a.grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let b = preprocess(&trace(x), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_detects_bad_traces() {
        let mut m = trace(vec![Complex64::new(1.0, 0.0); 250]);
        assert!(m.validate(250).is_ok());
        assert!(m.validate(249).is_err());
        m.samples[3].im = f64::NAN;
        assert!(m.validate(250).is_err());
    }
}
