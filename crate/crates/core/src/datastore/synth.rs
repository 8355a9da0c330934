use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, SessionInfo};
use crate::error::{Error, Result};
use crate::signal::{CirMeasurement, DEFAULT_SIGNAL_LEN};

const PULSE_CENTER: f64 = 45.0;
const PULSE_WIDTH: f64 = 3.0;
const CHIRP_RATE: f64 = 0.03;
const MAX_BULK_DELAY: usize = 10;
const MAX_TAP_DELAY: usize = 40;
const DEVICE_TAPS: usize = 3;

// independent random streams so that e.g. device fingerprints do not depend
// on how many locations are generated
const STREAM_DEVICES: u64 = 1;
const STREAM_LOCATIONS: u64 = 2;
const STREAM_MEASUREMENTS: u64 = 3;

/// Parameters of the synthetic CIR campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_devices: usize,
    pub num_locations: usize,
    pub per_cell: usize,
    /// Standard deviation of the per-device filter and IQ deviations.
    pub fingerprint_strength: f64,
    pub multipath_taps: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Extra locations recorded in a second session at 2 m (0 disables it).
    pub far_session_locations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_devices: 13,
            num_locations: 10,
            per_cell: 20,
            fingerprint_strength: 0.3,
            multipath_taps: 4,
            noise_sigma: 0.01,
            seed: 0,
            far_session_locations: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices < 2 || self.num_devices > u16::MAX as usize {
            return Err(Error::invalid("num_devices must lie in [2, 65535]"));
        }
        if self.num_locations == 0 || self.num_locations + self.far_session_locations > u16::MAX as usize {
            return Err(Error::invalid("num_locations must be positive and fit in u16"));
        }
        if self.per_cell == 0 {
            return Err(Error::invalid("per_cell must be at least 1"));
        }
        if self.multipath_taps == 0 {
            return Err(Error::invalid("multipath_taps must be at least 1"));
        }
        if !(self.fingerprint_strength >= 0.0 && self.fingerprint_strength.is_finite()) {
            return Err(Error::invalid("fingerprint_strength must be finite and non-negative"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Hardware impairments of one emitter.
struct DeviceModel {
    taps: [Complex64; DEVICE_TAPS],
    iq_image: Complex64,
}

impl DeviceModel {
    fn draw(strength: f64, rng: &mut impl Rng) -> Self {
        let mut taps = [Complex64::new(0.0, 0.0); DEVICE_TAPS];
        taps[0] = Complex64::new(1.0, 0.0);
        for t in taps.iter_mut() {
            *t += complex_normal(rng) * strength;
        }
        Self {
            taps,
            iq_image: complex_normal(rng) * (0.5 * strength),
        }
    }

    fn drifted(&self, amount: f64, rng: &mut impl Rng) -> Self {
        let mut taps = self.taps;
        for t in taps.iter_mut() {
            *t += complex_normal(rng) * amount;
        }
        Self {
            taps,
            iq_image: self.iq_image + complex_normal(rng) * (0.5 * amount),
        }
    }

    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let filtered = fir(x, self.taps.iter().enumerate().map(|(d, g)| (d, *g)));
        filtered.iter().map(|v| v + self.iq_image * v.conj()).collect()
    }
}

/// Multipath profile of one transmitter location.
struct LocationModel {
    taps: Vec<(usize, Complex64)>,
}

impl LocationModel {
    fn draw(num_taps: usize, rng: &mut impl Rng) -> Self {
        let bulk = rng.random_range(0..=MAX_BULK_DELAY);
        let mut taps = vec![(bulk, Complex64::new(1.0, 0.0))];
        for _ in 1..num_taps {
            let delay = rng.random_range(1..=MAX_TAP_DELAY);
            let mag = rng.random_range(0.2..0.7) * (-(delay as f64) / 20.0).exp();
            let phase = rng.random_range(0.0..2.0 * PI);
            taps.push((bulk + delay, Complex64::from_polar(mag, phase)));
        }
        Self { taps }
    }
}

fn fir(x: &[Complex64], taps: impl Iterator<Item = (usize, Complex64)> + Clone) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (n, o) in out.iter_mut().enumerate() {
        for (d, g) in taps.clone() {
            if d <= n {
                *o += g * x[n - d];
            }
        }
    }
    out
}

fn base_pulse(len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|n| {
            let u = n as f64 - PULSE_CENTER;
            Complex64::from_polar((-0.5 * (u / PULSE_WIDTH).powi(2)).exp(), PI * CHIRP_RATE * u * u)
        })
        .collect()
}

/// Deterministically generates a labeled synthetic CIR dataset.
///
/// Each trace is a Gaussian-envelope chirp passed through the emitter's
/// 3-tap filter and IQ imbalance, rotated by a random carrier phase, convolved
/// with the location's multipath profile, scaled by a random gain and
/// corrupted by complex white noise. Samples are rounded to `f32`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let len = DEFAULT_SIGNAL_LEN;
    let pulse = base_pulse(len);

    let mut dev_rng = stream(cfg.seed, STREAM_DEVICES);
    let devices: Vec<DeviceModel> = (0..cfg.num_devices)
        .map(|_| DeviceModel::draw(cfg.fingerprint_strength, &mut dev_rng))
        .collect();
    let drifted: Vec<DeviceModel> = devices
        .iter()
        .map(|d| d.drifted(0.25 * cfg.fingerprint_strength, &mut dev_rng))
        .collect();

    let mut loc_rng = stream(cfg.seed, STREAM_LOCATIONS);
    let total_locations = cfg.num_locations + cfg.far_session_locations;
    let locations: Vec<LocationModel> = (0..total_locations)
        .map(|_| LocationModel::draw(cfg.multipath_taps, &mut loc_rng))
        .collect();

    let mut rng = stream(cfg.seed, STREAM_MEASUREMENTS);
    let mut records = Vec::with_capacity(total_locations * cfg.num_devices * cfg.per_cell);
    for (loc_id, loc) in locations.iter().enumerate() {
        let far = loc_id >= cfg.num_locations;
        let (session_id, distance_m, emitters) = if far { (1, 2.0, &drifted) } else { (0, 1.0, &devices) };
        for (dev_id, dev) in emitters.iter().enumerate() {
            let emitted = dev.apply(&pulse);
            for _ in 0..cfg.per_cell {
                let carrier = Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));
                let rotated: Vec<Complex64> = emitted.iter().map(|v| v * carrier).collect();
                let received = fir(&rotated, loc.taps.iter().copied());
                let gain = rng.random_range(0.5..2.0);
                let samples = received
                    .iter()
                    .map(|v| {
                        let s = v * gain + complex_normal(&mut rng) * cfg.noise_sigma;
                        Complex64::new(s.re as f32 as f64, s.im as f32 as f64)
                    })
                    .collect();
                records.push(CirMeasurement {
                    samples,
                    device_id: dev_id as u16,
                    location_id: loc_id as u16,
                    session_id,
                    distance_m,
                });
            }
        }
    }

    let mut sessions = vec![SessionInfo {
        session_id: 0,
        distance_m: 1.0,
        day_tag: "day1".into(),
    }];
    if cfg.far_session_locations > 0 {
        sessions.push(SessionInfo {
            session_id: 1,
            distance_m: 2.0,
            day_tag: "day2".into(),
        });
    }
    let meta = DatasetMeta {
        signal_len: len,
        num_devices: cfg.num_devices,
        num_locations: total_locations,
        measurements_per_cell: cfg.per_cell,
        sessions,
        ..DatasetMeta::default()
    };
    Ok(Dataset { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::peak_index;

    fn small() -> SynthConfig {
        SynthConfig {
            num_devices: 3,
            num_locations: 2,
            per_cell: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 3 * 2 * 4);
        assert!(a.records.iter().all(|r| r.validate(250).is_ok()));
        let other = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.records[0].samples, other.records[0].samples);
    }

    #[test]
    fn full_campaign_count() {
        let cfg = SynthConfig {
            num_devices: 13,
            num_locations: 50,
            per_cell: 20,
            ..SynthConfig::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap().records.len(), 13_000);
    }

    #[test]
    fn zero_strength_makes_devices_identical() {
        let cfg = SynthConfig {
            fingerprint_strength: 0.0,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let devices: Vec<DeviceModel> = (0..4).map(|_| DeviceModel::draw(cfg.fingerprint_strength, &mut rng)).collect();
        let pulse = base_pulse(250);
        let reference = devices[0].apply(&pulse);
        for d in &devices[1..] {
            assert_eq!(d.apply(&pulse), reference);
        }
        assert_eq!(reference, pulse);
    }

    #[test]
    fn peaks_land_near_the_pulse_center() {
        let ds = synth_generate(&small()).unwrap();
        for r in &ds.records {
            let p = peak_index(&r.samples).unwrap();
            assert!((40..=70).contains(&p), "peak at {p}");
        }
    }

    #[test]
    fn far_session_uses_two_meters() {
        let cfg = SynthConfig {
            far_session_locations: 2,
            ..small()
        };
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.records.len(), 3 * 4 * 4);
        assert_eq!(ds.records.iter().filter(|r| r.distance_m == 2.0).count(), 3 * 2 * 4);
        assert_eq!(ds.meta.sessions.len(), 2);
    }

    #[test]
    fn invalid_configs() {
        assert!(synth_generate(&SynthConfig { per_cell: 0, ..small() }).is_err());
        assert!(synth_generate(&SynthConfig { multipath_taps: 0, ..small() }).is_err());
        assert!(synth_generate(&SynthConfig { noise_sigma: -1.0, ..small() }).is_err());
    }
}
