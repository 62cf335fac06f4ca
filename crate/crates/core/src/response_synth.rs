//! Synthetic vibrometer spectra for dies with known ground truth.
//!
//! Each mode contributes a Lorentzian magnitude line
//! `w / (1 + ((f - f0) / gamma)^2)` with half width `gamma = f0 / (2 Q)`.
//! The weight `w` is the product of the mode-shape amplitudes at the scan
//! point and at the excitation electrode, so electrode placement changes
//! amplitudes but never frequencies. On top come per-mode frequency jitter,
//! single-bin spurious peaks and additive uniform noise.
//!
//! Randomness is drawn from a ChaCha8 stream seeded with the die seed, in a
//! fixed order: jitter, spurious peaks, noise. Same seed, same bytes on every
//! platform.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plate_model::{mode_amplitude_at_point, MaterialProps, MembraneGeometry, ModeIndex, Plate, StressState};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefectSpec {
    #[default]
    None,
    /// type 1: no membrane, no resonances
    NoMembrane,
    /// type 2: side a scaled by `1 + ratio`, side b by `1 / (1 + ratio)`
    Asymmetry { ratio: f64 },
}

impl DefectSpec {
    pub fn is_defect(&self) -> bool {
        !matches!(self, DefectSpec::None)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DefectSpec::Asymmetry { ratio } if !(ratio > 0.0 && ratio.is_finite()) => {
                Err(Error::Domain(format!("asymmetry ratio must be positive, got {ratio}")))
            }
            _ => Ok(()),
        }
    }
}

/// Ground truth of one simulated die.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DieTruth {
    pub geometry: MembraneGeometry,
    pub material: MaterialProps,
    pub stress: StressState,
    pub defect: DefectSpec,
    pub rng_seed: u64,
}

/// Sweep and scan settings. Positions are fractions of the membrane sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub bin_count: usize,
    pub quality_factor: f64,
    /// uniform noise amplitude relative to the largest peak
    pub noise_floor: f64,
    /// relative sigma of the multiplicative peak-frequency noise
    pub freq_jitter_sigma: f64,
    /// expected number of spurious peaks per spectrum
    pub spurious_peak_rate: f64,
    /// spurious peak height range relative to the largest peak
    pub spurious_amplitude: (f64, f64),
    pub measurement_points: Vec<(f64, f64)>,
    pub electrode_position: (f64, f64),
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        AcquisitionSpec {
            f_min_hz: 10e3,
            f_max_hz: 1e6,
            bin_count: 4096,
            quality_factor: 500.0,
            noise_floor: 1e-3,
            freq_jitter_sigma: 5e-4,
            spurious_peak_rate: 2.0,
            spurious_amplitude: (0.005, 0.05),
            measurement_points: vec![(0.29, 0.37), (0.71, 0.62), (0.43, 0.79)],
            electrode_position: (0.37, 0.29),
        }
    }
}

impl AcquisitionSpec {
    /// Noise, jitter and spurious peaks switched off.
    pub fn noiseless() -> Self {
        AcquisitionSpec {
            noise_floor: 0.0,
            freq_jitter_sigma: 0.0,
            spurious_peak_rate: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("acquisition: {m}")));
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz && self.f_max_hz.is_finite()) {
            return bad("need 0 <= f_min < f_max");
        }
        if self.bin_count < 2 {
            return bad("bin_count must be >= 2");
        }
        if !(self.quality_factor > 0.0 && self.quality_factor.is_finite()) {
            return bad("quality factor must be positive");
        }
        if !(self.noise_floor >= 0.0 && self.freq_jitter_sigma >= 0.0 && self.spurious_peak_rate >= 0.0) {
            return bad("noise settings must be non-negative");
        }
        let (lo, hi) = self.spurious_amplitude;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("spurious amplitude range must satisfy 0 <= lo <= hi");
        }
        if self.measurement_points.is_empty() {
            return bad("at least one measurement point is required");
        }
        let inside = |&(u, v): &(f64, f64)| u > 0.0 && u < 1.0 && v > 0.0 && v < 1.0;
        if !self.measurement_points.iter().all(inside) || !inside(&self.electrode_position) {
            return bad("positions must lie strictly inside (0, 1) x (0, 1)");
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.f_max_hz - self.f_min_hz) / (self.bin_count - 1) as f64
    }

    pub fn frequency_grid(&self) -> Vec<f64> {
        crate::units::linspace(self.f_min_hz, self.f_max_hz, self.bin_count)
    }
}

/// Magnitude spectrum per measurement point on a shared frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyResponse {
    pub freqs: Vec<f64>,
    pub amplitude: Vec<Vec<f64>>,
}

impl FrequencyResponse {
    pub fn channel_count(&self) -> usize {
        self.amplitude.len()
    }

    /// Pointwise maximum over all measurement points.
    pub fn combined(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.freqs.len()];
        for ch in &self.amplitude {
            for (o, &a) in out.iter_mut().zip(ch) {
                *o = o.max(a);
            }
        }
        out
    }

    /// Multiplies every amplitude by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        FrequencyResponse {
            freqs: self.freqs.clone(),
            amplitude: self
                .amplitude
                .iter()
                .map(|ch| ch.iter().map(|a| a * c).collect())
                .collect(),
        }
    }

    /// CSV with columns `freq_hz, amp_point1, amp_point2, ...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["freq_hz".to_string()];
        header.extend((1..=self.channel_count()).map(|i| format!("amp_point{i}")));
        w.write_record(&header)?;
        for (i, f) in self.freqs.iter().enumerate() {
            let mut rec = vec![format!("{f:.6}")];
            rec.extend(self.amplitude.iter().map(|ch| format!("{:.9e}", ch[i])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Geometry the die actually has, or `None` when there is no membrane.
pub fn effective_geometry(truth: &DieTruth) -> Option<MembraneGeometry> {
    match truth.defect {
        DefectSpec::None => Some(truth.geometry),
        DefectSpec::NoMembrane => None,
        DefectSpec::Asymmetry { ratio } => {
            let mut g = truth.geometry;
            g.side_a *= 1.0 + ratio;
            g.side_b /= 1.0 + ratio;
            Some(g)
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed from a base seed and a key path, e.g.
/// `derive_seed(wafer_seed, &[row, col])`.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(base), |acc, &k| mix64(acc ^ mix64(k)))
}

/// A resonance placed into the spectrum: mode, jittered frequency and weight
/// per measurement point.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedMode {
    pub mode: ModeIndex,
    pub frequency: f64,
    pub weights: Vec<f64>,
}

fn place_modes(plate: &Plate, acq: &AcquisitionSpec, rng: &mut ChaCha8Rng) -> Vec<PlacedMode> {
    let g = plate.geometry;
    let at = |(u, v): (f64, f64)| (u * g.side_a, v * g.side_b);
    let electrode = at(acq.electrode_position);
    // modes just above the band can be jittered into it
    let limit = acq.f_max_hz * (1.0 + 10.0 * acq.freq_jitter_sigma) + 1.0;
    let mut prev: Option<(f64, f64)> = None;
    plate
        .modes_below(limit)
        .into_iter()
        .map(|(mode, f)| {
            // degenerate modes form one physical line and share the draw
            let factor = match prev {
                Some((pf, factor)) if pf == f => factor,
                _ => {
                    let n: f64 = StandardNormal.sample(rng);
                    1.0 + acq.freq_jitter_sigma * n
                }
            };
            prev = Some((f, factor));
            let e = mode_amplitude_at_point(mode, &g, electrode).abs();
            let weights = acq
                .measurement_points
                .iter()
                .map(|&p| mode_amplitude_at_point(mode, &g, at(p)).abs() * e)
                .collect();
            PlacedMode {
                mode,
                frequency: f * factor,
                weights,
            }
        })
        .collect()
}

/// Modes (with jitter) that [`synthesize`] would place for this die.
pub fn placed_modes(truth: &DieTruth, acq: &AcquisitionSpec) -> Result<Vec<PlacedMode>> {
    acq.validate()?;
    let Some(geom) = effective_geometry(truth) else {
        return Ok(Vec::new());
    };
    let plate = Plate::new(geom, truth.material, truth.stress)?;
    let mut rng = ChaCha8Rng::seed_from_u64(truth.rng_seed);
    Ok(place_modes(&plate, acq, &mut rng))
}

/// Synthesizes the measured frequency response of one die.
pub fn synthesize(truth: &DieTruth, acq: &AcquisitionSpec) -> Result<FrequencyResponse> {
    acq.validate()?;
    truth.defect.validate()?;
    let freqs = acq.frequency_grid();
    let channels = acq.measurement_points.len();
    let mut amplitude = vec![vec![0.0f64; freqs.len()]; channels];
    let mut rng = ChaCha8Rng::seed_from_u64(truth.rng_seed);

    let membrane = effective_geometry(truth);
    if let Some(geom) = membrane {
        let plate = Plate::new(geom, truth.material, truth.stress)?;
        for pm in place_modes(&plate, acq, &mut rng) {
            let gamma = pm.frequency / (2.0 * acq.quality_factor);
            for (ch, &w) in amplitude.iter_mut().zip(&pm.weights) {
                if w == 0.0 {
                    continue;
                }
                for (a, &f) in ch.iter_mut().zip(&freqs) {
                    let x = (f - pm.frequency) / gamma;
                    *a += w / (1.0 + x * x);
                }
            }
        }
    }

    let peak = amplitude.iter().flatten().fold(0.0f64, |m, &a| m.max(a));
    let reference = if peak > 0.0 { peak } else { 1.0 };

    if membrane.is_some() && acq.spurious_peak_rate > 0.0 {
        let count = Poisson::new(acq.spurious_peak_rate)
            .map_err(|e| Error::Config(format!("spurious rate: {e}")))?
            .sample(&mut rng) as usize;
        let (lo, hi) = acq.spurious_amplitude;
        for _ in 0..count {
            let bin = rng.random_range(0..freqs.len());
            let amp = reference * (lo + (hi - lo) * rng.random::<f64>());
            for ch in amplitude.iter_mut() {
                ch[bin] += amp;
            }
        }
    }

    if acq.noise_floor > 0.0 {
        let level = acq.noise_floor * reference;
        for ch in amplitude.iter_mut() {
            for a in ch.iter_mut() {
                *a += level * rng.random::<f64>();
            }
        }
    }

    Ok(FrequencyResponse { freqs, amplitude })
}
